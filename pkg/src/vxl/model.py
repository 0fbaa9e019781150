"""Toy decoder-only transformer with an explicit per-layer KV cache.

One shared layer-stack pass (`transformer_pass`) drives everything:
full attention, incremental decoding, and the chunked compression path.
Running the whole sequence as a single chunk with an empty cache *is*
`forward_full`, so the pass-through oracle comparison is bit-identical
by construction rather than merely close.

Pre-norm blocks with RMS normalization, rotary positions on Q/K, a
gated (up/gate/down) MLP, grouped-query key/value sharing, no biases.
Keys are cached post-rotary, so a cache entry is frozen once written.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import numerics
from .errors import NonFiniteError, PlanError, ShapeError, WindowError
from .numerics import OpCounter, Rng, dtype_for

ROPE_BASE = 10000.0
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden_size: int = 64
    query_heads: int = 4
    kv_heads: int = 4
    head_dim: int = 16
    intermediate_size: int = 192
    vocab_size: int = 512
    context_window: int = 512
    precision: int = 8

    def validate(self) -> "ModelConfig":
        if self.hidden_size != self.query_heads * self.head_dim:
            raise ShapeError(
                f"hidden_size {self.hidden_size} != query_heads*head_dim "
                f"{self.query_heads}*{self.head_dim}")
        if self.query_heads % self.kv_heads != 0:
            raise ShapeError(
                f"query_heads {self.query_heads} not divisible by kv_heads {self.kv_heads}")
        if self.context_window < 2:
            raise ShapeError(f"context_window must be >= 2, got {self.context_window}")
        dtype_for(self.precision)
        if min(self.n_layers, self.hidden_size, self.kv_heads,
               self.intermediate_size, self.vocab_size) < 1:
            raise ShapeError("all size fields must be positive")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        data = json.loads(text)
        known = {k: int(v) for k, v in data.items() if k in cls.__dataclass_fields__}
        unknown = set(data) - set(known)
        if unknown:
            raise ShapeError(f"unknown config fields: {sorted(unknown)}")
        return cls(**known).validate()

    @property
    def dtype(self):
        return dtype_for(self.precision)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    D, I, V = cfg.hidden_size, cfg.intermediate_size, cfg.vocab_size
    qd, kd = cfg.query_heads * cfg.head_dim, cfg.kv_heads * cfg.head_dim
    shapes = {"embedding": (V, D)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (1, D)
        shapes[p + "w_q"] = (D, qd)
        shapes[p + "w_k"] = (D, kd)
        shapes[p + "w_v"] = (D, kd)
        shapes[p + "w_o"] = (qd, D)
        shapes[p + "mlp_norm"] = (1, D)
        shapes[p + "w_up"] = (D, I)
        shapes[p + "w_gate"] = (D, I)
        shapes[p + "w_down"] = (I, D)
    shapes["final_norm"] = (1, D)
    shapes["lm_head"] = (D, V)
    return shapes


def init_params(cfg: ModelConfig, rng: Rng) -> dict[str, ad.Tensor]:
    """Weights ~ N(0, 0.02); norms start at one.  Each tensor draws from
    its own child stream, so adding a layer elsewhere never shifts these."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm"):
            params[name] = ad.param(np.ones(shape, dtype=cfg.dtype))
        else:
            params[name] = ad.param(
                rng.child("param", name).normal(shape, std=INIT_STD, dtype=cfg.dtype))
    return params


def check_params(cfg: ModelConfig, params: dict[str, ad.Tensor]):
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise ShapeError(f"missing parameter {name}")
        got = tuple(params[name].data.shape)
        if got != shape:
            raise ShapeError(f"parameter {name}: shape {got}, expected {shape}")
        if not np.isfinite(params[name].data).all():
            raise NonFiniteError(f"parameter {name} contains non-finite values")


class LayerKvCache:
    """Post-rotary key/value rows for one layer, plus their position ids."""

    def __init__(self, keys: ad.Tensor, values: ad.Tensor, positions: np.ndarray):
        if keys.data.shape[0] != values.data.shape[0] or keys.data.shape[0] != len(positions):
            raise ShapeError(
                f"cache rows disagree: keys {keys.data.shape[0]}, "
                f"values {values.data.shape[0]}, positions {len(positions)}")
        self.keys = keys
        self.values = values
        self.positions = np.asarray(positions, dtype=np.int64)

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "LayerKvCache":
        kd = cfg.kv_heads * cfg.head_dim
        z = np.zeros((0, kd), dtype=cfg.dtype)
        return cls(ad.const(z), ad.const(z.copy()), np.zeros(0, dtype=np.int64))

    @property
    def rows(self) -> int:
        return self.keys.data.shape[0]

    def appended(self, keys: ad.Tensor, values: ad.Tensor,
                 positions: np.ndarray) -> "LayerKvCache":
        return LayerKvCache(ad.concat0([self.keys, keys]),
                            ad.concat0([self.values, values]),
                            np.concatenate([self.positions, positions]))


def empty_caches(cfg: ModelConfig) -> list[LayerKvCache]:
    return [LayerKvCache.empty(cfg) for _ in range(cfg.n_layers)]


def rope_tables(positions: np.ndarray, head_dim: int):
    inv = ROPE_BASE ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def causal_mask(new_len: int, cache_len: int) -> np.ndarray:
    """Cache columns are fully visible; new columns are lower-triangular."""
    m = np.zeros((new_len, cache_len + new_len))
    m[:, cache_len:] = np.triu(np.full((new_len, new_len), -np.inf), k=1)
    return m


def _project_rows(normed, raw_idx, vst_idx, w_base, w_vst, counter, label):
    """Matmul where raw rows use the base weight and marked rows use the
    alternate weight.  Row counts add up, so the multiply-add charge is
    identical to one full-width matmul."""
    if vst_idx is None or len(vst_idx) == 0:
        return ad.matmul(normed, w_base, counter, label)
    if len(raw_idx) == 0:
        return ad.matmul(normed, w_vst, counter, label)
    n = normed.data.shape[0]
    a = ad.scatter0(ad.matmul(ad.gather0(normed, raw_idx), w_base, counter, label), raw_idx, n)
    b = ad.scatter0(ad.matmul(ad.gather0(normed, vst_idx), w_vst, counter, label), vst_idx, n)
    return ad.add(a, b)


def transformer_pass(params, cfg: ModelConfig, h0: ad.Tensor, positions: np.ndarray,
                     caches: list[LayerKvCache] | None = None, *,
                     vst_mask: np.ndarray | None = None, vst_params=None,
                     append: str = "all", logits_rows=None, counter: OpCounter | None = None):
    """Run the layer stack over ``h0`` rows against per-layer caches.

    ``append`` chooses which new K/V rows the updated caches keep:
    "all" (plain incremental attention), "vst" (only rows flagged in
    ``vst_mask`` — the off-loading step), or "none".  ``logits_rows``
    is None for no logits, "all", or an index array.

    Returns (logits Tensor | None, updated caches).
    """
    L = h0.data.shape[0]
    positions = np.asarray(positions, dtype=np.int64)
    if len(positions) != L:
        raise ShapeError(f"{L} rows but {len(positions)} positions")
    if caches is None:
        caches = empty_caches(cfg)
    if len(caches) != cfg.n_layers:
        raise PlanError(f"expected {cfg.n_layers} layer caches, got {len(caches)}")
    if L + max(c.rows for c in caches) > cfg.context_window:
        raise WindowError(
            f"{L} new rows + {max(c.rows for c in caches)} cached rows exceed "
            f"context window {cfg.context_window}")

    if vst_mask is not None:
        vst_mask = np.asarray(vst_mask, dtype=bool)
        raw_idx = np.flatnonzero(~vst_mask)
        vst_idx = np.flatnonzero(vst_mask)
        if len(vst_idx) and vst_params is None:
            raise PlanError("vst rows present but no vst parameters given")
    else:
        raw_idx = np.arange(L)
        vst_idx = np.zeros(0, dtype=np.intp)

    hq, hk, d = cfg.query_heads, cfg.kv_heads, cfg.head_dim
    cos, sin = rope_tables(positions, d)
    h = h0
    new_caches = []
    for li in range(cfg.n_layers):
        try:
            cache = caches[li]
            p = params[f"layers.{li}.attn_norm"], params[f"layers.{li}.w_q"], \
                params[f"layers.{li}.w_k"], params[f"layers.{li}.w_v"], \
                params[f"layers.{li}.w_o"]
            attn_norm, w_q, w_k, w_v, w_o = p
            vp = (vst_params.layer(li) if len(vst_idx) else None)

            normed = ad.rms_norm_op(h, attn_norm)
            q_m = _project_rows(normed, raw_idx, vst_idx, w_q,
                                vp and vp["w_q"], counter, "qkv")
            k_m = _project_rows(normed, raw_idx, vst_idx, w_k,
                                vp and vp["w_k"], counter, "qkv")
            v_m = _project_rows(normed, raw_idx, vst_idx, w_v,
                                vp and vp["w_v"], counter, "qkv")

            q = ad.scale(ad.rope(ad.split_heads(q_m, hq), cos, sin), 1.0 / math.sqrt(d))
            k_new = ad.merge_heads(ad.rope(ad.split_heads(k_m, hk), cos, sin))

            k_all = ad.split_heads(ad.concat0([cache.keys, k_new]), hk)
            v_all = ad.split_heads(ad.concat0([cache.values, v_m]), hk)
            k_all = ad.repeat_heads(k_all, hq // hk)
            v_all = ad.repeat_heads(v_all, hq // hk)

            scores = ad.bmm(q, k_all, counter, "qk", transpose_b=True)
            scores = ad.add_const(scores, causal_mask(L, cache.rows))
            probs = ad.softmax_last(scores)
            if counter is not None:
                counter.add_activations(probs.data.size)
            ctx = ad.bmm(probs, v_all, counter, "av")

            o = _project_rows(ad.merge_heads(ctx), raw_idx, vst_idx, w_o,
                              vp and vp["w_o"], counter, "out")
            h = ad.add(h, o)

            normed2 = ad.rms_norm_op(h, params[f"layers.{li}.mlp_norm"])
            up = ad.matmul(normed2, params[f"layers.{li}.w_up"], counter, "up")
            gate = ad.matmul(normed2, params[f"layers.{li}.w_gate"], counter, "up")
            gated = ad.mul(up, ad.silu_op(gate, counter))
            h = ad.add(h, ad.matmul(gated, params[f"layers.{li}.w_down"], counter, "down"))
        except NonFiniteError as e:
            raise NonFiniteError(f"layer {li}: {e}") from e

        if append == "all":
            new_caches.append(cache.appended(k_new, v_m, positions))
        elif append == "vst":
            new_caches.append(cache.appended(
                ad.gather0(k_new, vst_idx), ad.gather0(v_m, vst_idx), positions[vst_idx]))
        elif append == "none":
            new_caches.append(cache)
        else:
            raise PlanError(f"unknown append mode {append!r}")

    logits = None
    if logits_rows is not None:
        rows = h if (isinstance(logits_rows, str) and logits_rows == "all") \
            else ad.gather0(h, np.asarray(logits_rows, dtype=np.intp))
        final = ad.rms_norm_op(rows, params["final_norm"])
        logits = ad.matmul(final, params["lm_head"], counter, "lm")
    return logits, new_caches


def embed_ids(params, ids: np.ndarray) -> ad.Tensor:
    return ad.embed(params["embedding"], np.asarray(ids, dtype=np.intp))


def forward_full(params, cfg: ModelConfig, ids, counter: OpCounter | None = None) -> np.ndarray:
    """Full-attention logits for the whole sequence; the reference oracle."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) > cfg.context_window:
        raise WindowError(f"sequence length {len(ids)} exceeds window {cfg.context_window}")
    with ad.no_grad():
        logits, _ = transformer_pass(
            params, cfg, embed_ids(params, ids), np.arange(len(ids)),
            logits_rows="all", counter=counter)
    return logits.data


def forward_step(params, cfg: ModelConfig, caches: list[LayerKvCache], new_ids,
                 counter: OpCounter | None = None):
    """Extend cached attention by ``new_ids``; positions continue the sequence."""
    new_ids = np.asarray(new_ids, dtype=np.int64)
    prev = caches[0].positions
    if len(prev) and np.any(np.diff(prev) <= 0):
        raise PlanError("cache positions must be strictly increasing")
    start = int(prev[-1]) + 1 if len(prev) else 0
    positions = np.arange(start, start + len(new_ids))
    with ad.no_grad():
        logits, updated = transformer_pass(
            params, cfg, embed_ids(params, new_ids), positions, caches,
            append="all", logits_rows="all", counter=counter)
    return logits.data, updated


def cross_entropy(logits, targets) -> float:
    """Mean negative log-likelihood of integer targets."""
    t = ad.const(np.asarray(logits)) if not isinstance(logits, ad.Tensor) else logits
    return ad.cross_entropy_mean(t, np.asarray(targets, dtype=np.int64)).item()


def decode_greedy(params, cfg: ModelConfig, prompt_ids, max_new: int,
                  caches: list[LayerKvCache] | None = None):
    """Greedy argmax continuation; returns (generated ids, per-step logits)."""
    caches = empty_caches(cfg) if caches is None else caches
    ids = np.asarray(prompt_ids, dtype=np.int64)
    if caches[0].rows + len(ids) + max_new > cfg.context_window:
        raise WindowError("prompt plus generation budget exceeds context window")
    out, step_logits = [], []
    logits, caches = forward_step(params, cfg, caches, ids)
    for _ in range(max_new):
        nxt = int(np.argmax(logits[-1]))
        out.append(nxt)
        step_logits.append(logits[-1])
        logits, caches = forward_step(params, cfg, caches, [nxt])
    return np.array(out, dtype=np.int64), np.array(step_logits)


def save_params(path, cfg: ModelConfig, params: dict[str, ad.Tensor],
                extra: dict[str, ad.Tensor] | None = None):
    from . import tensorio
    tensors = {name: t.data for name, t in params.items()}
    for name, t in (extra or {}).items():
        tensors[name] = t.data
    tensorio.save_bundle(path, tensors, meta={"config": json.loads(cfg.to_json())})


def load_params(path):
    """Returns (cfg, base params, extra tensors dict for anything else)."""
    from . import tensorio
    tensors, meta = tensorio.load_bundle(path)
    cfg = ModelConfig(**{k: int(v) for k, v in meta["config"].items()}).validate()
    params, extra = {}, {}
    shapes = param_shapes(cfg)
    for name, arr in tensors.items():
        (params if name in shapes else extra)[name] = ad.param(arr)
    check_params(cfg, params)
    return cfg, params, extra
