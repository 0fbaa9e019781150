"""Summarization-token KV-cache compression.

A sequence is tiled into intervals; each interval is encoded as one
chunk with one summarization token interleaved after every ``ratio``
raw tokens.  Summarization rows run through their own Q/K/V/O
projections (warm-started from the base weights) while raw rows use the
base model unchanged.  After a chunk is encoded, only the summarization
rows' keys/values are kept — raw rows are off-loaded — so the retained
cache grows by ceil(width/ratio) rows per chunk instead of width.

Positions restart at 0 inside every chunk; a summarization token takes
the position of the raw token just before it.  Cache entries keep those
chunk-local positions, and cross-chunk order lives in row order only.
"""

from __future__ import annotations

import io
import json
import math
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from .errors import PlanError, ShapeError, VocabError, WindowError
from .model import LayerKvCache, ModelConfig
from .numerics import OpCounter, Rng

VST_INIT_STD = 0.02
VST_WARM_NOISE_STD = 1e-3

#: marker value for summarization slots in an interleaved id sequence
VST_MARKER = -1

TRACE_FIELDS = ("chunk_idx", "raw_len", "vst_count", "cache_rows",
                "peak_rows", "multiply_adds")


@dataclass(frozen=True)
class Interval:
    start: int
    width: int
    ratio: int

    def __post_init__(self):
        if self.width < 1:
            raise PlanError(f"interval width must be >= 1, got {self.width}")
        if self.ratio < 1:
            raise PlanError(f"compression ratio must be >= 1, got {self.ratio}")
        if self.start < 0:
            raise PlanError(f"interval start must be >= 0, got {self.start}")

    @property
    def vst_count(self) -> int:
        return math.ceil(self.width / self.ratio)


@dataclass
class CompressionPlan:
    total_len: int
    intervals: list[Interval]

    def validate(self, cfg: ModelConfig | None = None) -> "CompressionPlan":
        at = 0
        for iv in self.intervals:
            if iv.start != at:
                raise PlanError(f"interval at {iv.start} does not tile; expected start {at}")
            if cfg is not None and iv.width + iv.vst_count > cfg.context_window:
                raise PlanError(
                    f"interval width {iv.width} plus {iv.vst_count} summary slots "
                    f"exceeds context window {cfg.context_window}")
            at += iv.width
        if at != self.total_len:
            raise PlanError(f"intervals cover {at} tokens, plan says {self.total_len}")
        return self

    @property
    def cache_rows(self) -> int:
        return sum(iv.vst_count for iv in self.intervals)

    def to_json(self) -> str:
        return json.dumps({
            "total_len": self.total_len,
            "intervals": [{"start": iv.start, "width": iv.width, "ratio": iv.ratio}
                          for iv in self.intervals],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CompressionPlan":
        data = json.loads(text)
        plan = cls(total_len=int(data["total_len"]),
                   intervals=[Interval(int(e["start"]), int(e["width"]), int(e["ratio"]))
                              for e in data["intervals"]])
        return plan.validate()


def uniform_plan(total_len: int, width: int, ratio: int) -> CompressionPlan:
    ivs, at = [], 0
    while at < total_len:
        w = min(width, total_len - at)
        ivs.append(Interval(at, w, ratio))
        at += w
    return CompressionPlan(total_len, ivs).validate()


class VstParams:
    """The summarization token's embedding row plus per-layer W' projections."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, ad.Tensor]):
        self.cfg = cfg
        self.tensors = tensors
        for name, shape in vst_param_shapes(cfg).items():
            if name not in tensors:
                raise ShapeError(f"missing summary-path parameter {name}")
            got = tuple(tensors[name].data.shape)
            if got != shape:
                raise ShapeError(f"parameter {name}: shape {got}, expected {shape}")

    @property
    def embedding(self) -> ad.Tensor:
        return self.tensors["vst.embedding"]

    def layer(self, i: int) -> dict[str, ad.Tensor]:
        p = f"vst.layers.{i}."
        return {w: self.tensors[p + w] for w in ("w_q", "w_k", "w_v", "w_o")}


def vst_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    D = cfg.hidden_size
    qd, kd = cfg.query_heads * cfg.head_dim, cfg.kv_heads * cfg.head_dim
    shapes = {"vst.embedding": (1, D)}
    for i in range(cfg.n_layers):
        p = f"vst.layers.{i}."
        shapes.update({p + "w_q": (D, qd), p + "w_k": (D, kd),
                       p + "w_v": (D, kd), p + "w_o": (qd, D)})
    return shapes


def init_vst_params(cfg: ModelConfig, base_params: dict[str, ad.Tensor],
                    rng: Rng) -> VstParams:
    """Embedding ~ N(0, 0.02); W' = base weight + N(0, 1e-3) warm start."""
    tensors = {"vst.embedding": ad.param(
        rng.child("vst", "embedding").normal((1, cfg.hidden_size),
                                             std=VST_INIT_STD, dtype=cfg.dtype))}
    for name, shape in vst_param_shapes(cfg).items():
        if name == "vst.embedding":
            continue
        base = base_params[name.replace("vst.", "", 1)].data
        noise = rng.child("vst", name).normal(shape, std=VST_WARM_NOISE_STD,
                                              dtype=cfg.dtype)
        tensors[name] = ad.param(base + noise)
    return VstParams(cfg, tensors)


class CompressedCache:
    """Per-layer summary keys/values accumulated across chunks.

    Every retained row came from a summarization slot; ``source`` tags
    each row with the interval it condensed."""

    def __init__(self, layers: list[LayerKvCache], source: np.ndarray):
        rows = {c.rows for c in layers}
        if len(rows) != 1:
            raise ShapeError(f"layer caches disagree on rows: {sorted(rows)}")
        if len(source) != rows.pop():
            raise ShapeError("source tags do not match cache rows")
        self.layers = layers
        self.source = np.asarray(source, dtype=np.int64)

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "CompressedCache":
        return cls(M.empty_caches(cfg), np.zeros(0, dtype=np.int64))

    @property
    def rows(self) -> int:
        return self.layers[0].rows

    @property
    def positions(self) -> np.ndarray:
        return self.layers[0].positions


def interleave(interval_ids: np.ndarray, ratio: int):
    """Groups of up to ``ratio`` raw ids, each followed by a summary slot.

    Returns (augmented ids with VST_MARKER at summary slots,
             boolean summary mask, chunk-local positions)."""
    ids = np.asarray(interval_ids, dtype=np.int64)
    if ratio < 1:
        raise PlanError(f"compression ratio must be >= 1, got {ratio}")
    if len(ids) == 0:
        raise PlanError("cannot interleave an empty interval")
    if ids.min() < 0:
        raise VocabError("negative token id in interval")
    aug, mask, pos = [], [], []
    for g in range(0, len(ids), ratio):
        group = ids[g:g + ratio]
        for j, t in enumerate(group):
            aug.append(int(t))
            mask.append(False)
            pos.append(g + j)
        aug.append(VST_MARKER)
        mask.append(True)
        pos.append(g + len(group) - 1)
    return (np.array(aug, dtype=np.int64), np.array(mask, dtype=bool),
            np.array(pos, dtype=np.int64))


def _assemble_rows(params, vst_params: VstParams, aug_ids, vst_mask) -> ad.Tensor:
    L = len(aug_ids)
    raw_idx = np.flatnonzero(~vst_mask)
    vst_idx = np.flatnonzero(vst_mask)
    raw = ad.embed(params["embedding"], aug_ids[raw_idx])
    vst = ad.repeat_row(vst_params.embedding, len(vst_idx))
    return ad.add(ad.scatter0(raw, raw_idx, L), ad.scatter0(vst, vst_idx, L))


def encode_chunk(params, cfg: ModelConfig, vst_params: VstParams,
                 chunk_ids, ratio: int, cache: CompressedCache,
                 interval_index: int = 0, counter: OpCounter | None = None,
                 train: bool = False):
    """Encode one interval against the accumulated cache; keep only the
    summary rows (off-loading).  Returns (cache', trace row dict)."""
    aug_ids, vst_mask, positions = interleave(chunk_ids, ratio)
    w, k = len(chunk_ids), int(vst_mask.sum())
    if w + k > cfg.context_window:
        raise WindowError(
            f"chunk of {w} tokens + {k} summary slots exceeds window {cfg.context_window}")
    before = cache.rows
    macs0 = counter.multiply_adds if counter is not None else 0

    h0 = _assemble_rows(params, vst_params, aug_ids, vst_mask)
    ctx = nullcontext() if train else ad.no_grad()
    with ctx:
        _, updated = M.transformer_pass(
            params, cfg, h0, positions, cache.layers,
            vst_mask=vst_mask, vst_params=vst_params,
            append="vst", logits_rows=None, counter=counter)

    source = np.concatenate([cache.source, np.full(k, interval_index, dtype=np.int64)])
    new_cache = CompressedCache(updated, source)
    trace = {
        "chunk_idx": interval_index,
        "raw_len": w,
        "vst_count": k,
        "cache_rows": new_cache.rows,
        "peak_rows": before + w + k,
        "multiply_adds": (counter.multiply_adds - macs0) if counter is not None else 0,
    }
    return new_cache, trace


def encode_sequence(params, cfg: ModelConfig, vst_params: VstParams,
                    ids, plan: CompressionPlan,
                    counter: OpCounter | None = None, train: bool = False):
    """Fold encode_chunk over the plan's intervals in order."""
    ids = np.asarray(ids, dtype=np.int64)
    plan.validate(cfg)
    if plan.total_len != len(ids):
        raise PlanError(f"plan covers {plan.total_len} tokens but got {len(ids)} ids")
    cache = CompressedCache.empty(cfg)
    trace = []
    for idx, iv in enumerate(plan.intervals):
        chunk = ids[iv.start:iv.start + iv.width]
        cache, row = encode_chunk(params, cfg, vst_params, chunk, iv.ratio, cache,
                                  interval_index=idx, counter=counter, train=train)
        trace.append(row)
    return cache, trace


def passthrough_encode(params, cfg: ModelConfig, ids, chunk_sizes=None,
                       counter: OpCounter | None = None):
    """Chunked iteration with zero summary slots and no off-loading.

    Positions continue globally across chunks, so the result must match
    full attention; a single chunk is the full pass itself, bit for bit."""
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    if n > cfg.context_window:
        raise WindowError(f"sequence length {n} exceeds window {cfg.context_window}")
    if chunk_sizes is None:
        chunk_sizes = [n]
    if sum(chunk_sizes) != n or any(c < 1 for c in chunk_sizes):
        raise PlanError(f"chunk sizes {chunk_sizes} do not tile length {n}")
    caches = M.empty_caches(cfg)
    parts, at = [], 0
    with ad.no_grad():
        for c in chunk_sizes:
            h0 = M.embed_ids(params, ids[at:at + c])
            logits, caches = M.transformer_pass(
                params, cfg, h0, np.arange(at, at + c), caches,
                append="all", logits_rows="all", counter=counter)
            parts.append(logits.data)
            at += c
    return np.concatenate(parts, axis=0), caches


def _decode_start_position(cache: CompressedCache) -> int:
    return int(cache.positions.max()) + 1 if cache.rows else 0


def decode_with_cache(params, cfg: ModelConfig, cache: CompressedCache,
                      prompt_ids, max_new: int):
    """Greedy decoding conditioned only on the compressed cache plus
    causally-earlier prompt/generated rows."""
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    if cache.rows + len(prompt_ids) + max_new > cfg.context_window:
        raise WindowError("cache + prompt + generation budget exceeds context window")
    layers = cache.layers
    start = _decode_start_position(cache)
    out, step_logits = [], []
    pending = prompt_ids
    with ad.no_grad():
        for _ in range(max_new + 1):
            positions = np.arange(start, start + len(pending))
            h0 = M.embed_ids(params, pending)
            logits, layers = M.transformer_pass(
                params, cfg, h0, positions, layers,
                append="all", logits_rows="all")
            start += len(pending)
            if len(out) == max_new:
                break
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            step_logits.append(logits.data[-1])
            pending = np.array([nxt], dtype=np.int64)
    return np.array(out, dtype=np.int64), np.array(step_logits)


def answer_loss(params, cfg: ModelConfig, cache: CompressedCache,
                prompt_ids, answer_ids, counter: OpCounter | None = None) -> ad.Tensor:
    """Teacher-forced mean cross-entropy of the answer tokens, conditioned
    on the compressed cache; differentiable through the cache."""
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    answer_ids = np.asarray(answer_ids, dtype=np.int64)
    if len(prompt_ids) < 1:
        raise PlanError("need at least one prompt token to predict from")
    full = np.concatenate([prompt_ids, answer_ids])
    if cache.rows + len(full) > cfg.context_window:
        raise WindowError("cache + prompt + answer exceeds context window")
    start = _decode_start_position(cache)
    h0 = M.embed_ids(params, full)
    rows = np.arange(len(prompt_ids) - 1, len(full) - 1)
    logits, _ = M.transformer_pass(
        params, cfg, h0, np.arange(start, start + len(full)), cache.layers,
        append="none", logits_rows=rows, counter=counter)
    return ad.cross_entropy_mean(logits, answer_ids)


def trace_to_csv(trace: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(TRACE_FIELDS) + "\n")
    for row in trace:
        buf.write(",".join(str(row[f]) for f in TRACE_FIELDS) + "\n")
    return buf.getvalue()


def save_cache(path, cfg: ModelConfig, cache: CompressedCache):
    from . import tensorio
    tensors = {}
    for i, layer in enumerate(cache.layers):
        tensors[f"layers.{i}.keys"] = layer.keys.data
        tensors[f"layers.{i}.values"] = layer.values.data
    meta = {"config": json.loads(cfg.to_json()),
            "positions": cache.positions.tolist(),
            "source": cache.source.tolist()}
    tensorio.save_bundle(path, tensors, meta=meta)


def load_cache(path):
    from . import tensorio
    tensors, meta = tensorio.load_bundle(path)
    cfg = ModelConfig(**{k: int(v) for k, v in meta["config"].items()}).validate()
    positions = np.array(meta["positions"], dtype=np.int64)
    layers = [LayerKvCache(ad.const(tensors[f"layers.{i}.keys"]),
                           ad.const(tensors[f"layers.{i}.values"]), positions)
              for i in range(cfg.n_layers)]
    return cfg, CompressedCache(layers, np.array(meta["source"], dtype=np.int64))
