"""Analytic forward-FLOPs and KV-memory accounting.

All term formulas are exact integer arithmetic.  The matmul-backed
terms (qkv, qk, av, out, up, down, lm) are the ones the instrumented
counter can reproduce as 2 x multiply-adds; softmax and the gating
multiply are convention-dependent scalar work and are reported from
the closed forms only.

Two quirks are kept deliberately:
- the softmax term is h^q * (s + s_pst)^2 as printed in the source
  formula even though h^q * s * (s + s_pst) is the dimensionally
  expected count; `corrected_softmax_flops=True` switches to the latter.
- the gating term is s * I (one multiply per gated element).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .compressor import CompressionPlan
from .errors import PlanError
from .model import ModelConfig

I64_MAX = 2 ** 63 - 1

#: analytic term names whose FLOPs equal 2 x counter multiply-adds
MATMUL_TERMS = ("qkv", "qk", "av", "out", "up", "down", "lm")


def _check_range(report: dict):
    for name, v in report.items():
        if isinstance(v, int) and v > I64_MAX:
            raise OverflowError(f"term {name} = {v} exceeds 64-bit range")


@dataclass(frozen=True)
class CostInputs:
    s: int
    s_pst: int
    query_heads: int
    kv_heads: int
    head_dim: int
    hidden_size: int
    intermediate_size: int
    vocab_size: int
    n_layers: int

    @classmethod
    def from_config(cls, cfg: ModelConfig, s: int, s_pst: int = 0) -> "CostInputs":
        return cls(s=s, s_pst=s_pst, query_heads=cfg.query_heads,
                   kv_heads=cfg.kv_heads, head_dim=cfg.head_dim,
                   hidden_size=cfg.hidden_size,
                   intermediate_size=cfg.intermediate_size,
                   vocab_size=cfg.vocab_size, n_layers=cfg.n_layers)

    def validate(self):
        if self.s < 0 or self.s_pst < 0:
            raise PlanError(f"negative lengths: s={self.s}, s_pst={self.s_pst}")
        return self


@dataclass
class CostReport:
    f_qkv: int = 0
    f_qk: int = 0
    f_soft: int = 0
    f_av: int = 0
    f_out: int = 0
    f_up: int = 0
    f_gate: int = 0
    f_down: int = 0
    f_lm: int = 0
    n_layers: int = 1
    approximation: bool = False
    corrected_softmax: bool = False

    @property
    def f_att(self) -> int:
        return self.f_qkv + self.f_qk + self.f_soft + self.f_av + self.f_out

    @property
    def f_oth(self) -> int:
        return self.f_up + self.f_gate + self.f_down + self.f_lm

    @property
    def total(self) -> int:
        return self.n_layers * (self.f_att + self.f_up + self.f_gate
                                + self.f_down) + self.f_lm

    def matmul_flops(self) -> dict[str, int]:
        """Per-label analytic FLOPs for the counter-checkable terms,
        scaled to whole-model scope (layer terms x n_layers, lm once)."""
        per_layer = {"qkv": self.f_qkv, "qk": self.f_qk, "av": self.f_av,
                     "out": self.f_out, "up": self.f_up, "down": self.f_down}
        out = {k: self.n_layers * v for k, v in per_layer.items()}
        out["lm"] = self.f_lm
        return out

    def to_dict(self) -> dict:
        d = {"F_qkv": self.f_qkv, "F_qk": self.f_qk, "F_soft": self.f_soft,
             "F_av": self.f_av, "F_out": self.f_out, "F_up": self.f_up,
             "F_gate": self.f_gate, "F_down": self.f_down, "F_lm": self.f_lm,
             "F_att": self.f_att, "F_oth": self.f_oth, "total": self.total,
             "n_layers": self.n_layers, "approximation": self.approximation,
             "corrected_softmax": self.corrected_softmax}
        _check_range(d)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def flops_attention(ci: CostInputs, corrected_softmax: bool = False) -> dict[str, int]:
    """Per-layer attention terms for one pass of s rows over s_pst cache."""
    ci.validate()
    s, sp = ci.s, ci.s_pst
    hq, hk, d, D = ci.query_heads, ci.kv_heads, ci.head_dim, ci.hidden_size
    terms = {
        "f_qkv": 2 * s * D * d * hq + 4 * s * D * d * hk,
        "f_qk": 2 * hq * s * (s + sp) * d,
        "f_soft": (hq * s * (s + sp)) if corrected_softmax else (hq * (s + sp) ** 2),
        "f_av": 2 * hq * s * (s + sp) * d,
        "f_out": 2 * s * d * hq * D,
    }
    _check_range(terms)
    return terms


def flops_other(ci: CostInputs) -> dict[str, int]:
    """Per-layer MLP terms plus the once-per-model output head."""
    ci.validate()
    s, D, I, V = ci.s, ci.hidden_size, ci.intermediate_size, ci.vocab_size
    terms = {"f_up": 2 * s * D * 2 * I, "f_gate": s * I,
             "f_down": 2 * s * D * I, "f_lm": 2 * s * D * V}
    _check_range(terms)
    return terms


def flops_full(n: int, cfg: ModelConfig, corrected_softmax: bool = False) -> CostReport:
    """Full attention: one pass with s = n, no cache."""
    ci = CostInputs.from_config(cfg, s=n, s_pst=0)
    report = CostReport(n_layers=cfg.n_layers, corrected_softmax=corrected_softmax,
                        **flops_attention(ci, corrected_softmax), **flops_other(ci))
    _check_range(report.to_dict())
    return report


def flops_compressed(n: int, w: int, ratio: int, cfg: ModelConfig,
                     corrected_softmax: bool = False) -> CostReport:
    """Chunked compressed encoding: ceil(n/w) chunks, each passing the
    chunk's raw tokens plus interleaved summary slots over a cache that
    grows by one chunk's summary count per prior chunk; MLP and head
    terms charged once over all processed rows.

    Division by the ratio uses ceil, matching the encoder; when the
    ratio does not divide w this is an approximation of the idealized
    closed form and the report says so.
    """
    if w < 1 or ratio < 1:
        raise PlanError(f"need w >= 1 and ratio >= 1, got w={w}, ratio={ratio}")
    if n < 0:
        raise PlanError(f"negative total length {n}")
    k = math.ceil(w / ratio)
    s_chunk = w + k
    chunks = math.ceil(n / w)
    att = {"f_qkv": 0, "f_qk": 0, "f_soft": 0, "f_av": 0, "f_out": 0}
    for i in range(chunks):
        ci = CostInputs.from_config(cfg, s=s_chunk, s_pst=i * k)
        for name, v in flops_attention(ci, corrected_softmax).items():
            att[name] += v
    s_oth = n + math.ceil(n / ratio)
    oth = flops_other(CostInputs.from_config(cfg, s=s_oth))
    report = CostReport(n_layers=cfg.n_layers,
                        approximation=(w % ratio != 0),
                        corrected_softmax=corrected_softmax, **att, **oth)
    _check_range(report.to_dict())
    return report


@dataclass
class MemoryReport:
    kv_rows_full: int
    kv_rows_compressed: int
    bytes_full: int
    bytes_compressed: int
    reduction_factor: float

    def to_dict(self) -> dict:
        return {"kv_rows_full": self.kv_rows_full,
                "kv_rows_compressed": self.kv_rows_compressed,
                "bytes_full": self.bytes_full,
                "bytes_compressed": self.bytes_compressed,
                "reduction_factor": self.reduction_factor}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def kv_memory(n: int, plan: CompressionPlan, cfg: ModelConfig,
              bytes_per_elem: int | None = None) -> MemoryReport:
    """Retained KV rows and bytes, full vs compressed, for one sequence."""
    plan.validate()
    if plan.total_len != n:
        raise PlanError(f"plan covers {plan.total_len} tokens, asked about {n}")
    if bytes_per_elem is None:
        bytes_per_elem = cfg.precision
    rows_c = plan.cache_rows
    row_bytes = 2 * cfg.kv_heads * cfg.head_dim * bytes_per_elem * cfg.n_layers
    if rows_c > 0:
        factor = n / rows_c
    else:
        factor = math.inf if n > 0 else 1.0
    return MemoryReport(kv_rows_full=n, kv_rows_compressed=rows_c,
                        bytes_full=n * row_bytes, bytes_compressed=rows_c * row_bytes,
                        reduction_factor=factor)


def sweep_csv(cfg: ModelConfig, lengths, w: int, ratio: int) -> str:
    """CSV over n: analytic full vs compressed FLOPs and retained KV rows."""
    lines = ["n,flops_full,flops_compressed,kv_rows_full,kv_rows_compressed"]
    for n in lengths:
        full = flops_full(n, cfg).total
        comp = flops_compressed(n, w, ratio, cfg).total
        rows_c = sum(math.ceil(min(w, n - i * w) / ratio)
                     for i in range(math.ceil(n / w)))
        lines.append(f"{n},{full},{comp},{n},{rows_c}")
    return "\n".join(lines) + "\n"
