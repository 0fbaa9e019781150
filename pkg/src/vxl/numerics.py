"""Dense kernels with an optional multiply-add counter.

All matrices are 2-D row-major numpy arrays in one of two precisions
(code 4 = float32, code 8 = float64).  Every kernel validates shapes and
refuses to return NaN/Inf silently.  The counter charges one unit per
fused multiply-add, so FLOPs = 2 * multiply_adds.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError

DTYPE_BY_CODE = {4: np.float32, 8: np.float64}
CODE_BY_DTYPE = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}

#: default precision for correctness and gradient work
DEFAULT_PRECISION = 8


def dtype_for(precision: int):
    if precision not in DTYPE_BY_CODE:
        raise ShapeError(f"unknown precision code {precision} (expected 4 or 8)")
    return DTYPE_BY_CODE[precision]


@dataclass
class OpCounter:
    """Accumulates multiply-add and activation-evaluation counts.

    ``by_label`` keeps per-call-site subtotals so the analytic cost model
    can be checked term by term.
    """

    multiply_adds: int = 0
    activations: int = 0
    enabled: bool = True
    by_label: dict = field(default_factory=dict)

    def add_macs(self, n: int, label: str | None = None):
        if not self.enabled:
            return
        self.multiply_adds += n
        if label is not None:
            self.by_label[label] = self.by_label.get(label, 0) + n

    def add_activations(self, n: int):
        if self.enabled:
            self.activations += n

    def reset(self):
        self.multiply_adds = 0
        self.activations = 0
        self.by_label = {}


class Rng:
    """Seeded PCG64 stream with deterministic child derivation.

    The same seed yields the same draw sequence on every platform, and
    ``child(...)`` streams are independent of call order at the parent.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    @staticmethod
    def _key_int(key) -> int:
        if isinstance(key, (int, np.integer)):
            return int(key) & 0xFFFFFFFF
        digest = hashlib.sha256(str(key).encode()).digest()
        return int.from_bytes(digest[:4], "little")

    def child(self, *keys) -> "Rng":
        ss = np.random.SeedSequence([self.seed] + [self._key_int(k) for k in keys])
        out = object.__new__(Rng)
        out.seed = int(ss.generate_state(1)[0])
        out.gen = np.random.Generator(np.random.PCG64(ss))
        return out

    def normal(self, shape, std=1.0, dtype=np.float64):
        return (self.gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size=size)

    def choice(self, seq):
        return seq[int(self.gen.integers(0, len(seq)))]

    def shuffle(self, arr):
        self.gen.shuffle(arr)

    def unit_vector(self, dim: int, dtype=np.float64):
        v = self.gen.standard_normal(dim)
        return (v / np.linalg.norm(v)).astype(dtype)


def _check_2d(name: str, m: np.ndarray):
    if not isinstance(m, np.ndarray) or m.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array, got {getattr(m, 'shape', type(m))}")


def _check_finite(out: np.ndarray, op: str):
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def matmul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None,
           label: str | None = None) -> np.ndarray:
    """Matrix product; charges a.rows * a.cols * b.cols multiply-adds."""
    _check_2d("a", a)
    _check_2d("b", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
    out = a @ b
    if counter is not None:
        counter.add_macs(a.shape[0] * a.shape[1] * b.shape[1], label)
    return _check_finite(out, "matmul")


def bmm(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None,
        label: str | None = None) -> np.ndarray:
    """Batched matmul over the leading axis: (B,m,k) @ (B,k,n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a, b)
    if counter is not None:
        counter.add_macs(a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2], label)
    return _check_finite(out, "bmm")


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row softmax with max-subtraction; -inf entries act as mask sentinels."""
    if m.ndim < 1:
        raise ShapeError("softmax_rows needs at least 1-D input")
    if np.isnan(m).any() or np.isposinf(m).any():
        raise NonFiniteError("softmax_rows input contains NaN or +Inf")
    mx = np.max(m, axis=-1, keepdims=True)
    if np.isneginf(mx).any():
        raise NonFiniteError("softmax_rows: a row is fully masked")
    e = np.exp(m - mx)
    out = e / np.sum(e, axis=-1, keepdims=True)
    return _check_finite(out, "softmax_rows")


# eps enters squared so near-unit rows keep RMS 1 well within 1e-6
RMS_EPS = 1e-6


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Scale rows to unit RMS, then multiply by a per-column gain."""
    if x.shape[-1] != gain.reshape(-1).shape[0]:
        raise ShapeError(f"rms_norm gain mismatch: {x.shape} vs {gain.shape}")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    out = x / np.sqrt(ms + RMS_EPS * RMS_EPS) * gain.reshape(-1)
    return _check_finite(out, "rms_norm")


def silu(x: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    out = x / (1.0 + np.exp(-x))
    if counter is not None:
        counter.add_activations(x.size)
    return _check_finite(out, "silu")


def gelu(x: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    # tanh approximation
    out = 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))
    if counter is not None:
        counter.add_activations(x.size)
    return _check_finite(out, "gelu")
