"""Semantic partitioning of a frame stream into compression intervals.

Adjacent-frame cosine similarities are turned into depth scores: a
score is high where the local similarity dips below what both sides
recover to, i.e. at a scene cut.  Peaks above a threshold become
interval boundaries; a boundary at frame b cuts the stream before
frame b.  The fixed-interval baseline lives here too.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compressor import CompressionPlan, Interval
from .errors import PlanError, ShapeError

UNIT_NORM_TOL = 1e-6


@dataclass
class FrameEmbeddings:
    embeddings: np.ndarray  # (n_frames, dim), unit rows
    tokens_per_frame: int = 4

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ShapeError(f"frame embeddings must be 2-D, got {self.embeddings.shape}")
        if self.tokens_per_frame < 1:
            raise PlanError(f"tokens_per_frame must be >= 1, got {self.tokens_per_frame}")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if self.n_frames and np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ShapeError(
                f"frame {worst} embedding norm {norms[worst]:.8f} is not unit")

    @property
    def n_frames(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class PartitionConfig:
    threshold: float | None = None  # None -> adaptive mean + 0.5 std
    min_interval_frames: int = 1
    max_interval_tokens: int = 256
    default_ratio: int = 8
    ratio_policy: str = "uniform"  # "uniform" | "table"
    ratio_table: dict = field(default_factory=dict)

    def validate(self, tokens_per_frame: int = 1) -> "PartitionConfig":
        if self.min_interval_frames < 1:
            raise PlanError("min_interval_frames must be >= 1")
        if self.max_interval_tokens < tokens_per_frame:
            raise PlanError(
                f"max_interval_tokens {self.max_interval_tokens} below one frame "
                f"({tokens_per_frame} tokens)")
        if self.default_ratio < 1:
            raise PlanError("default_ratio must be >= 1")
        if self.ratio_policy not in ("uniform", "table"):
            raise PlanError(f"unknown ratio_policy {self.ratio_policy!r}")
        return self

    def ratio_for(self, interval_ordinal: int) -> int:
        if self.ratio_policy == "table":
            return int(self.ratio_table.get(interval_ordinal, self.default_ratio))
        return self.default_ratio


def similarity_series(fe: FrameEmbeddings) -> np.ndarray:
    """Cosine similarity of each adjacent frame pair; length n_frames - 1."""
    if fe.n_frames < 2:
        raise PlanError(f"need at least 2 frames, got {fe.n_frames}")
    e = fe.embeddings
    return np.sum(e[:-1] * e[1:], axis=1)


def depth_scores(sims: np.ndarray) -> np.ndarray:
    """How far each similarity dips below the best of both sides.

    Interior points score max(left) + max(right) - 2 s_i; the two ends
    have one empty side and use max(other side) - s_i.  Fewer than three
    similarities give an empty result.
    """
    s = np.asarray(sims, dtype=np.float64)
    m = len(s)
    if m < 3:
        return np.zeros(0)
    left = np.maximum.accumulate(s)      # left[j]  = max(s[0..j])
    right = np.maximum.accumulate(s[::-1])[::-1]
    d = np.empty(m)
    d[0] = right[1] - s[0]
    d[-1] = left[-2] - s[-1]
    d[1:-1] = left[:-2] + right[2:] - 2.0 * s[1:-1]
    return d


def adaptive_threshold(depths: np.ndarray) -> float:
    if len(depths) == 0:
        return 0.0
    return float(np.mean(depths) + 0.5 * np.std(depths))


def find_boundaries(depths: np.ndarray, cfg: PartitionConfig) -> list[int]:
    """Frame indices whose depth is a strict local peak above threshold.

    Endpoints are never eligible.  Peaks closer than min_interval_frames
    are thinned keeping the larger depth (earlier index on ties).
    Returned indices follow the cut-before-frame convention: similarity
    index j maps to a boundary at frame j + 1.
    """
    d = np.asarray(depths, dtype=np.float64)
    if len(d) < 3:
        return []
    delta = cfg.threshold if cfg.threshold is not None else adaptive_threshold(d)
    peaks = [j for j in range(1, len(d) - 1)
             if d[j] > delta and d[j] > d[j - 1] and d[j] > d[j + 1]]
    # thin by spacing, preferring deeper peaks; ties go to the earlier index
    order = sorted(peaks, key=lambda j: (-d[j], j))
    kept: list[int] = []
    for j in order:
        if all(abs(j - k) >= cfg.min_interval_frames for k in kept):
            kept.append(j)
    return sorted(j + 1 for j in kept)


def plan_from_boundaries(boundaries, n_frames: int, tokens_per_frame: int,
                         cfg: PartitionConfig) -> CompressionPlan:
    """Token intervals from frame spans, splitting any span whose token
    width exceeds max_interval_tokens into near-equal frame-aligned parts."""
    cfg.validate(tokens_per_frame)
    bs = list(boundaries)
    if any(b2 <= b1 for b1, b2 in zip(bs, bs[1:])):
        raise PlanError(f"boundaries must be strictly increasing, got {bs}")
    if bs and (bs[0] < 1 or bs[-1] > n_frames - 1):
        raise PlanError(f"boundary out of range 1..{n_frames - 1}: {bs}")
    edges = [0] + bs + [n_frames]
    spans = []
    for a, b in zip(edges, edges[1:]):
        span = b - a
        parts = max(1, math.ceil(span * tokens_per_frame / cfg.max_interval_tokens))
        while math.ceil(span / parts) * tokens_per_frame > cfg.max_interval_tokens:
            parts += 1
        base, extra = divmod(span, parts)
        spans.extend([base + 1] * extra + [base] * (parts - extra))
    intervals, at = [], 0
    for ordinal, span in enumerate(spans):
        width = span * tokens_per_frame
        intervals.append(Interval(at, width, cfg.ratio_for(ordinal)))
        at += width
    return CompressionPlan(at, intervals).validate()


def dynamic_plan(fe: FrameEmbeddings, cfg: PartitionConfig) -> CompressionPlan:
    """similarities -> depth scores -> boundaries -> plan, in one call."""
    if fe.n_frames < 2:
        return plan_from_boundaries([], fe.n_frames, fe.tokens_per_frame, cfg)
    d = depth_scores(similarity_series(fe))
    return plan_from_boundaries(find_boundaries(d, cfg), fe.n_frames,
                                fe.tokens_per_frame, cfg)


def fixed_partition(total_len: int, interval_tokens: int, ratio: int) -> CompressionPlan:
    """Equal token intervals (last may be shorter), one uniform ratio."""
    if interval_tokens < 1:
        raise PlanError(f"interval_tokens must be >= 1, got {interval_tokens}")
    intervals, at = [], 0
    while at < total_len:
        w = min(interval_tokens, total_len - at)
        intervals.append(Interval(at, w, ratio))
        at += w
    return CompressionPlan(total_len, intervals).validate()


def depth_csv(sims: np.ndarray, depths: np.ndarray, boundaries) -> str:
    """Rows: frame_idx, similarity, depth, is_boundary (cut-before index)."""
    bset = set(boundaries)
    buf = io.StringIO()
    buf.write("frame_idx,similarity,depth,is_boundary\n")
    for j, s in enumerate(np.asarray(sims, dtype=np.float64)):
        d = float(depths[j]) if j < len(depths) else 0.0
        buf.write(f"{j + 1},{s:.10g},{d:.10g},{int(j + 1 in bset)}\n")
    return buf.getvalue()


def save_frames(path, fe: FrameEmbeddings):
    from . import tensorio
    tensorio.dump_tensor(path, fe.embeddings)
    Path(str(path) + ".json").write_text(json.dumps(
        {"n_frames": fe.n_frames, "dim": fe.dim, "M": fe.tokens_per_frame},
        indent=1))


def load_frames(path) -> FrameEmbeddings:
    from . import tensorio
    header = json.loads(Path(str(path) + ".json").read_text())
    emb = tensorio.load_tensor(path)
    fe = FrameEmbeddings(emb, tokens_per_frame=int(header["M"]))
    if fe.n_frames != int(header["n_frames"]) or fe.dim != int(header["dim"]):
        raise ShapeError(
            f"embeddings file is {fe.n_frames}x{fe.dim} but header says "
            f"{header['n_frames']}x{header['dim']}")
    return fe
