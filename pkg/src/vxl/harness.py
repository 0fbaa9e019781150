"""Synthetic retrieval tasks and the evaluation grid.

Token-id layout inside the shared vocabulary (default V = 512):
  0        padding (unused by generators, reserved)
  1        retrieval query token
  2        ordering query token
  3        answer-start token
  4        needle marker
  16..383  distractor pool
  384..511 payload pool (reserved: never drawn as a distractor)

A "frame" is a group of M consecutive tokens.  The needle frame is
[marker, payload, distractor, ...]; the retrieval prompt is
[query, answer-start] and the expected answer is the payload token.
Frame embeddings are a smooth random walk on the unit sphere, with the
needle frame's embedding pushed orthogonal to its neighbours so the
depth-score partitioner can isolate it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import compressor as C
from . import model as M
from . import partitioner as P
from .errors import PlanError, VocabError, WindowError
from .numerics import Rng

PAD = 0
NEEDLE_QUERY = 1
ORDER_QUERY = 2
ANSWER_START = 3
NEEDLE_MARK = 4
DISTRACT_LO, DISTRACT_HI = 16, 384
PAYLOAD_LO, PAYLOAD_HI = 384, 512

WALK_STEP = 0.08  # unit-sphere walk step; keeps adjacent cosine well above 0.8


@dataclass(frozen=True)
class NeedleSpec:
    haystack_frames: int = 64
    needle_depth: float = 0.5
    tokens_per_frame: int = 4
    payload: int | None = None  # None -> drawn from the payload pool
    embed_dim: int = 16
    scene_count: int = 1        # 2 -> a scene cut splits the walk in two
    max_stream_tokens: int = 8192

    def validate(self) -> "NeedleSpec":
        if not 0.0 <= self.needle_depth <= 1.0:
            raise PlanError(f"needle_depth must be in [0,1], got {self.needle_depth}")
        if self.haystack_frames < 1:
            raise PlanError("haystack_frames must be >= 1")
        if self.tokens_per_frame < 2:
            raise PlanError("needle frames need at least 2 tokens (marker + payload)")
        if self.payload is not None and not PAYLOAD_LO <= self.payload < PAYLOAD_HI:
            raise VocabError(f"payload {self.payload} outside reserved pool "
                             f"[{PAYLOAD_LO}, {PAYLOAD_HI})")
        if self.scene_count not in (1, 2):
            raise PlanError("scene_count must be 1 or 2")
        if self.haystack_frames * self.tokens_per_frame > self.max_stream_tokens:
            raise WindowError(
                f"{self.haystack_frames} frames x {self.tokens_per_frame} tokens "
                f"exceed the {self.max_stream_tokens}-token stream limit")
        return self


@dataclass
class NeedleInstance:
    stream: np.ndarray
    frames: P.FrameEmbeddings
    prompt: np.ndarray
    answer: np.ndarray
    needle_frame: int
    scene_cut: int | None = None


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _walk(rng, n: int, dim: int, restart_at: int | None = None) -> np.ndarray:
    """Smooth unit-sphere walk; an optional restart jumps to a direction
    orthogonal to the current point (a scene cut)."""
    out = np.empty((n, dim))
    cur = _unit(rng.gen.standard_normal(dim))
    for i in range(n):
        if i == restart_at:
            jump = rng.gen.standard_normal(dim)
            jump -= cur * (jump @ cur)
            cur = _unit(jump)
        out[i] = cur
        cur = _unit(cur + WALK_STEP * rng.gen.standard_normal(dim))
    return out


def _spike(rng, prev: np.ndarray | None, nxt: np.ndarray | None, dim: int) -> np.ndarray:
    """A direction orthogonal to both neighbours (cross-cosine ~ 0).

    The neighbours are close to parallel, so project onto the orthogonal
    complement of their span rather than Gram-Schmidting them one at a time."""
    basis = []
    for nb in (prev, nxt):
        if nb is None:
            continue
        b = nb.copy()
        for q in basis:
            b -= q * (b @ q)
        norm = np.linalg.norm(b)
        if norm > 1e-9:
            basis.append(b / norm)
    v = rng.gen.standard_normal(dim)
    for q in basis:
        v -= q * (v @ q)
    # keep a small random in-span component: exact orthogonality would tie
    # the two adjacent similarity dips and strict-peak detection needs them
    # to differ; the residual cosine stays below 0.2 either side
    u = _unit(rng.gen.standard_normal(dim))
    return _unit(0.98 * _unit(v) + 0.2 * u)


def needle_position(spec: NeedleSpec) -> int:
    return int(round(spec.needle_depth * (spec.haystack_frames - 1)))


def gen_needle(spec: NeedleSpec, rng: Rng) -> NeedleInstance:
    spec.validate()
    nf, m, dim = spec.haystack_frames, spec.tokens_per_frame, spec.embed_dim
    nu = needle_position(spec)
    payload = spec.payload if spec.payload is not None else \
        int(rng.integers(PAYLOAD_LO, PAYLOAD_HI))

    stream = rng.integers(DISTRACT_LO, DISTRACT_HI, size=nf * m).astype(np.int64)
    frame = stream[nu * m:(nu + 1) * m]
    frame[0] = NEEDLE_MARK
    frame[1] = payload

    cut = None
    if spec.scene_count == 2 and nf >= 4:
        lo, hi = max(2, nf // 3), min(nf - 2, 2 * nf // 3) + 1
        cut = int(rng.integers(lo, hi))
    emb = _walk(rng, nf, dim, restart_at=cut)
    prev_v = emb[nu - 1] if nu > 0 else None
    next_v = emb[nu + 1] if nu < nf - 1 else None
    emb[nu] = _spike(rng, prev_v, next_v, dim)
    frames = P.FrameEmbeddings(emb, tokens_per_frame=m)

    return NeedleInstance(
        stream=stream, frames=frames,
        prompt=np.array([NEEDLE_QUERY, ANSWER_START], dtype=np.int64),
        answer=np.array([payload], dtype=np.int64),
        needle_frame=nu, scene_cut=cut)


@dataclass(frozen=True)
class OrderingSpec:
    n_events: int = 3
    clip_frames: int = 4
    tokens_per_frame: int = 4
    payloads: tuple = ()    # empty -> drawn without replacement
    embed_dim: int = 16

    def validate(self) -> "OrderingSpec":
        if self.n_events < 2:
            raise PlanError("need at least 2 events to order")
        if self.clip_frames < 1 or self.tokens_per_frame < 2:
            raise PlanError("clips need >= 1 frame of >= 2 tokens")
        if self.payloads:
            if len(self.payloads) != self.n_events:
                raise PlanError(f"{len(self.payloads)} payloads for {self.n_events} events")
            if len(set(self.payloads)) != len(self.payloads):
                raise PlanError(f"duplicate payload tokens: {sorted(self.payloads)}")
            for p in self.payloads:
                if not PAYLOAD_LO <= p < PAYLOAD_HI:
                    raise VocabError(f"payload {p} outside reserved pool")
        return self


@dataclass
class OrderingInstance:
    stream: np.ndarray
    frames: P.FrameEmbeddings
    prompt: np.ndarray
    answer: np.ndarray       # payloads in stream (temporal) order
    event_slots: np.ndarray  # clip index of each event, in answer order


def gen_ordering(spec: OrderingSpec, rng: Rng) -> OrderingInstance:
    spec.validate()
    ne, cf, m = spec.n_events, spec.clip_frames, spec.tokens_per_frame
    nf = ne * cf
    if spec.payloads:
        payloads = np.array(spec.payloads, dtype=np.int64)
    else:
        payloads = rng.gen.choice(np.arange(PAYLOAD_LO, PAYLOAD_HI), size=ne,
                                  replace=False).astype(np.int64)
    slots = np.arange(ne)
    rng.shuffle(slots)  # slots[e] = clip position of event e

    stream = rng.integers(DISTRACT_LO, DISTRACT_HI, size=nf * m).astype(np.int64)
    for e in range(ne):
        at = slots[e] * cf * m
        stream[at] = NEEDLE_MARK
        stream[at + 1] = payloads[e]

    emb = _walk(rng, nf, spec.embed_dim)
    for e in range(ne):
        fidx = slots[e] * cf
        prev_v = emb[fidx - 1] if fidx > 0 else None
        next_v = emb[fidx + 1] if fidx < nf - 1 else None
        emb[fidx] = _spike(rng, prev_v, next_v, spec.embed_dim)

    order = np.argsort(slots)  # events sorted by clip position = temporal order
    return OrderingInstance(
        stream=stream,
        frames=P.FrameEmbeddings(emb, tokens_per_frame=m),
        prompt=np.array([ORDER_QUERY, ANSWER_START], dtype=np.int64),
        answer=payloads[order],
        event_slots=slots[order])


@dataclass(frozen=True)
class SuperImageSpec:
    kind: str = "video"     # "single_image" | "multi_image" | "video"
    n_frames: int = 0       # frames (video/multi_image)
    patch_grid: tuple = (0, 0)  # (rows, cols) for single_image
    tokens_per_patch: int = 4

    def groups(self) -> int:
        if self.kind == "single_image":
            return self.patch_grid[0] * self.patch_grid[1]
        if self.kind in ("multi_image", "video"):
            return self.n_frames
        raise PlanError(f"unknown super-image kind {self.kind!r}")


def gen_super_image(spec: SuperImageSpec, rng: Rng) -> np.ndarray:
    """Any input kind becomes a flat stream of uniform M-token groups."""
    g = spec.groups()
    if g < 1:
        raise PlanError(f"{spec.kind} with zero groups")
    return rng.integers(DISTRACT_LO, DISTRACT_HI,
                        size=g * spec.tokens_per_patch).astype(np.int64)


def isolated_by_plan(instance: NeedleInstance, plan: C.CompressionPlan) -> bool:
    """True when the needle frame sits at an interval edge (start or end),
    counting the stream ends as edges."""
    m = instance.frames.tokens_per_frame
    nu = instance.needle_frame
    edges = set()
    for iv in plan.intervals:
        edges.add(iv.start // m)                       # first frame
        edges.add((iv.start + iv.width) // m - 1)      # last frame
    return nu in edges


@dataclass
class EvalGrid:
    lengths: list
    depths: list
    accuracy: np.ndarray  # (len(lengths), len(depths)); NaN marks absent
    trials: int

    def to_csv(self) -> str:
        lines = ["length_frames,depth,accuracy,trials"]
        for i, L in enumerate(self.lengths):
            for j, dp in enumerate(self.depths):
                a = self.accuracy[i, j]
                cell = "nan" if math.isnan(a) else f"{a:.6g}"
                lines.append(f"{L},{dp:g},{cell},{self.trials}")
        return "\n".join(lines) + "\n"


def _eval_cell(params, cfg, vst, part_cfg, ratio, length, depth, trials, rng,
               tokens_per_frame=4, scene_count=1, fixed_interval=None):
    """Accuracy over `trials` fresh instances; NaN when the configuration
    cannot fit (window/plan limits), per the absent-not-zero rule."""
    hits = 0
    for t in range(trials):
        r = rng.child("cell", length, f"{depth:.4f}", t)
        spec = NeedleSpec(haystack_frames=length, needle_depth=depth,
                          scene_count=scene_count,
                          tokens_per_frame=tokens_per_frame)
        inst = gen_needle(spec, r)
        try:
            if fixed_interval is not None:
                plan = P.fixed_partition(len(inst.stream), fixed_interval, ratio)
            else:
                pc = P.PartitionConfig(
                    threshold=part_cfg.threshold,
                    min_interval_frames=part_cfg.min_interval_frames,
                    max_interval_tokens=part_cfg.max_interval_tokens,
                    default_ratio=ratio)
                plan = P.dynamic_plan(inst.frames, pc)
            plan.validate(cfg)
            cache, _ = C.encode_sequence(params, cfg, vst, inst.stream, plan)
            gen, _ = C.decode_with_cache(params, cfg, cache, inst.prompt,
                                         len(inst.answer))
        except (WindowError, PlanError):
            return math.nan
        hits += int(np.array_equal(gen, inst.answer))
    return hits / trials if trials else math.nan


def evaluate_grid(params, cfg: M.ModelConfig, vst, part_cfg: P.PartitionConfig,
                  lengths, depths, trials: int, seed: int, ratio: int,
                  tokens_per_frame: int = 4, scene_count: int = 1,
                  fixed_interval: int | None = None, jobs: int = 1) -> EvalGrid:
    """The length x depth accuracy heatmap.  Each cell draws its own
    deterministic child stream, so results do not depend on cell order
    or on how many workers evaluate them."""
    rng = Rng(seed)
    acc = np.full((len(lengths), len(depths)), math.nan)
    cells = [(i, j) for i in range(len(lengths)) for j in range(len(depths))]
    if trials < 1:
        return EvalGrid(list(lengths), list(depths), acc, trials)

    def run(ij):
        i, j = ij
        return i, j, _eval_cell(params, cfg, vst, part_cfg, ratio,
                                int(lengths[i]), float(depths[j]), trials, rng,
                                tokens_per_frame=tokens_per_frame,
                                scene_count=scene_count,
                                fixed_interval=fixed_interval)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(run, cells))
    else:
        results = [run(ij) for ij in cells]
    for i, j, a in results:
        acc[i, j] = a
    return EvalGrid(list(lengths), list(depths), acc, trials)


def write_dataset(path, instances: list[NeedleInstance], seed: int):
    """JSON-lines dataset; embeddings go to sibling .vxt files."""
    path = Path(path)
    with open(path, "w") as f:
        for i, inst in enumerate(instances):
            ref = f"{path.stem}.emb{i}.vxt"
            P.save_frames(str(path.parent / ref), inst.frames)
            f.write(json.dumps({
                "stream": inst.stream.tolist(),
                "embeddings_ref": ref,
                "prompt": inst.prompt.tolist(),
                "answer": inst.answer.tolist(),
                "seed": seed,
            }) + "\n")


def load_dataset(path) -> list[NeedleInstance]:
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        frames = P.load_frames(str(path.parent / rec["embeddings_ref"]))
        stream = np.array(rec["stream"], dtype=np.int64)
        marks = np.flatnonzero(stream == NEEDLE_MARK)
        nu = int(marks[0]) // frames.tokens_per_frame if len(marks) else 0
        out.append(NeedleInstance(
            stream=stream, frames=frames,
            prompt=np.array(rec["prompt"], dtype=np.int64),
            answer=np.array(rec["answer"], dtype=np.int64),
            needle_frame=nu))
    return out
