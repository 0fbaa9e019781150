"""Staged compression-ratio training.

Training starts at gentle compression and raises the ceiling in stages:
the first half of the run samples ratios from {2, 4}, then {2, 4, 8},
then {2, 4, 8, 12}, and the final stretch adds 16.  Each step draws a
ratio for its stage pool, builds a uniform compression plan, encodes the
haystack chunk by chunk with summary slots, and supervises only the
answer tokens behind the compressed cache.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from . import compressor as C
from . import harness as H
from . import model as M
from .autodiff import backward, cross_entropy_mean
from .errors import NonFiniteError, PlanError, TrainingDiverged
from .numerics import Rng

STAGE_FRACTIONS = (0.5, 0.2, 0.15, 0.15)
RATIO_LADDER = (2, 4, 8, 12, 16)
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
DIVERGE_LOSS = 1e3


@dataclass(frozen=True)
class Stage:
    start: int        # first step (inclusive)
    stop: int         # last step (exclusive)
    ratio_pool: tuple

    def __post_init__(self):
        if self.stop <= self.start:
            raise PlanError(f"empty stage [{self.start}, {self.stop})")
        if not self.ratio_pool or any(r < 1 for r in self.ratio_pool):
            raise PlanError(f"bad ratio pool {self.ratio_pool}")


@dataclass(frozen=True)
class CurriculumSchedule:
    total_steps: int
    stages: tuple

    def validate(self) -> "CurriculumSchedule":
        if self.total_steps < 1:
            raise PlanError("total_steps must be >= 1")
        if not self.stages:
            raise PlanError("schedule has no stages")
        cursor = 0
        for st in self.stages:
            if st.start != cursor:
                raise PlanError(f"stage gap/overlap at step {st.start} (expected {cursor})")
            cursor = st.stop
        if cursor != self.total_steps:
            raise PlanError(f"stages cover [0, {cursor}) but total_steps={self.total_steps}")
        return self

    def stage_for(self, step: int) -> Stage:
        if not 0 <= step < self.total_steps:
            raise PlanError(f"step {step} outside [0, {self.total_steps})")
        for st in self.stages:
            if st.start <= step < st.stop:
                return st
        raise PlanError(f"no stage covers step {step}")  # unreachable after validate

    def max_ratio(self) -> int:
        return max(max(st.ratio_pool) for st in self.stages)

    def to_json(self) -> str:
        return json_dump({
            "total_steps": self.total_steps,
            "stages": [{"start": s.start, "stop": s.stop,
                        "ratio_pool": list(s.ratio_pool)} for s in self.stages],
        })

    @staticmethod
    def from_json(text: str) -> "CurriculumSchedule":
        import json
        d = json.loads(text)
        stages = tuple(Stage(s["start"], s["stop"], tuple(s["ratio_pool"]))
                       for s in d["stages"])
        return CurriculumSchedule(d["total_steps"], stages).validate()


def json_dump(obj) -> str:
    import json
    return json.dumps(obj, indent=2, sort_keys=True)


def default_schedule(total_steps: int, max_ratio: int = 16) -> CurriculumSchedule:
    """50/20/15/15 split with cumulative pools {2,4} -> +8 -> +12 -> +16.

    Ratios above max_ratio are dropped from the ladder; trailing stages
    whose pool would not grow merge into the previous stage.
    """
    if total_steps < 1:
        raise PlanError("total_steps must be >= 1")
    ladder = [r for r in RATIO_LADDER if r <= max_ratio]
    if not ladder:
        raise PlanError(f"max_ratio {max_ratio} excludes every ladder ratio")
    pools = [tuple(ladder[:k]) for k in (2, 3, 4, 5)]
    pools = [p for p in pools if p]
    # cumulative boundaries; last stage absorbs rounding
    bounds, acc = [], 0.0
    for f in STAGE_FRACTIONS[:-1]:
        acc += f
        bounds.append(int(round(acc * total_steps)))
    cuts = [0] + bounds + [total_steps]
    stages = []
    for i in range(4):
        start, stop = cuts[i], cuts[i + 1]
        pool = pools[min(i, len(pools) - 1)]
        if stop <= start:
            continue
        if stages and stages[-1].ratio_pool == pool:
            stages[-1] = Stage(stages[-1].start, stop, pool)
        else:
            stages.append(Stage(start, stop, pool))
    return CurriculumSchedule(total_steps, tuple(stages)).validate()


def fixed_schedule(total_steps: int, ratio: int) -> CurriculumSchedule:
    """Single-ratio baseline: every step trains at the same compression."""
    return CurriculumSchedule(total_steps,
                              (Stage(0, total_steps, (ratio,)),)).validate()


def sample_ratio(schedule: CurriculumSchedule, step: int, seed: int) -> int:
    """Deterministic per (seed, step); independent of sampling order."""
    stage = schedule.stage_for(step)
    r = Rng(seed).child("ratio", step)
    return int(stage.ratio_pool[int(r.integers(0, len(stage.ratio_pool)))])


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 200
    learning_rate: float = 1e-3
    optimizer: str = "adam"        # "adam" | "sgd"
    seed: int = 0
    trainable_scope: str = "vst_only"  # "vst_only" | "all"
    precision: int = 8
    batch_size: int = 4
    haystack_frames: tuple = (16, 32)
    tokens_per_frame: int = 4
    interval_tokens: int = 64      # uniform training-plan interval width
    max_ratio: int = 16
    plan_mode: str = "uniform"     # "uniform" | "dynamic" (depth-score partition)
    scene_count: int = 1

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise PlanError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise PlanError(f"unknown optimizer {self.optimizer!r}")
        if self.trainable_scope not in ("vst_only", "all"):
            raise PlanError(f"unknown trainable_scope {self.trainable_scope!r}")
        if self.total_steps < 0:
            raise PlanError("total_steps must be >= 0")
        if self.batch_size < 1:
            raise PlanError("batch_size must be >= 1")
        if self.plan_mode not in ("uniform", "dynamic"):
            raise PlanError(f"unknown plan_mode {self.plan_mode!r}")
        return self


def trainable_names(cfg: M.ModelConfig, scope: str) -> list[str]:
    names = sorted(C.vst_param_shapes(cfg))
    if scope == "all":
        names += sorted(M.param_shapes(cfg))
    return names


def _tensor_by_name(params, vst: C.VstParams, name: str):
    if name.startswith("vst."):
        return vst.tensors[name]
    return params[name]


def batch_instances(tc: TrainConfig, step: int, rng: Rng) -> list[H.NeedleInstance]:
    out = []
    for b in range(tc.batch_size):
        r = rng.child("batch", step, b)
        frames = int(r.choice(list(tc.haystack_frames)))
        spec = H.NeedleSpec(haystack_frames=frames,
                            needle_depth=float(r.uniform()),
                            tokens_per_frame=tc.tokens_per_frame,
                            scene_count=tc.scene_count)
        out.append(H.gen_needle(spec, r.child("gen")))
    return out


def _plan_for(inst, ratio: int, tc: TrainConfig):
    if tc.plan_mode == "dynamic":
        from . import partitioner as P
        pc = P.PartitionConfig(default_ratio=ratio,
                               max_interval_tokens=tc.interval_tokens)
        return P.dynamic_plan(inst.frames, pc)
    return C.uniform_plan(len(inst.stream), tc.interval_tokens, ratio)


def loss_and_grads(params, cfg: M.ModelConfig, vst: C.VstParams,
                   instances, ratio: int, tc: TrainConfig):
    """Mean answer loss over the batch plus grads for the trainable scope.

    Items are processed one at a time (each graph is freed before the
    next), and their grads are reduced in batch order so the sum is
    bit-reproducible.
    """
    names = trainable_names(cfg, tc.trainable_scope)
    leaves = {n: _tensor_by_name(params, vst, n) for n in names}
    total = {n: np.zeros_like(leaves[n].data) for n in names}
    losses = []
    for bi, inst in enumerate(instances):
        plan = _plan_for(inst, ratio, tc)
        try:
            cache, _ = C.encode_sequence(params, cfg, vst, inst.stream, plan,
                                         train=True)
            loss = C.answer_loss(params, cfg, cache, inst.prompt, inst.answer)
        except NonFiniteError as e:
            raise NonFiniteError(f"batch item {bi}: {e}") from e
        if not math.isfinite(float(loss.data)):
            raise NonFiniteError(f"batch item {bi}: non-finite loss {loss.data}")
        grads = backward(loss)
        for n in names:
            g = grads.get(leaves[n])
            if g is not None:
                total[n] += g
        losses.append(float(loss.data))
    scale = 1.0 / len(instances)
    for n in names:
        total[n] *= scale
    return float(np.mean(losses)), total


def grad_norm(grads: dict) -> float:
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g * g))
    return math.sqrt(sq)


# ---------------------------------------------------------------- gradients


@dataclass
class BlockReport:
    name: str
    rel_err: float
    analytic: float
    numeric: float
    ok: bool


@dataclass
class GradCheckReport:
    blocks: list
    tol: float

    @property
    def ok(self) -> bool:
        return all(b.ok for b in self.blocks)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("block,rel_err,analytic,numeric,ok\n")
        for b in self.blocks:
            buf.write(f"{b.name},{b.rel_err:.3e},{b.analytic:.6e},"
                      f"{b.numeric:.6e},{int(b.ok)}\n")
        return buf.getvalue()


def grad_check(params, cfg: M.ModelConfig, vst: C.VstParams,
               scope: str = "all", ratios=(1, 2, 4), instances: int = 3,
               seed: int = 0, tol: float = 1e-4, h: float = 1e-5,
               corrupt_block: str | None = None) -> GradCheckReport:
    """Directional finite-difference check of the full pipeline gradient.

    For every trainable block, perturb along the (unit) analytic gradient
    direction and compare the central difference of the loss against the
    directional derivative.  `corrupt_block` deliberately falsifies one
    block's gradient to prove the check can catch a planted fault.
    """
    rng = Rng(seed)
    names = trainable_names(cfg, scope)
    blocks: list[BlockReport] = []
    per_block: dict[str, list] = {n: [] for n in names}

    for inst_i in range(instances):
        ratio = ratios[inst_i % len(ratios)]
        r = rng.child("gc", inst_i)
        frames = int(r.integers(4, 8))
        inst = H.gen_needle(H.NeedleSpec(haystack_frames=frames,
                                         needle_depth=float(r.uniform())),
                            r.child("gen"))
        tc = TrainConfig(trainable_scope=scope, interval_tokens=16)
        plan = C.uniform_plan(len(inst.stream), tc.interval_tokens, ratio)

        def f():
            # forward only: same values as the training path, no tape
            cache, _ = C.encode_sequence(params, cfg, vst, inst.stream, plan)
            return float(C.answer_loss(params, cfg, cache, inst.prompt,
                                       inst.answer).data)

        _, grads = loss_and_grads(params, cfg, vst, [inst], ratio, tc)
        for n in names:
            g = grads[n]
            if corrupt_block == n:
                g = g + 0.5 * (np.abs(g).max() + 1.0)
            gn = np.linalg.norm(g)
            if gn == 0.0:
                per_block[n].append((0.0, 0.0, 0.0))
                continue
            d = g / gn
            leaf = _tensor_by_name(params, vst, n)
            base = leaf.data.copy()
            leaf.data = base + h * d
            fp = f()
            leaf.data = base - h * d
            fm = f()
            leaf.data = base
            numeric = (fp - fm) / (2 * h)
            analytic = float(np.sum(grads[n] * d)) if corrupt_block != n \
                else float(np.sum(g * d))
            denom = max(abs(analytic), abs(numeric), 1e-12)
            per_block[n].append((abs(analytic - numeric) / denom, analytic, numeric))

    for n in names:
        rows = per_block[n] or [(0.0, 0.0, 0.0)]
        worst = max(rows, key=lambda t: t[0])
        blocks.append(BlockReport(n, worst[0], worst[1], worst[2], worst[0] < tol))
    return GradCheckReport(blocks, tol)


# ---------------------------------------------------------------- optimizers


class Optimizer:
    def __init__(self, tc: TrainConfig, names):
        self.lr = tc.learning_rate
        self.kind = tc.optimizer
        self.t = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, leaves: dict, grads: dict):
        self.t += 1
        for n, leaf in leaves.items():
            g = grads[n]
            if self.kind == "sgd":
                leaf.data = leaf.data - self.lr * g
                continue
            if self.m[n] is None:
                self.m[n] = np.zeros_like(g)
                self.v[n] = np.zeros_like(g)
            self.m[n] = ADAM_BETA1 * self.m[n] + (1 - ADAM_BETA1) * g
            self.v[n] = ADAM_BETA2 * self.v[n] + (1 - ADAM_BETA2) * g * g
            mh = self.m[n] / (1 - ADAM_BETA1 ** self.t)
            vh = self.v[n] / (1 - ADAM_BETA2 ** self.t)
            leaf.data = leaf.data - self.lr * mh / (np.sqrt(vh) + ADAM_EPS)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: dict
    vst: C.VstParams
    curve: list          # (step, ratio_sampled, loss, grad_norm)
    schedule: CurriculumSchedule

    def curve_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,ratio_sampled,loss,grad_norm\n")
        for step, ratio, loss, gn in self.curve:
            buf.write(f"{step},{ratio},{loss:.8g},{gn:.8g}\n")
        return buf.getvalue()


def run_training(params, cfg: M.ModelConfig, vst: C.VstParams,
                 tc: TrainConfig, schedule: CurriculumSchedule | None = None,
                 log_every: int = 0) -> TrainResult:
    """The full loop: sample ratio -> build plan -> encode -> answer loss ->
    update.  Zero steps returns the initial parameters and an empty curve.
    Loss above 1e3 aborts with the offending step index."""
    tc.validate()
    if tc.total_steps == 0:
        empty = CurriculumSchedule(1, (Stage(0, 1, (1,)),))
        return TrainResult(params, vst, [], schedule or empty)
    if schedule is None:
        schedule = default_schedule(tc.total_steps, tc.max_ratio)
    schedule.validate()
    if schedule.total_steps != tc.total_steps:
        raise PlanError(f"schedule covers {schedule.total_steps} steps, "
                        f"config asks for {tc.total_steps}")
    names = trainable_names(cfg, tc.trainable_scope)
    leaves = {n: _tensor_by_name(params, vst, n) for n in names}
    opt = Optimizer(tc, names)
    rng = Rng(tc.seed)
    curve = []
    for step in range(tc.total_steps):
        ratio = sample_ratio(schedule, step, tc.seed)
        instances = batch_instances(tc, step, rng)
        loss, grads = loss_and_grads(params, cfg, vst, instances, ratio, tc)
        if loss > DIVERGE_LOSS or not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        gn = grad_norm(grads)
        opt.step(leaves, grads)
        curve.append((step, ratio, loss, gn))
        if log_every and step % log_every == 0:
            print(f"step {step} ratio {ratio} loss {loss:.4f} |g| {gn:.3g}")
    return TrainResult(params, vst, curve, schedule)


def pretrain_base(params, cfg: M.ModelConfig, tc: TrainConfig,
                  log_every: int = 0) -> list:
    """Uncompressed warm-up: teach the base model the retrieval task with
    full attention (no summary slots) before compression training."""
    tc.validate()
    names = sorted(M.param_shapes(cfg))
    leaves = {n: params[n] for n in names}
    opt = Optimizer(tc, names)
    rng = Rng(tc.seed)
    curve = []
    for step in range(tc.total_steps):
        instances = batch_instances(tc, step, rng)
        total = {n: np.zeros_like(leaves[n].data) for n in names}
        losses = []
        for bi, inst in enumerate(instances):
            full = np.concatenate([inst.stream, inst.prompt, inst.answer])
            h0 = M.embed_ids(params, full)
            rows = np.arange(len(full) - len(inst.answer) - 1, len(full) - 1)
            logits, _ = M.transformer_pass(params, cfg, h0,
                                           np.arange(len(full)), None,
                                           append="none", logits_rows=rows)
            loss = cross_entropy_mean(logits, inst.answer)
            if not math.isfinite(float(loss.data)):
                raise NonFiniteError(f"batch item {bi}: non-finite loss")
            grads = backward(loss)
            for n in names:
                g = grads.get(leaves[n])
                if g is not None:
                    total[n] += g
            losses.append(float(loss.data))
        for n in names:
            total[n] /= len(instances)
        loss = float(np.mean(losses))
        if loss > DIVERGE_LOSS:
            raise TrainingDiverged(step, loss)
        opt.step(leaves, total)
        curve.append((step, 1, loss, grad_norm(total)))
        if log_every and step % log_every == 0:
            print(f"pretrain {step} loss {loss:.4f}")
    return curve
