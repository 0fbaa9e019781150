"""Command-line front end.

Every run prints exactly one JSON status line to stdout and writes its
artifacts under --outdir.  Exit codes: 0 success, 2 bad usage or bad
input, 1 unexpected internal failure.  --seed falls back to the VXL_SEED
environment variable when the flag is absent.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import compressor as C
from . import costmodel as CM
from . import curriculum as CU
from . import harness as H
from . import model as M
from . import partitioner as P
from .errors import VxlError
from .numerics import Rng


def _status(payload: dict):
    print(json.dumps(payload))


def _outdir(args) -> Path:
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("VXL_SEED")
    return int(env) if env else 0


def _write_effective_config(out: Path, args, extra=None):
    cfg = {k: v for k, v in vars(args).items()
           if k not in ("func", "config") and not k.startswith("_")}
    if extra:
        cfg.update(extra)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True,
                                                default=str) + "\n")


def _load_config_defaults(parser, argv):
    """--config file supplies defaults; explicit flags override them."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if known.config:
        with open(known.config) as f:
            defaults = json.load(f)
        parser.set_defaults(**defaults)
        for sub in parser._subparsers_by_name.values():
            sub.set_defaults(**defaults)


def _ids_from(path_or_csv: str) -> np.ndarray:
    p = Path(path_or_csv)
    if p.exists():
        text = p.read_text().strip()
    else:
        text = path_or_csv
    return np.array([int(t) for t in text.replace("\n", ",").split(",") if t.strip()],
                    dtype=np.int64)


def _load_model(args):
    cfg, params, _ = M.load_params(args.model)
    return cfg, params


def _load_vst(cfg, args):
    from . import tensorio
    tensors, _ = tensorio.load_bundle(args.vst)
    from .autodiff import param
    return C.VstParams(cfg, {n: param(t) for n, t in tensors.items()})


def _save_vst(path, vst: C.VstParams):
    from . import tensorio
    tensorio.save_bundle(str(path), {n: t.data for n, t in vst.tensors.items()})


# ---------------------------------------------------------------- commands


def cmd_partition(args):
    out = _outdir(args)
    frames = P.load_frames(args.frames)
    pc = P.PartitionConfig(threshold=args.threshold,
                           min_interval_frames=args.min_frames,
                           max_interval_tokens=args.max_tokens,
                           default_ratio=args.ratio)
    sims = P.similarity_series(frames)
    depths = P.depth_scores(sims)
    bounds = P.find_boundaries(depths, pc)
    plan = P.plan_from_boundaries(bounds, frames.n_frames,
                                  frames.tokens_per_frame, pc)
    (out / "plan.json").write_text(plan.to_json() + "\n")
    (out / "depth.csv").write_text(P.depth_csv(sims, depths, bounds))
    _write_effective_config(out, args)
    _status({"command": "partition", "status": "ok",
             "frames": frames.n_frames, "boundaries": bounds,
             "intervals": len(plan.intervals),
             "cache_rows": plan.cache_rows})


def cmd_encode(args):
    out = _outdir(args)
    cfg, params = _load_model(args)
    ids = _ids_from(args.ids)
    if args.passthrough:
        logits, _ = C.passthrough_encode(params, cfg, ids)
        from . import tensorio
        tensorio.dump_tensor(str(out / "logits.vxt"), logits)
        _write_effective_config(out, args)
        _status({"command": "encode", "status": "ok", "passthrough": True,
                 "tokens": len(ids), "logits_rows": int(logits.shape[0])})
        return
    if not args.vst:
        raise VxlError("encode needs --vst unless --passthrough is set")
    vst = _load_vst(cfg, args)
    if args.plan:
        plan = C.CompressionPlan.from_json(Path(args.plan).read_text())
    else:
        plan = C.uniform_plan(len(ids), args.interval, args.ratio)
    cache, trace = C.encode_sequence(params, cfg, vst, ids, plan)
    C.save_cache(str(out / "cache.vxb"), cfg, cache)
    (out / "trace.csv").write_text(C.trace_to_csv(trace))
    _write_effective_config(out, args)
    _status({"command": "encode", "status": "ok", "tokens": len(ids),
             "cache_rows": cache.rows, "chunks": len(trace)})


def cmd_decode(args):
    out = _outdir(args)
    cfg, params = _load_model(args)
    cache_cfg, cache = C.load_cache(args.cache)
    if cache_cfg != cfg:
        raise VxlError("cache was built for a different model configuration")
    prompt = _ids_from(args.prompt)
    gen, logits = C.decode_with_cache(params, cfg, cache, prompt, args.max_new)
    (out / "generated.txt").write_text(",".join(map(str, gen.tolist())) + "\n")
    from . import tensorio
    if logits.size:
        tensorio.dump_tensor(str(out / "logits.vxt"), logits)
    _write_effective_config(out, args)
    _status({"command": "decode", "status": "ok",
             "generated": gen.tolist(), "cache_rows": cache.rows})


def cmd_train(args):
    out = _outdir(args)
    seed = _seed(args)
    if args.init:
        cfg, params, _ = M.load_params(args.init)
    else:
        cfg = M.ModelConfig()
        params = M.init_params(cfg, Rng(seed))
    if args.vst_init:
        vst = _load_vst(cfg, argparse.Namespace(vst=args.vst_init))
    else:
        vst = C.init_vst_params(cfg, params, Rng(seed))

    frames_pool = tuple(int(x) for x in args.frames_pool.split(","))
    pre_curve = []
    if args.pretrain_steps:
        ptc = CU.TrainConfig(total_steps=args.pretrain_steps, batch_size=args.batch,
                             haystack_frames=frames_pool, trainable_scope="all",
                             learning_rate=args.pretrain_lr, seed=seed)
        pre_curve = CU.pretrain_base(params, cfg, ptc)
    tc = CU.TrainConfig(total_steps=args.steps, learning_rate=args.lr,
                        optimizer=args.optimizer, seed=seed,
                        trainable_scope=args.scope, batch_size=args.batch,
                        haystack_frames=frames_pool, interval_tokens=args.interval,
                        max_ratio=args.max_ratio, plan_mode=args.plan_mode,
                        scene_count=args.scene_count)
    schedule = None
    if args.fixed_ratio is not None and args.steps:
        schedule = CU.fixed_schedule(args.steps, args.fixed_ratio)
    result = CU.run_training(params, cfg, vst, tc, schedule=schedule)
    M.save_params(str(out / "model.vxb"), cfg, params)
    _save_vst(out / "vst.vxb", result.vst)
    (out / "loss.csv").write_text(result.curve_csv())
    if pre_curve:
        rows = "".join(f"{s},{r},{l:.8g},{g:.8g}\n" for s, r, l, g in pre_curve)
        (out / "pretrain_loss.csv").write_text("step,ratio_sampled,loss,grad_norm\n" + rows)
    _write_effective_config(out, args, {"seed": seed})
    final = result.curve[-1][2] if result.curve else None
    _status({"command": "train", "status": "ok", "steps": len(result.curve),
             "pretrain_steps": len(pre_curve), "final_loss": final,
             "model": str(out / "model.vxb"), "vst": str(out / "vst.vxb")})


def cmd_eval(args):
    out = _outdir(args)
    cfg, params = _load_model(args)
    vst = _load_vst(cfg, args)
    lengths = [int(x) for x in args.lengths.split(",")]
    depths = [float(x) for x in args.depths.split(",")]
    pc = P.PartitionConfig(default_ratio=args.ratio)
    grid = H.evaluate_grid(params, cfg, vst, pc, lengths, depths,
                           trials=args.trials, seed=_seed(args), ratio=args.ratio,
                           scene_count=args.scene_count,
                           fixed_interval=args.fixed_interval, jobs=args.jobs)
    (out / "grid.csv").write_text(grid.to_csv())
    _write_effective_config(out, args, {"seed": _seed(args)})
    mean = float(np.nanmean(grid.accuracy)) if np.isfinite(grid.accuracy).any() else None
    _status({"command": "eval", "status": "ok", "cells": grid.accuracy.size,
             "mean_accuracy": mean, "grid": str(out / "grid.csv")})


def cmd_cost(args):
    out = _outdir(args)
    cfg = M.ModelConfig() if not args.model else M.load_params(args.model)[0]
    full = CM.flops_full(args.n, cfg, corrected_softmax=args.corrected_softmax)
    comp = CM.flops_compressed(args.n, args.window, args.ratio, cfg,
                               corrected_softmax=args.corrected_softmax)
    plan = C.uniform_plan(args.n, args.window, args.ratio)
    mem = CM.kv_memory(args.n, plan, cfg)
    report = {"n": args.n, "window": args.window, "ratio": args.ratio,
              "full": full.to_dict(), "compressed": comp.to_dict(),
              "memory": mem.to_dict()}
    (out / "cost.json").write_text(json.dumps(report, indent=2) + "\n")
    if args.sweep:
        lengths = [int(x) for x in args.sweep.split(",")]
        (out / "sweep.csv").write_text(
            CM.sweep_csv(cfg, lengths, args.window, args.ratio))
    _write_effective_config(out, args)
    _status({"command": "cost", "status": "ok",
             "flops_full": full.total, "flops_compressed": comp.total,
             "kv_reduction": mem.reduction_factor})


def cmd_gradcheck(args):
    out = _outdir(args)
    if args.model:
        cfg, params = _load_model(args)
        vst = _load_vst(cfg, args) if args.vst else \
            C.init_vst_params(cfg, params, Rng(_seed(args)))
    else:
        cfg = M.ModelConfig()
        params = M.init_params(cfg, Rng(_seed(args)))
        vst = C.init_vst_params(cfg, params, Rng(_seed(args)))
    ratios = tuple(int(x) for x in args.ratios.split(","))
    rep = CU.grad_check(params, cfg, vst, scope=args.scope, ratios=ratios,
                        instances=args.instances, seed=_seed(args))
    (out / "gradcheck.csv").write_text(rep.to_csv())
    _write_effective_config(out, args, {"seed": _seed(args)})
    worst = max(rep.blocks, key=lambda b: b.rel_err)
    _status({"command": "gradcheck", "status": "ok", "passed": rep.ok,
             "blocks": len(rep.blocks), "worst_block": worst.name,
             "worst_rel_err": worst.rel_err})
    if not rep.ok:
        sys.exit(1)


def cmd_ablate(args):
    """Matched-budget comparison: curriculum schedule vs fixed-ratio."""
    out = _outdir(args)
    seed = _seed(args)
    frames_pool = tuple(int(x) for x in args.frames_pool.split(","))
    arms = {}
    for arm in ("curriculum", "fixed"):
        cfg, params, _ = M.load_params(args.init)
        vst = C.init_vst_params(cfg, params, Rng(seed))
        tc = CU.TrainConfig(total_steps=args.steps, learning_rate=args.lr,
                            seed=seed, trainable_scope=args.scope,
                            batch_size=args.batch, haystack_frames=frames_pool,
                            interval_tokens=args.interval,
                            max_ratio=args.max_ratio, plan_mode=args.plan_mode,
                            scene_count=args.scene_count)
        schedule = None if arm == "curriculum" else \
            CU.fixed_schedule(args.steps, args.max_ratio)
        result = CU.run_training(params, cfg, vst, tc, schedule=schedule)
        tail = [l for _, _, l, _ in result.curve[-args.window_steps:]]
        (out / f"loss_{arm}.csv").write_text(result.curve_csv())
        pc = P.PartitionConfig(default_ratio=args.eval_ratio)
        grid = H.evaluate_grid(params, cfg, vst, pc,
                               lengths=[int(x) for x in args.lengths.split(",")],
                               depths=[0.25, 0.75], trials=args.trials,
                               seed=seed + 1, ratio=args.eval_ratio, jobs=args.jobs)
        (out / f"grid_{arm}.csv").write_text(grid.to_csv())
        arms[arm] = {"final_window_loss": float(np.mean(tail)) if tail else None,
                     "needle_accuracy": float(np.nanmean(grid.accuracy))}
    (out / "ablation.json").write_text(json.dumps(arms, indent=2) + "\n")
    _write_effective_config(out, args, {"seed": seed})
    _status({"command": "ablate", "status": "ok", **{
        f"{k}_{m}": v[m] for k, v in arms.items()
        for m in ("final_window_loss", "needle_accuracy")}})


def cmd_dump(args):
    out = _outdir(args)
    cfg, params, extra = M.load_params(args.model)
    stats = {}
    for name, t in sorted(params.items()):
        a = t.data
        stats[name] = {"shape": list(a.shape),
                       "mean": float(a.mean()), "std": float(a.std()),
                       "min": float(a.min()), "max": float(a.max())}
    report = {"config": json.loads(cfg.to_json()), "tensors": stats}
    (out / "dump.json").write_text(json.dumps(report, indent=2) + "\n")
    _status({"command": "dump", "status": "ok", "tensors": len(stats),
             "report": str(out / "dump.json")})


def cmd_load(args):
    cfg, params, _ = M.load_params(args.model)
    M.check_params(cfg, params)
    _status({"command": "load", "status": "ok",
             "tensors": len(params), "hidden_size": cfg.hidden_size,
             "n_layers": cfg.n_layers, "vocab_size": cfg.vocab_size})


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vxl",
                                 description="visual-summary KV compression toolkit")
    ap.add_argument("--config", help="JSON file of flag defaults")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, outdir=True, seed=True):
        if outdir:
            p.add_argument("--outdir", required=True)
        if seed:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("partition", help="depth-score interval plan from frame embeddings")
    common(p, seed=False)
    p.add_argument("--frames", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--min-frames", type=int, default=1)
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--ratio", type=int, default=8)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("encode", help="compress a token stream into a summary cache")
    common(p, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--vst")
    p.add_argument("--ids", required=True, help="file or comma-separated ids")
    p.add_argument("--plan")
    p.add_argument("--interval", type=int, default=64)
    p.add_argument("--ratio", type=int, default=8)
    p.add_argument("--passthrough", action="store_true",
                   help="no compression; logits must match a full pass")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="greedy decoding against a saved cache")
    common(p, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=8)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="staged-ratio compression training")
    common(p)
    p.add_argument("--init", help="warm-start model bundle")
    p.add_argument("--vst-init", help="warm-start summary-projection bundle")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--pretrain-steps", type=int, default=0)
    p.add_argument("--pretrain-lr", type=float, default=3e-3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--scope", choices=("vst_only", "all"), default="vst_only")
    p.add_argument("--frames-pool", default="16,32")
    p.add_argument("--interval", type=int, default=64)
    p.add_argument("--max-ratio", type=int, default=16)
    p.add_argument("--fixed-ratio", type=int, default=None,
                   help="single-ratio baseline instead of the staged schedule")
    p.add_argument("--plan-mode", choices=("uniform", "dynamic"), default="uniform")
    p.add_argument("--scene-count", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="length x depth retrieval accuracy grid")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--vst", required=True)
    p.add_argument("--lengths", default="32,64,128,256,512")
    p.add_argument("--depths", default="0,0.25,0.5,0.75,1.0")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--ratio", type=int, default=8)
    p.add_argument("--scene-count", type=int, default=1)
    p.add_argument("--fixed-interval", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="analytic FLOPs and KV-memory report")
    common(p, seed=False)
    p.add_argument("--model")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--window", type=int, default=512)
    p.add_argument("--ratio", type=int, default=8)
    p.add_argument("--sweep", help="comma-separated lengths for sweep.csv")
    p.add_argument("--corrected-softmax", action="store_true")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p)
    p.add_argument("--model")
    p.add_argument("--vst")
    p.add_argument("--scope", choices=("vst_only", "all"), default="all")
    p.add_argument("--ratios", default="1,2,4")
    p.add_argument("--instances", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="curriculum vs fixed-ratio comparison")
    common(p)
    p.add_argument("--init", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--scope", choices=("vst_only", "all"), default="vst_only")
    p.add_argument("--frames-pool", default="16,32")
    p.add_argument("--interval", type=int, default=64)
    p.add_argument("--max-ratio", type=int, default=16)
    p.add_argument("--eval-ratio", type=int, default=16)
    p.add_argument("--lengths", default="32,64")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--window-steps", type=int, default=50)
    p.add_argument("--plan-mode", choices=("uniform", "dynamic"), default="uniform")
    p.add_argument("--scene-count", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump", help="model bundle inspection report")
    common(p, seed=False)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("load", help="validate a model bundle")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_load)

    ap._subparsers_by_name = {name: sp for name, sp in sub.choices.items()}
    return ap


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        _load_config_defaults(parser, argv)
        args = parser.parse_args(argv)
    except (OSError, json.JSONDecodeError) as e:
        _status({"status": "error", "error": f"config: {e}"})
        return 2
    except SystemExit as e:  # argparse already reported to stderr
        return int(e.code or 0)
    try:
        args.func(args)
        return 0
    except SystemExit as e:
        return int(e.code or 0)
    except (VxlError, OverflowError, FileNotFoundError, ValueError) as e:
        _status({"command": args.command, "status": "error",
                 "error": f"{type(e).__name__}: {e}"})
        return 2
    except Exception as e:  # noqa: BLE001 - last-resort so exit code is 1
        _status({"command": args.command, "status": "error",
                 "error": f"internal: {type(e).__name__}: {e}"})
        return 1


if __name__ == "__main__":
    sys.exit(main())
