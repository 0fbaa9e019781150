import json
import subprocess
import sys

import numpy as np
import pytest

from vxl import cli
from vxl import compressor as C
from vxl import costmodel as CM
from vxl import model as M
from vxl import partitioner as P
from vxl.numerics import Rng
from vxl.tensorio import load_tensor


@pytest.fixture()
def artifacts(tmp_path):
    cfg = M.ModelConfig(n_layers=2, hidden_size=32, query_heads=2, kv_heads=2,
                        head_dim=16, intermediate_size=96, vocab_size=512,
                        context_window=512)
    params = M.init_params(cfg, Rng(7))
    vst = C.init_vst_params(cfg, params, Rng(7))
    model_path = tmp_path / "model.vxb"
    vst_path = tmp_path / "vst.vxb"
    M.save_params(str(model_path), cfg, params)
    from vxl.tensorio import save_bundle
    save_bundle(str(vst_path), {n: t.data for n, t in vst.tensors.items()})
    return cfg, params, vst, model_path, vst_path, tmp_path


def run_cli(args, capsys):
    code = cli.main([str(a) for a in args])
    out = capsys.readouterr().out.strip().splitlines()
    status = json.loads(out[-1]) if out else {}
    return code, status, out


def test_partition_command(tmp_path, capsys):
    rng = Rng(3)
    emb = rng.normal((12, 8))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    fe = P.FrameEmbeddings(emb, tokens_per_frame=4)
    frames_path = tmp_path / "frames.vxt"
    P.save_frames(str(frames_path), fe)
    out = tmp_path / "out"
    code, status, lines = run_cli(
        ["partition", "--frames", frames_path, "--outdir", out, "--ratio", 4], capsys)
    assert code == 0
    assert status["status"] == "ok" and status["command"] == "partition"
    assert len(lines) == 1  # single status line on stdout
    assert (out / "plan.json").exists()
    assert (out / "depth.csv").exists()
    assert (out / "config.json").exists()
    plan = C.CompressionPlan.from_json((out / "plan.json").read_text())
    assert plan.total_len == 48


def test_encode_passthrough_matches_full(artifacts, capsys):
    cfg, params, _, model_path, _, tmp = artifacts
    ids = Rng(9).integers(5, 500, size=40).astype(np.int64)
    ids_path = tmp / "ids.txt"
    ids_path.write_text(",".join(map(str, ids.tolist())))
    out = tmp / "enc"
    code, status, _ = run_cli(
        ["encode", "--model", model_path, "--ids", ids_path,
         "--outdir", out, "--passthrough"], capsys)
    assert code == 0 and status["passthrough"] is True
    logits = load_tensor(str(out / "logits.vxt"))
    want = M.forward_full(params, cfg, ids)
    assert np.abs(logits - want).max() < 1e-9


def test_encode_then_decode(artifacts, capsys):
    cfg, params, vst, model_path, vst_path, tmp = artifacts
    ids = Rng(4).integers(5, 500, size=64).astype(np.int64)
    ids_path = tmp / "ids.txt"
    ids_path.write_text(",".join(map(str, ids.tolist())))
    enc = tmp / "enc"
    code, status, _ = run_cli(
        ["encode", "--model", model_path, "--vst", vst_path, "--ids", ids_path,
         "--outdir", enc, "--interval", 32, "--ratio", 4], capsys)
    assert code == 0
    assert status["cache_rows"] == 16  # 64 tokens / 4
    assert (enc / "trace.csv").exists()

    dec = tmp / "dec"
    code, status, _ = run_cli(
        ["decode", "--model", model_path, "--cache", enc / "cache.vxb",
         "--prompt", "1,3", "--max-new", 3, "--outdir", dec], capsys)
    assert code == 0
    gen = [int(x) for x in (dec / "generated.txt").read_text().strip().split(",")]
    assert status["generated"] == gen and len(gen) == 3


def test_encode_without_vst_is_usage_error(artifacts, capsys):
    _, _, _, model_path, _, tmp = artifacts
    code, status, _ = run_cli(
        ["encode", "--model", model_path, "--ids", "1,2,3",
         "--outdir", tmp / "x"], capsys)
    assert code == 2
    assert status["status"] == "error" and "--vst" in status["error"]


def test_missing_model_file_is_input_error(tmp_path, capsys):
    code, status, _ = run_cli(
        ["encode", "--model", tmp_path / "nope.vxb", "--ids", "1,2",
         "--outdir", tmp_path / "o", "--passthrough"], capsys)
    assert code == 2
    assert status["status"] == "error"


def test_unknown_command_exits_2(capsys):
    assert cli.main(["frobnicate"]) == 2


def test_train_then_eval_roundtrip(artifacts, capsys):
    _, _, _, model_path, _, tmp = artifacts
    out = tmp / "train"
    code, status, _ = run_cli(
        ["train", "--outdir", out, "--init", model_path, "--steps", 2,
         "--batch", 1, "--frames-pool", "8", "--interval", 16,
         "--seed", 5, "--max-ratio", 4], capsys)
    assert code == 0 and status["steps"] == 2
    assert (out / "model.vxb").exists() and (out / "vst.vxb").exists()
    loss_lines = (out / "loss.csv").read_text().splitlines()
    assert loss_lines[0] == "step,ratio_sampled,loss,grad_norm"
    assert len(loss_lines) == 3

    ev = tmp / "eval"
    code, status, _ = run_cli(
        ["eval", "--model", out / "model.vxb", "--vst", out / "vst.vxb",
         "--outdir", ev, "--lengths", "8", "--depths", "0.5", "--trials", 2,
         "--ratio", 4, "--seed", 1], capsys)
    assert code == 0
    grid_lines = (ev / "grid.csv").read_text().splitlines()
    assert grid_lines[0] == "length_frames,depth,accuracy,trials"
    assert len(grid_lines) == 2


def test_vxl_seed_env_fallback(artifacts, capsys, monkeypatch):
    _, _, _, model_path, _, tmp = artifacts
    monkeypatch.setenv("VXL_SEED", "77")
    out = tmp / "train_env"
    code, status, _ = run_cli(
        ["train", "--outdir", out, "--init", model_path, "--steps", 1,
         "--batch", 1, "--frames-pool", "8", "--interval", 16], capsys)
    assert code == 0
    cfg_dump = json.loads((out / "config.json").read_text())
    assert cfg_dump["seed"] == 77


def test_config_file_defaults_and_flag_override(artifacts, capsys):
    _, _, _, model_path, _, tmp = artifacts
    conf = tmp / "conf.json"
    conf.write_text(json.dumps({"steps": 1, "batch": 1, "frames_pool": "8",
                                "interval": 16, "seed": 3}))
    out = tmp / "t1"
    code, status, _ = run_cli(
        ["--config", conf, "train", "--outdir", out, "--init", model_path], capsys)
    assert code == 0 and status["steps"] == 1
    out2 = tmp / "t2"
    code, status, _ = run_cli(
        ["--config", conf, "train", "--outdir", out2, "--init", model_path,
         "--steps", 2], capsys)
    assert code == 0 and status["steps"] == 2  # explicit flag wins


def test_cost_command_matches_costmodel(tmp_path, capsys):
    out = tmp_path / "cost"
    code, status, _ = run_cli(
        ["cost", "--n", 4096, "--window", 512, "--ratio", 8,
         "--outdir", out, "--sweep", "512,1024"], capsys)
    assert code == 0
    cfg = M.ModelConfig()
    assert status["flops_full"] == CM.flops_full(4096, cfg).total
    assert status["flops_compressed"] == CM.flops_compressed(4096, 512, 8, cfg).total
    report = json.loads((out / "cost.json").read_text())
    assert report["full"]["total"] == status["flops_full"]
    assert (out / "sweep.csv").read_text().startswith("n,flops_full")


def test_gradcheck_command(artifacts, capsys):
    _, _, _, model_path, vst_path, tmp = artifacts
    out = tmp / "gc"
    code, status, _ = run_cli(
        ["gradcheck", "--model", model_path, "--vst", vst_path,
         "--scope", "vst_only", "--instances", 1, "--outdir", out,
         "--seed", 0], capsys)
    assert code == 0 and status["passed"] is True
    assert (out / "gradcheck.csv").read_text().startswith("block,rel_err")


def test_dump_and_load_commands(artifacts, capsys):
    _, _, _, model_path, _, tmp = artifacts
    out = tmp / "dump"
    code, status, _ = run_cli(["dump", "--model", model_path, "--outdir", out], capsys)
    assert code == 0
    report = json.loads((out / "dump.json").read_text())
    assert "lm_head" in report["tensors"]
    assert report["config"]["hidden_size"] == 32

    code, status, _ = run_cli(["load", "--model", model_path], capsys)
    assert code == 0 and status["tensors"] == len(report["tensors"])


def test_console_entrypoint_subprocess(artifacts):
    _, _, _, model_path, _, tmp = artifacts
    proc = subprocess.run(
        [sys.executable, "-m", "vxl.cli", "load", "--model", str(model_path)],
        capture_output=True, text=True)
    assert proc.returncode == 0
    status = json.loads(proc.stdout.strip().splitlines()[-1])
    assert status["status"] == "ok"


def test_artifacts_stay_under_outdir(artifacts, capsys, tmp_path, monkeypatch):
    _, _, _, model_path, _, tmp = artifacts
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    out = tmp / "only_here"
    ids = tmp / "ids.txt"
    ids.write_text("5,6,7,8")
    code, _, _ = run_cli(
        ["encode", "--model", model_path, "--ids", ids, "--outdir", out,
         "--passthrough"], capsys)
    assert code == 0
    assert list(work.iterdir()) == []  # nothing leaked into the cwd
    assert (out / "logits.vxt").exists()
