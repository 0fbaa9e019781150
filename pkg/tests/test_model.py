import json
import math

import numpy as np
import pytest

from vxl import autodiff as ad
from vxl import model as M
from vxl.errors import NonFiniteError, PlanError, ShapeError, WindowError
from vxl.numerics import Rng


def tiny_cfg(**kw):
    base = dict(n_layers=2, hidden_size=8, query_heads=2, kv_heads=2, head_dim=4,
                intermediate_size=16, vocab_size=11, context_window=64, precision=8)
    base.update(kw)
    return M.ModelConfig(**base).validate()


def make(seed=0, **kw):
    cfg = tiny_cfg(**kw)
    return cfg, M.init_params(cfg, Rng(seed))


def test_config_validation_catches_bad_shapes():
    with pytest.raises(ShapeError):
        M.ModelConfig(hidden_size=10, query_heads=2, head_dim=4).validate()
    with pytest.raises(ShapeError):
        tiny_cfg(query_heads=2, kv_heads=3, hidden_size=8, head_dim=4)
    with pytest.raises(ShapeError):
        tiny_cfg(context_window=1)


def test_config_json_roundtrip_exact_field_names():
    cfg = tiny_cfg()
    data = json.loads(cfg.to_json())
    assert set(data) == {"n_layers", "hidden_size", "query_heads", "kv_heads",
                         "head_dim", "intermediate_size", "vocab_size",
                         "context_window", "precision"}
    assert M.ModelConfig.from_json(cfg.to_json()) == cfg


def test_config_json_rejects_unknown_fields():
    with pytest.raises(ShapeError):
        M.ModelConfig.from_json('{"n_layers": 2, "bogus": 1}')


def test_single_token_logit_shape():
    cfg, params = make()
    out = M.forward_full(params, cfg, [3])
    assert out.shape == (1, cfg.vocab_size)


def test_forward_full_deterministic():
    cfg, params = make()
    ids = [1, 5, 2, 9, 0]
    a = M.forward_full(params, cfg, ids)
    b = M.forward_full(params, cfg, ids)
    assert np.array_equal(a, b)


def test_causality_future_tokens_do_not_affect_past_logits():
    cfg, params = make(seed=3)
    base = M.forward_full(params, cfg, [4, 1, 2, 3, 5])
    perm = M.forward_full(params, cfg, [4, 5, 3, 2, 1])
    assert np.array_equal(base[0], perm[0])
    zeroed = M.forward_full(params, cfg, [4, 1, 0, 0, 0])
    assert np.array_equal(base[:2], zeroed[:2])


def test_forward_full_rejects_overlong_input():
    cfg, params = make()
    with pytest.raises(WindowError):
        M.forward_full(params, cfg, np.zeros(cfg.context_window + 1, dtype=int))


def test_nonfinite_error_names_layer():
    cfg, params = make()
    params["layers.1.w_up"].data[0, 0] = np.nan
    with pytest.raises(NonFiniteError) as e:
        M.forward_full(params, cfg, [1, 2, 3])
    assert "layer 1" in str(e.value)


def test_step_with_empty_cache_equals_full_bitwise():
    cfg, params = make(seed=1)
    ids = np.array([7, 3, 3, 0, 10, 4])
    full = M.forward_full(params, cfg, ids)
    step, caches = M.forward_step(params, cfg, M.empty_caches(cfg), ids)
    assert np.array_equal(full, step)
    assert caches[0].rows == len(ids)


def test_token_at_a_time_matches_full_within_1e9():
    cfg, params = make(seed=2)
    rng = np.random.default_rng(0)
    ids = rng.integers(0, cfg.vocab_size, size=16)
    full = M.forward_full(params, cfg, ids)
    caches = M.empty_caches(cfg)
    rows = []
    for t in ids:
        logits, caches = M.forward_step(params, cfg, caches, [t])
        rows.append(logits[0])
    assert np.max(np.abs(np.array(rows) - full)) < 1e-9


def test_prefix_suffix_split_matches_full():
    cfg, params = make(seed=4)
    rng = np.random.default_rng(1)
    ids = rng.integers(0, cfg.vocab_size, size=20)
    full = M.forward_full(params, cfg, ids)
    for cut in (1, 7, 19):
        l1, caches = M.forward_step(params, cfg, M.empty_caches(cfg), ids[:cut])
        l2, caches = M.forward_step(params, cfg, caches, ids[cut:])
        assert np.max(np.abs(np.vstack([l1, l2]) - full)) < 1e-9


def test_cache_grows_by_new_rows():
    cfg, params = make()
    _, caches = M.forward_step(params, cfg, M.empty_caches(cfg), [1, 2, 3])
    _, caches = M.forward_step(params, cfg, caches, [4, 5])
    assert all(c.rows == 5 for c in caches)
    assert list(caches[0].positions) == [0, 1, 2, 3, 4]


def test_step_rejects_decreasing_cache_positions():
    cfg, params = make()
    _, caches = M.forward_step(params, cfg, M.empty_caches(cfg), [1, 2])
    caches[0].positions = np.array([1, 0])
    with pytest.raises(PlanError):
        M.forward_step(params, cfg, caches, [3])


def test_position_shift_invariance():
    cfg, params = make(seed=5)
    ids = np.array([1, 8, 2, 2, 6])
    h0 = M.embed_ids(params, ids)
    with ad.no_grad():
        a, _ = M.transformer_pass(params, cfg, h0, np.arange(5), logits_rows="all")
        b, _ = M.transformer_pass(params, cfg, h0, np.arange(5) + 37, logits_rows="all")
    assert np.max(np.abs(a.data - b.data)) < 1e-9


def test_grouped_query_heads_share_kv():
    cfg, params = make(seed=6, kv_heads=1)
    ids = [1, 2, 3, 4]
    full = M.forward_full(params, cfg, ids)
    step, caches = M.forward_step(params, cfg, M.empty_caches(cfg), ids)
    assert np.array_equal(full, step)
    assert caches[0].keys.data.shape == (4, cfg.kv_heads * cfg.head_dim)


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = np.zeros((3, 4))
    assert M.cross_entropy(logits, [0, 1, 2]) == pytest.approx(math.log(4), rel=1e-12)


def test_cross_entropy_saturated_correct_is_tiny():
    logits = np.zeros((2, 5))
    logits[0, 3] = 20.0
    logits[1, 1] = 20.0
    assert M.cross_entropy(logits, [3, 1]) < 1e-8


def test_cross_entropy_matches_scalar_loop():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(8, 6))
    targets = rng.integers(0, 6, size=8)
    total = 0.0
    for row, t in zip(logits, targets):
        total += -math.log(math.exp(row[t]) / sum(math.exp(v) for v in row))
    assert M.cross_entropy(logits, targets) == pytest.approx(total / 8, abs=1e-12)


def test_decode_greedy_is_deterministic_and_respects_window():
    cfg, params = make(seed=7)
    a, _ = M.decode_greedy(params, cfg, [1, 2], 4)
    b, _ = M.decode_greedy(params, cfg, [1, 2], 4)
    assert np.array_equal(a, b) and len(a) == 4
    with pytest.raises(WindowError):
        M.decode_greedy(params, cfg, [1, 2], cfg.context_window)


def test_params_save_load_roundtrip(tmp_path):
    cfg, params = make(seed=8)
    p = tmp_path / "m.vxb"
    M.save_params(str(p), cfg, params)
    cfg2, params2, extra = M.load_params(str(p))
    assert cfg2 == cfg and extra == {}
    ids = [1, 2, 3]
    assert np.array_equal(M.forward_full(params, cfg, ids),
                          M.forward_full(params2, cfg2, ids))


def test_gradient_flows_through_pass():
    cfg, params = make(seed=9)
    ids = np.array([1, 2, 3, 4, 5])
    h0 = M.embed_ids(params, ids)
    logits, _ = M.transformer_pass(params, cfg, h0, np.arange(5), logits_rows="all")
    loss = ad.cross_entropy_mean(logits, np.array([2, 3, 4, 5, 6]))
    grads = ad.backward(loss)
    w = params["layers.0.w_q"]
    assert w in grads and np.any(grads[w] != 0)

    direction = {n: np.random.default_rng(11).normal(size=t.data.shape)
                 for n, t in params.items()}
    h = 1e-6
    analytic = sum(np.sum(grads.get(t, 0.0) * direction[n]) for n, t in params.items())

    def at(eps):
        shifted = {n: ad.const(t.data + eps * direction[n]) for n, t in params.items()}
        out = M.forward_full(shifted, cfg, ids)
        return M.cross_entropy(out, [2, 3, 4, 5, 6])

    fd = (at(h) - at(-h)) / (2 * h)
    assert analytic == pytest.approx(fd, rel=1e-6)
