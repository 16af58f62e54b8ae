import dataclasses

import numpy as np
import pytest

from emotrack import memory as mem
from emotrack import numerics as nx
from emotrack.model import Run, as_tensors, forward, init_params, make_batch

from conftest import assert_bitwise, random_examples, tiny_model_config


@pytest.fixture
def cfg():
    return tiny_model_config()


@pytest.fixture
def P(cfg):
    return init_params(cfg, 0)


def _rows(cfg, n, seed=0, dim=None):
    from emotrack.rng import stream
    return stream(seed, "mem-tests").normal(size=(n, dim or cfg.d))


# history projection -------------------------------------------------------------------

def test_project_single_row(cfg, P):
    assert mem.project_history(_rows(cfg, 1, dim=cfg.d_e), P, cfg).shape == (1, cfg.d)


def test_project_zero_weights_gives_bias(cfg, P):
    P = dict(P, **{"mem.proj.w": np.zeros((cfg.d_e, cfg.d)), "mem.proj.b": np.arange(cfg.d, dtype=float)})
    V = mem.project_history(_rows(cfg, 3, dim=cfg.d_e), P, cfg).data
    np.testing.assert_array_equal(V, np.tile(np.arange(cfg.d, dtype=float), (3, 1)))


def test_project_is_affine(cfg, P):
    P = dict(P, **{"mem.proj.b": _rows(cfg, 1, seed=4)[0]})
    u = _rows(cfg, 1, seed=1, dim=cfg.d_e)
    f = lambda x: mem.project_history(x, P, cfg).data
    zero = f(np.zeros_like(u))
    np.testing.assert_allclose(f(2.5 * u) - zero, 2.5 * (f(u) - zero), rtol=1e-12, atol=1e-14)


def test_project_dim_mismatch(cfg, P):
    with pytest.raises(ValueError):
        mem.project_history(np.zeros((2, cfg.d_e + 1)), P, cfg)


# slot memory ----------------------------------------------------------------------

def test_slot_memory_has_s_rows(cfg, P):
    for m in (1, 3, 11):
        assert mem.build_slot_memory(nx.Tensor(_rows(cfg, m)), None, P, cfg).shape == (cfg.S, cfg.d)


def test_slot_memory_single_value_row(cfg, P):
    v = _rows(cfg, 1, seed=2)
    M = mem.build_slot_memory(nx.Tensor(v), None, P, cfg).data
    out = (v @ P["mem.slot_attn.wv"] + P["mem.slot_attn.bv"]) @ P["mem.slot_attn.wo"] + P["mem.slot_attn.bo"]
    expect = nx.layer_norm(out, P["mem.slot_ln.g"], P["mem.slot_ln.b"], cfg.ln_eps).data
    np.testing.assert_allclose(M, np.tile(expect, (cfg.S, 1)), rtol=1e-12, atol=1e-13)


def test_slot_memory_permutation_invariant(cfg, P):
    V = _rows(cfg, 6, seed=3)
    perm = np.array([4, 0, 5, 2, 1, 3])
    a = mem.build_slot_memory(nx.Tensor(V), None, P, cfg).data
    b = mem.build_slot_memory(nx.Tensor(V[perm]), None, P, cfg).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


# retrieval gate ---------------------------------------------------------------------

def test_closed_retrieval_gate_keeps_d(cfg, P):
    P = dict(P, **{"mem.gate.b": np.full(cfg.d, -np.inf)})
    D = _rows(cfg, cfg.J, seed=5)
    M = _rows(cfg, cfg.S, seed=6)
    np.testing.assert_array_equal(mem.retrieve_and_gate(nx.Tensor(D), nx.Tensor(M), P, cfg).data, D)


def test_open_retrieval_gate_adds_context(cfg, P):
    P = dict(P, **{"mem.gate.b": np.full(cfg.d, np.inf), "mem.out.w": np.eye(cfg.d)})
    D = _rows(cfg, cfg.J, seed=5)
    M = _rows(cfg, cfg.S, seed=6)
    C = nx.multi_head_attention(D, M, M, mem._sub(P, "mem.ret_attn"), cfg.h).data
    np.testing.assert_allclose(mem.retrieve_and_gate(nx.Tensor(D), nx.Tensor(M), P, cfg).data, D + C,
                               rtol=1e-14, atol=1e-15)


def test_retrieval_preserves_shape(cfg, P):
    out = mem.retrieve_and_gate(nx.Tensor(_rows(cfg, cfg.J)), nx.Tensor(_rows(cfg, cfg.S, 1)), P, cfg)
    assert out.shape == (cfg.J, cfg.d)


# summary gate ---------------------------------------------------------------------

def test_summary_of_single_row_is_mapped_row(cfg, P):
    v = _rows(cfg, 1, seed=7)
    s = mem.summary_vector(nx.Tensor(v), None, P).data
    np.testing.assert_allclose(s, v @ P["mem.sum.w"] + P["mem.sum.b"], rtol=1e-14)


def test_closed_summary_gate_keeps_d(cfg, P):
    P = dict(P, **{"mem.sgate.b": np.full(cfg.d, -np.inf)})
    D = _rows(cfg, cfg.J, seed=8)
    np.testing.assert_array_equal(mem.summary_gate(nx.Tensor(D), nx.Tensor(_rows(cfg, 3)), None, P, cfg).data, D)


def test_open_summary_gate_adds_mapped_summary(cfg, P):
    P = dict(P, **{"mem.sgate.b": np.full(cfg.d, np.inf)})
    D, V = _rows(cfg, cfg.J, seed=8), _rows(cfg, 3, seed=9)
    vbar = V.mean(axis=0) @ P["mem.sum.w"] + P["mem.sum.b"]
    np.testing.assert_allclose(mem.summary_gate(nx.Tensor(D), nx.Tensor(V), None, P, cfg).data, D + vbar,
                               rtol=1e-13, atol=1e-14)


def test_duplicated_rows_leave_summary_unchanged(cfg, P):
    V = _rows(cfg, 4, seed=10)
    a = mem.summary_vector(nx.Tensor(V), None, P).data
    b = mem.summary_vector(nx.Tensor(np.concatenate([V, V])), None, P).data
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


# history gate ----------------------------------------------------------------------

def test_history_gate_examples():
    has = np.array([True, True, False, True])
    np.testing.assert_array_equal(mem.history_gate(has, 0.0, "train", 1, 2), has)
    assert not mem.history_gate(has, 1.0, "train", 1, 2).any()
    np.testing.assert_array_equal(mem.history_gate(has, 1.0, "eval"), has)
    assert not mem.history_gate([False] * 5, 0.0, "eval").any()


def test_history_drop_rate():
    has = np.ones(10_000, dtype=bool)
    kept = mem.history_gate(has, 0.1, "train", seed=0, step=0)
    assert abs((1 - kept.mean()) - 0.1) <= 0.02


def test_history_drop_rate_across_steps():
    drops = [not mem.history_gate([True], 0.1, "train", seed=3, step=s)[0] for s in range(10_000)]
    assert abs(np.mean(drops) - 0.1) <= 0.02


# composition -----------------------------------------------------------------------

def test_refine_applies_retrieval_then_summary(cfg, P):
    ex = random_examples(cfg, seed=1, n=3)
    batch = make_batch(ex)
    D = nx.Tensor(_rows(cfg, 3 * cfg.J, seed=11).reshape(3, cfg.J, cfg.d))
    use = np.array([False, True, True])
    out = mem.refine(D, batch, use, P, cfg).data
    np.testing.assert_array_equal(out[0], D.data[0])
    for i in (1, 2):
        m = batch.prev_mask[i]
        V = mem.project_history(batch.prev[i][m], P, cfg)
        Dr = mem.retrieve_and_gate(nx.Tensor(D.data[i]), mem.build_slot_memory(V, None, P, cfg), P, cfg)
        expect = mem.summary_gate(Dr, V, None, P, cfg).data
        np.testing.assert_allclose(out[i], expect, rtol=1e-12, atol=1e-13)


def test_memory_off_ignores_history(cfg):
    off = dataclasses.replace(cfg, memory_mode="none")
    P = as_tensors(init_params(off, 0))
    ex = random_examples(off, seed=2)
    a = forward(P, off, make_batch(ex))
    b = forward(P, off, make_batch([dataclasses.replace(e, prev_turns=None) for e in ex]))
    assert_bitwise(a[0].data, b[0].data)


def test_rows_without_history_match_memoryless_model_in_mixed_batch(cfg):
    off = dataclasses.replace(cfg, memory_mode="none")
    batch = make_batch(random_examples(cfg, seed=3))
    assert batch.has_prev.tolist() == [False, True, True, True]
    a = forward(as_tensors(init_params(cfg, 0)), cfg, batch)[0].data
    b = forward(as_tensors(init_params(off, 0)), off, batch)[0].data
    assert_bitwise(a[0], b[0])
    assert not np.array_equal(a[1:], b[1:])


def test_memory_reads_only_previous_turns(cfg):
    P = as_tensors(init_params(cfg, 0))
    ex = random_examples(cfg, seed=4)
    base = forward(P, cfg, make_batch(ex))[1].data
    moved = [dataclasses.replace(e, prev_turns=None if e.prev_turns is None else e.prev_turns + 1.0)
             for e in ex]
    shifted = forward(P, cfg, make_batch(moved))[1].data
    assert base[0] == shifted[0]
    assert np.all(base[1:] != shifted[1:])


def test_summary_mode_has_no_retrieval_parameters():
    P = init_params(tiny_model_config(memory_mode="summary"), 0)
    assert not any(k.startswith(("mem.slot", "mem.ret", "mem.gate", "mem.out")) for k in P)
    assert "mem.sgate.w" in P


def test_memory_dropout_is_train_only(cfg, P):
    V = nx.Tensor(_rows(cfg, 5))
    a = mem.build_slot_memory(V, None, P, cfg, Run("eval", 0, 0, 0.5)).data
    b = mem.build_slot_memory(V, None, P, cfg, None).data
    assert_bitwise(a, b)
    c = mem.build_slot_memory(V, None, P, cfg, Run("train", 0, 0, 0.5)).data
    assert not np.array_equal(a, c)
