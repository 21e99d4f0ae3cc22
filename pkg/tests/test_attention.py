import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lain import tensor as T
from lain.attention import (AttentionTrace, LengthModulatedAttention, TemperatureParams, attention_logits,
                            behaviour_weights, compute_temperature, condition_query_key, length_modulated_attention,
                            read_traces, target_attention_base, trace_from_result, write_traces)
from lain.metrics import entropy, gini
from lain.tensor import DegenerateMaskError, DimensionError, Tensor


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


# query/key conditioning

def test_identity_projector_recovers_query():
    d = 4
    q, k, e = Tensor(rand((2, d))), Tensor(rand((2, 3, d), 1)), Tensor(rand((2, d), 2))
    w = Tensor(np.vstack([np.eye(d), np.zeros((d, d))]))
    q2, k2 = condition_query_key(q, k, e, w, w)
    np.testing.assert_array_equal(q2.data, q.data)
    np.testing.assert_array_equal(k2.data, k.data)


def test_complementary_projector_returns_length_term():
    d = 4
    q, k, e = Tensor(rand((2, d))), Tensor(rand((2, 3, d), 1)), Tensor(rand((2, d), 2))
    w = Tensor(np.vstack([np.zeros((d, d)), np.eye(d)]))
    q2, k2 = condition_query_key(q, k, e, w, w)
    np.testing.assert_array_equal(q2.data, e.data)
    for j in range(3):
        np.testing.assert_array_equal(k2.data[:, j], e.data)


def test_conditioning_equals_explicit_concatenation():
    d = 3
    q, e = rand((2, d)), rand((2, d), 1)
    w = rand((2 * d, d), 2)
    q2, _ = condition_query_key(Tensor(q), Tensor(rand((2, 1, d))), Tensor(e), Tensor(w), Tensor(w))
    np.testing.assert_allclose(q2.data, np.hstack([q, e]) @ w, atol=1e-14)


def test_conditioning_shape_errors():
    with pytest.raises(DimensionError):
        condition_query_key(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 4))),
                            Tensor(np.ones((8, 3))), Tensor(np.ones((8, 4))))


def test_length_path_gradient():
    rng = np.random.default_rng(5)
    d = 6
    lma = LengthModulatedAttention(d, rng, L0=100.0)
    lma.w_q.tensor.data[d:] = rng.normal(size=(d, d)) * 0.3
    lma.w_k.tensor.data[d:] = rng.normal(size=(d, d)) * 0.3
    h = T.new_param("h", rng.normal(size=(2, d)))
    q, kv = Tensor(rng.normal(size=(2, d))), Tensor(rng.normal(size=(2, 5, d)))
    mask = np.ones((2, 5), bool)
    w = rng.normal(size=(2, d))

    def f():
        res = length_modulated_attention(q, kv, mask, [30, 400], lma, h.tensor)
        return T.sum(T.mul(res.output, w))

    report = T.grad_check(f, [h, lma.emb_w, lma.w_q, lma.w_k, lma.temp.beta, lma.temp.gamma_raw])
    assert not [e for e in report if e.failed]


# temperature

def test_temperature_at_reference_length():
    tp = TemperatureParams(0.5, 0.01, L0=147.0)
    assert abs(compute_temperature(147.0, tp) - 1.25) < 1e-12


def test_temperature_long_limit():
    tp = TemperatureParams(0.5, 0.01, L0=147.0)
    assert abs(compute_temperature(147.0 + 1e9, tp) - 1.0) < 1e-9


def test_temperature_at_zero_length():
    tp = TemperatureParams(0.5, 0.01, L0=147.0)
    expected = 1 + 0.5 / (1 + math.exp(-1.47))
    assert abs(compute_temperature(0, tp) - expected) < 1e-12
    assert abs(compute_temperature(0, tp) - 1.4065) < 1e-4


def test_temperature_bounds_and_monotone_on_grid():
    tp = TemperatureParams(0.5, 0.01, L0=147.0)
    taus = compute_temperature(np.linspace(0, 1000, 100), tp)
    assert np.all(taus > 1) and np.all(taus < 1.5)
    assert np.all(np.diff(taus) < 0)


def test_gamma_stays_nonnegative():
    tp = TemperatureParams(0.5)
    tp.gamma_raw.tensor.data[...] = -50.0
    assert tp.gamma >= 0
    assert compute_temperature(0, tp) >= 1.0
    with pytest.raises(ValueError):
        TemperatureParams(0.0)


# attention

def test_single_key_gets_all_weight():
    q, kv = Tensor(rand((1, 4))), Tensor(rand((1, 1, 4), 1))
    res = target_attention_base(q, kv, np.ones((1, 1), bool))
    np.testing.assert_array_equal(res.alpha, [[1.0]])
    np.testing.assert_allclose(res.output.data, kv.data[:, 0], atol=0)


def test_doubling_temperature_raises_entropy():
    z = np.array([3.0, 1.0, 0.0, -2.0])
    e1 = entropy(T.softmax_temp(z, 1.0).data)
    e2 = entropy(T.softmax_temp(z, 2.0).data)
    p1, p2 = np.exp(z) / np.exp(z).sum(), np.exp(z / 2) / np.exp(z / 2).sum()
    assert abs(e1 - -(p1 * np.log(p1)).sum()) < 1e-12
    assert abs(e2 - -(p2 * np.log(p2)).sum()) < 1e-12
    assert e2 > e1


def test_short_users_attend_more_evenly():
    tp = TemperatureParams(0.5, 0.01, L0=147.0)
    z = np.array([2.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    g_short = gini(T.softmax_temp(z, compute_temperature(10, tp)).data)
    g_long = gini(T.softmax_temp(z, compute_temperature(1000, tp)).data)
    assert g_short < g_long


def test_base_matches_lma_with_ablated_components():
    rng = np.random.default_rng(7)
    d = 5
    q, kv = Tensor(rng.normal(size=(3, d))), Tensor(rng.normal(size=(3, 6, d)))
    mask = rng.random((3, 6)) < 0.7
    mask[:, 0] = True
    lma = LengthModulatedAttention(d, rng, gamma=0.5, L0=50.0)
    h = Tensor(rng.normal(size=(3, d)))
    base = target_attention_base(q, kv, mask)
    # conditioning at [I|0] and temperature switched off
    res = length_modulated_attention(q, kv, mask, [3, 60, 900], lma, h, qk_cond=True, temp_scale=False)
    np.testing.assert_allclose(res.output.data, base.output.data, rtol=0, atol=1e-12)
    # both switched off: bitwise
    off = length_modulated_attention(q, kv, mask, [3, 60, 900], lma, h, qk_cond=False, temp_scale=False)
    assert off.output.data.tobytes() == base.output.data.tobytes()
    assert np.all(off.tau == 1.0)
    # temperature off alone: tau identically one
    assert np.all(res.tau == 1.0)


def test_disabling_conditioning_keeps_base_logits():
    rng = np.random.default_rng(8)
    d = 4
    q, kv = Tensor(rng.normal(size=(2, d))), Tensor(rng.normal(size=(2, 5, d)))
    lma = LengthModulatedAttention(d, rng, L0=10.0)
    lma.w_q.tensor.data[:] = rng.normal(size=(2 * d, d))
    res = length_modulated_attention(q, kv, np.ones((2, 5), bool), [1, 2], lma, None, qk_cond=False)
    np.testing.assert_array_equal(res.logits, attention_logits(q, kv).data)


def test_uniform_keys_give_uniform_weights():
    kv = Tensor(np.tile(rand((1, 1, 4)), (1, 5, 1)))
    res = target_attention_base(Tensor(rand((1, 4), 3)), kv, np.ones((1, 5), bool))
    np.testing.assert_allclose(res.alpha, np.full((1, 5), 0.2), atol=1e-15)


def test_three_position_hand_softmax():
    q = np.array([[1.0, 2.0, 0.0, -1.0]])
    ks = np.array([[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0], [0.5, 0.5, 0.0, 2.0]]])
    s = [1.0 / 2, 2.0 / 2, (0.5 + 1.0 - 2.0) / 2]
    expected = np.exp(s) / np.exp(s).sum()
    res = target_attention_base(Tensor(q), Tensor(ks), np.ones((1, 3), bool))
    np.testing.assert_allclose(res.alpha[0], expected, atol=1e-15)


def test_all_masked_rejected():
    with pytest.raises(DegenerateMaskError):
        target_attention_base(Tensor(rand((1, 3))), Tensor(rand((1, 2, 3))), np.zeros((1, 2), bool))
    lma = LengthModulatedAttention(3)
    with pytest.raises(DegenerateMaskError):
        length_modulated_attention(Tensor(rand((1, 3))), Tensor(rand((1, 2, 3))), np.zeros((1, 2), bool),
                                   [5], lma, Tensor(rand((1, 3))))


def test_masked_positions_get_no_gradient():
    rng = np.random.default_rng(9)
    kv = Tensor(rng.normal(size=(1, 4, 3)), requires_grad=True)
    mask = np.array([[True, False, True, False]])
    res = target_attention_base(Tensor(rng.normal(size=(1, 3))), kv, mask)
    assert res.alpha[0, 1] == 0 and res.alpha[0, 3] == 0
    T.sum(res.output).backward()
    assert np.all(kv.grad[0, 1] == 0) and np.all(kv.grad[0, 3] == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000), st.integers(0, 1200))
def test_output_is_convex_combination(m, seed, L):
    rng = np.random.default_rng(seed)
    d = 3
    kv = rng.normal(size=(1, m, d))
    mask = rng.random((1, m)) < 0.6
    mask[0, rng.integers(m)] = True
    lma = LengthModulatedAttention(d, rng, L0=147.0)
    res = length_modulated_attention(Tensor(rng.normal(size=(1, d))), Tensor(kv), mask, [L], lma,
                                     Tensor(rng.normal(size=(1, d))))
    valid = kv[0][mask[0]]
    out = res.output.data[0]
    assert np.all(out >= valid.min(axis=0) - 1e-12) and np.all(out <= valid.max(axis=0) + 1e-12)
    assert abs(res.alpha.sum() - 1) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=10))
def test_smoothing_monotone_in_tau(z):
    z = np.array(z)
    if np.ptp(z) < 1e-3:
        return
    taus = np.linspace(1.0, 1.5, 11)
    ents = [entropy(T.softmax_temp(z, t).data) for t in taus]
    ginis = [gini(T.softmax_temp(z, t).data) for t in taus]
    assert all(b > a for a, b in zip(ents, ents[1:]))
    assert all(b < a for a, b in zip(ginis, ginis[1:]))


# traces

def test_trace_excludes_prompts_and_renormalises():
    alpha = np.array([0.4, 0.1, 0.3, 0.0, 0.2])
    w, degenerate = behaviour_weights(alpha, 2, np.array([True, False, True]))
    np.testing.assert_allclose(w, [0.6, 0.4])
    assert not degenerate
    _, degenerate = behaviour_weights(np.array([1.0, 0.0, 0.0]), 1)
    assert degenerate


def test_trace_from_result_and_roundtrip():
    rng = np.random.default_rng(4)
    kv = Tensor(rng.normal(size=(2, 6, 3)))
    mask = np.ones((2, 6), bool)
    mask[1, 5] = False
    res = target_attention_base(Tensor(rng.normal(size=(2, 3))), kv, mask, n_prompts=2)
    tr = trace_from_result(res, 1, 150, "medium", "short", user_id=7)
    assert tr.weights.size == 3 and abs(tr.weights.sum() - 1) < 1e-12
    buf = io.StringIO()
    write_traces([tr, AttentionTrace(np.zeros(1), 1, "short", degenerate=True)], buf)
    buf.seek(0)
    (back,) = read_traces(buf)
    assert back.user_id == 7 and back.bucket == "medium" and back.user_length == 150
    np.testing.assert_array_equal(back.weights, tr.weights)
    np.testing.assert_array_equal(back.logits, tr.logits)
