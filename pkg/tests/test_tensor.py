import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lain import tensor as T
from lain.tensor import DegenerateMaskError, DimensionError, OracleInvalidError, Tensor

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def param(name, data):
    return T.new_param(name, np.asarray(data, dtype=np.float64))


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# matmul

def test_matmul_identity():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_projector_selects_row():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    T.sum(T.matmul(a, b)).backward()
    f = lambda: float((a.data @ b.data).sum())
    assert rel(a.grad, numeric_grad(f, a.data)) < 1e-6
    assert rel(b.grad, numeric_grad(f, b.data)) < 1e-6


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = rng.normal(size=(2, 3, 5))
    T.sum(T.mul(T.matmul(a, b), w)).backward()
    f = lambda: float(((a.data @ b.data) * w).sum())
    assert rel(a.grad, numeric_grad(f, a.data)) < 1e-6
    assert rel(b.grad, numeric_grad(f, b.data)) < 1e-6


# softmax_temp

def test_softmax_uniform_for_equal_logits():
    np.testing.assert_allclose(T.softmax_temp([0.0, 0.0, 0.0], 1.0).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_huge_temperature_is_uniform():
    out = T.softmax_temp([3.0, -7.0], 1e9).data
    np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-6)


def test_softmax_temperature_scaling_identity():
    a = T.softmax_temp([1.0, 2.0, 3.0], 2.0).data
    b = T.softmax_temp([0.5, 1.0, 1.5], 1.0).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_softmax_rejects_bad_inputs():
    with pytest.raises(DegenerateMaskError):
        T.softmax_temp([1.0, 2.0], 1.0, mask=[False, False])
    with pytest.raises(ValueError):
        T.softmax_temp([1.0, 2.0], 0.0)
    with pytest.raises(ValueError):
        T.softmax_temp([1.0, 2.0], -1.0)


def test_masked_positions_get_no_weight_and_no_gradient():
    z = Tensor([1.0, 5.0, 2.0, 9.0], requires_grad=True)
    mask = np.array([True, False, True, False])
    p = T.softmax_temp(z, 1.3, mask)
    assert p.data[1] == 0.0 and p.data[3] == 0.0
    T.sum(T.mul(p, np.array([1.0, 2.0, 3.0, 4.0]))).backward()
    assert z.grad[1] == 0.0 and z.grad[3] == 0.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(0.05, 50), finite,
       st.lists(st.booleans(), min_size=12, max_size=12))
def test_softmax_properties(z, tau, shift, mask_bits):
    mask = np.array(mask_bits[:z.size])
    if not mask.any():
        mask[0] = True
    p = T.softmax_temp(z, tau, mask).data
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all(p[~mask] == 0.0)
    assert np.all(np.isfinite(p))
    shifted = T.softmax_temp(z + shift, tau, mask).data
    np.testing.assert_allclose(shifted, p, atol=1e-9)


def test_softmax_gradient_wrt_logits_and_tau():
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=6), requires_grad=True)
    tau = Tensor(np.array(1.7), requires_grad=True)
    w = rng.normal(size=6)
    mask = np.array([1, 1, 0, 1, 1, 0], dtype=bool)
    T.sum(T.mul(T.softmax_temp(z, tau, mask), w)).backward()
    f = lambda: float((T.softmax_temp(z.data, float(tau.data), mask).data * w).sum())
    assert rel(z.grad, numeric_grad(f, z.data)) < 1e-6
    assert rel(tau.grad, numeric_grad(f, tau.data)) < 1e-6


# layer_norm

def test_layer_norm_constant_input_maps_to_bias():
    out = T.layer_norm(Tensor([3.0] * 4), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros(4))


def test_layer_norm_already_normalised():
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 16), elements=finite))
def test_layer_norm_moments(x):
    if np.ptp(x) < 1e-2:
        return
    out = T.layer_norm(Tensor(x), Tensor(np.ones(x.size)), Tensor(np.zeros(x.size))).data
    var = x.var()
    assert abs(out.mean()) < 1e-9
    # eps shrinks the variance by var / (var + eps)
    assert abs(out.var() - var / (var + 1e-5)) < 1e-6


def test_layer_norm_gradient():
    rng = np.random.default_rng(3)
    x, g, b = param("x", rng.normal(size=8)), param("g", rng.normal(size=8)), param("b", rng.normal(size=8))
    w = rng.normal(size=8)
    f = lambda: T.sum(T.mul(T.layer_norm(x.tensor, g.tensor, b.tensor), w))
    report = T.grad_check(f, [x, g, b], h=1e-5, tol=1e-5)
    assert not [e for e in report if e.failed]


# mlp_forward

def test_mlp_identity_network():
    x = Tensor([1.5, -2.0, 0.25])
    out = T.mlp_forward(x, [(Tensor(np.eye(3)), Tensor(np.zeros(3)), "identity")])
    np.testing.assert_array_equal(out.data, x.data)


def test_mlp_relu_definition():
    out = T.mlp_forward(Tensor([-1.0, 2.0]), [(Tensor(np.eye(2)), Tensor(np.zeros(2)), "relu")])
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_mlp_dimension_chain_break():
    layers = [(Tensor(np.ones((4, 8))), None, "relu"), (Tensor(np.ones((7, 2))), None, "identity")]
    with pytest.raises(DimensionError, match="layer 1"):
        T.mlp_forward(Tensor(np.ones(4)), layers)


def test_two_layer_mlp_gradient():
    rng = np.random.default_rng(4)
    x = rng.normal(size=4)
    w1, b1 = param("w1", rng.normal(size=(4, 8))), param("b1", rng.normal(size=8) * 0.1)
    w2, b2 = param("w2", rng.normal(size=(8, 2))), param("b2", rng.normal(size=2))
    f = lambda: T.sum(T.mul(T.mlp_forward(Tensor(x), [(w1.tensor, b1.tensor, "relu"),
                                                       (w2.tensor, b2.tensor, "identity")]), [1.0, -2.0]))
    report = T.grad_check(f, [w1, b1, w2, b2], h=1e-5, tol=1e-5)
    assert len(report) == 4 * 8 + 8 + 8 * 2 + 2
    assert not [e for e in report if e.failed]


def test_dropout_only_in_training():
    x = Tensor(np.ones(1000))
    rng = np.random.default_rng(0)
    assert T.dropout(x, 0.2, rng, training=False) is x
    out = T.dropout(x, 0.2, rng, training=True).data
    assert set(np.unique(out)) <= {0.0, 1.25}
    assert 0.7 < (out > 0).mean() < 0.9


# grad_check

def test_grad_check_flags_wrong_gradient():
    p = param("w", [1.0, 2.0])

    def f():
        # forward is sum(w^2) but backward claims 3w
        return T._result(np.array((p.data ** 2).sum()), (p.tensor,), lambda g: (3.0 * g * p.data,))

    report = T.grad_check(f, [p])
    assert all(e.failed for e in report)
    assert report[0].name == "w"


def test_grad_check_rejects_nondeterministic_objective():
    p = param("w", [1.0])
    rng = np.random.default_rng(0)
    f = lambda: T.sum(T.dropout(T.mul(p.tensor, np.ones(50)), 0.5, rng, training=True))
    with pytest.raises(OracleInvalidError):
        T.grad_check(f, [p])


def test_grad_check_rechecks_kinked_entries():
    # ReLU gate at 2e-5 from the kink: a step of 1e-4 crosses it, 1e-5 does not
    p = param("w", [2e-5])
    f = lambda: T.sum(T.relu(p.tensor))
    report = T.grad_check(f, [p], h=1e-4, tol=1e-6)
    (entry,) = report
    assert entry.kink
    assert entry.recheck_h is not None and entry.recheck_h < 2e-5
    assert not entry.failed


def test_public_ops_keep_values_finite():
    big = Tensor(np.array([800.0, -800.0]), requires_grad=True)
    for op in (T.sigmoid, T.softplus, lambda t: T.clamped_sigmoid(t, 1e-7)):
        out = op(big)
        assert np.all(np.isfinite(out.data))
        T.sum(out).backward()
        assert np.all(np.isfinite(big.grad))
        big.zero_grad()


def test_parameter_grad_slot_after_backward():
    p = param("w", np.ones((2, 3)))
    T.sum(T.mul(p.tensor, 2.0)).backward()
    assert p.grad is not None and p.grad.shape == p.data.shape
