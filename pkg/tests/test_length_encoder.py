import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lain import tensor as T
from lain.length_encoder import SpectralLengthEncoder, default_frequencies, encode_length, fourier_features
from lain.tensor import Tensor


def test_zero_length_features():
    out = fourier_features(0, Tensor(np.array([0.3, 7.0, -2.0]))).data
    np.testing.assert_array_equal(out, [0, 0, 0, 1, 1, 1])


def test_exact_angles():
    out = fourier_features(1, Tensor(np.array([math.pi, math.pi / 2]))).data
    np.testing.assert_allclose(out, [0, 1, -1, 0], atol=1e-12)


def test_features_match_direct_evaluation():
    out = fourier_features(3, Tensor(np.array([0.5, 1.0]))).data
    expected = [math.sin(1.5), math.sin(3.0), math.cos(1.5), math.cos(3.0)]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_batched_features_match_scalar():
    omega = Tensor(default_frequencies(8))
    batch = fourier_features([0, 5, 400], omega).data
    for row, L in zip(batch, [0, 5, 400]):
        np.testing.assert_array_equal(row, fourier_features(L, omega).data)


def test_negative_length_rejected():
    with pytest.raises(ValueError):
        fourier_features(-1, Tensor(np.ones(2)))


def test_default_frequencies_log_spaced():
    w = default_frequencies(32)
    assert w.shape == (32,)
    assert w[0] == 1.0
    np.testing.assert_allclose(w[1:] / w[:-1], 10000 ** (-1 / 32))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.floats(-100, 100), min_size=1, max_size=8))
def test_features_bounded(L, omega):
    out = fourier_features(L, Tensor(np.array(omega))).data
    assert np.all(np.abs(out) <= 1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 2000), st.floats(1e-4, 5), st.lists(st.floats(-3, 3), min_size=1, max_size=8))
def test_features_lipschitz_in_length(L, delta, omega):
    omega = Tensor(np.array(omega))
    a = fourier_features(np.array(L), omega).data
    b = fourier_features(np.array(L + delta), omega).data
    bound = np.linalg.norm(omega.data) * delta * math.sqrt(2)
    assert np.linalg.norm(b - a) <= bound + 1e-9


def small_encoder(seed=0, d=8, d_f=4, hidden=16):
    return SpectralLengthEncoder(d, d_f, hidden, np.random.default_rng(seed))


def test_zero_weights_collapse_to_bias_path():
    enc = small_encoder()
    for p in (enc.proj_w, enc.proj_b, enc.fc1_w, enc.fc2_w):
        p.tensor.data[...] = 0.0
    enc.ln_bias.tensor.data[...] = 0.0
    enc.fc1_b.tensor.data[:] = np.linspace(-1, 1, enc.hidden)
    enc.fc2_b.tensor.data[:] = np.arange(enc.d, dtype=float)
    outs = [encode_length(L, enc).h_len.data for L in (0, 7, 900)]
    for o in outs:
        np.testing.assert_array_equal(o, enc.fc2_b.data)


def test_encoding_is_deterministic():
    a = encode_length(50, SpectralLengthEncoder(64, rng=np.random.default_rng(3))).h_len.data
    b = encode_length(50, SpectralLengthEncoder(64, rng=np.random.default_rng(3))).h_len.data
    assert a.tobytes() == b.tobytes()


def test_frequency_gradient_matches_finite_differences():
    enc = SpectralLengthEncoder(64, 32, 512, np.random.default_rng(0))
    f = lambda: T.sum(encode_length(37, enc).h_len)
    report = T.grad_check(f, [enc.omega], h=1e-6, tol=1e-4)
    assert len(report) == 32
    assert not [e for e in report if e.failed]


def test_gradient_reaches_every_encoder_parameter():
    enc = small_encoder()
    T.sum(T.mul(encode_length([3, 40], enc).h_len, 1.0)).backward()
    for p in enc.params():
        assert p.grad is not None and np.any(p.grad != 0), p.name


@pytest.mark.parametrize("L", [0, 1, 10, 100, 1000, 10000])
def test_output_dimension(L):
    enc = SpectralLengthEncoder(64, rng=np.random.default_rng(0))
    assert encode_length(L, enc).h_len.shape == (64,)


def test_distinct_lengths_give_distinct_embeddings():
    enc = SpectralLengthEncoder(64, rng=np.random.default_rng(0))
    lengths = np.random.default_rng(1).choice(np.arange(1, 1001), size=32, replace=False)
    h = encode_length(lengths, enc).h_len.data
    for i in range(32):
        for j in range(i + 1, 32):
            assert not np.array_equal(h[i], h[j])
