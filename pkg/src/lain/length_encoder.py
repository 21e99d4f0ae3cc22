"""Spectral length encoder: raw history length -> dense length embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def default_frequencies(d_f: int) -> np.ndarray:
    """Log-spaced frequencies 1 / 10000**(i/d_f), i = 0..d_f-1."""
    return 1.0 / 10000.0 ** (np.arange(d_f) / d_f)


def fourier_features(lengths, omega: Tensor) -> Tensor:
    """``[sin(L*omega); cos(L*omega)]`` for a scalar or a batch of lengths.

    Returns shape ``(2*d_f,)`` for a scalar length and ``(B, 2*d_f)`` for a
    vector of lengths. Lengths are used as raw counts.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    if np.any(lengths < 0):
        raise ValueError("sequence length must be nonnegative")
    phase = T.mul(omega, lengths[..., None]) if lengths.ndim else T.mul(omega, float(lengths))
    return T.concat([T.sin(phase), T.cos(phase)], axis=-1)


@dataclass
class LengthEmbedding:
    h_len: Tensor
    source_length: np.ndarray | int


class SpectralLengthEncoder:
    """Linear -> LayerNorm -> 2-layer MLP over learnable Fourier features."""

    def __init__(self, d: int, d_f: int = 32, hidden: int = 512, rng: np.random.Generator | None = None,
                 prefix: str = "sle"):
        rng = rng or np.random.default_rng(0)
        self.d, self.d_f, self.hidden = d, d_f, hidden
        p = prefix
        self.omega = T.new_param(f"{p}.omega", default_frequencies(d_f))
        self.proj_w = T.new_param(f"{p}.proj.weight", T.glorot_uniform(rng, 2 * d_f, hidden))
        self.proj_b = T.new_param(f"{p}.proj.bias", np.zeros(hidden))
        self.ln_gain = T.new_param(f"{p}.ln.gain", np.ones(hidden))
        self.ln_bias = T.new_param(f"{p}.ln.bias", np.zeros(hidden))
        self.fc1_w = T.new_param(f"{p}.mlp.0.weight", T.glorot_uniform(rng, hidden, hidden))
        self.fc1_b = T.new_param(f"{p}.mlp.0.bias", np.zeros(hidden))
        self.fc2_w = T.new_param(f"{p}.mlp.1.weight", T.glorot_uniform(rng, hidden, d))
        self.fc2_b = T.new_param(f"{p}.mlp.1.bias", np.zeros(d))

    def params(self) -> list[Parameter]:
        return [self.omega, self.proj_w, self.proj_b, self.ln_gain, self.ln_bias,
                self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def __call__(self, lengths) -> LengthEmbedding:
        return encode_length(lengths, self)


def encode_length(lengths, enc: SpectralLengthEncoder) -> LengthEmbedding:
    feats = fourier_features(lengths, enc.omega.tensor)
    z = T.linear(feats, enc.proj_w.tensor, enc.proj_b.tensor)
    z = T.layer_norm(z, enc.ln_gain.tensor, enc.ln_bias.tensor)
    h = T.mlp_forward(z, [
        (enc.fc1_w.tensor, enc.fc1_b.tensor, "relu"),
        (enc.fc2_w.tensor, enc.fc2_b.tensor, "identity"),
    ])
    return LengthEmbedding(h, lengths)
