"""Length-conditioned prompt tokens prepended to behaviour sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .length_encoder import LengthEmbedding
from .tensor import DimensionError, Parameter, Tensor


@dataclass
class PromptBlock:
    tokens: Tensor  # (k, d) or (B, k, d)
    k: int
    conditioned_on: np.ndarray | int


class PromptGenerator:
    """MLP d -> hidden -> k*d (ReLU hidden), reshaped row-major to k x d."""

    def __init__(self, d: int, k: int = 4, hidden: int = 512, rng: np.random.Generator | None = None,
                 prefix: str = "lcp"):
        rng = rng or np.random.default_rng(0)
        self.d, self.k, self.hidden = d, k, hidden
        self.fc1_w = T.new_param(f"{prefix}.mlp.0.weight", T.glorot_uniform(rng, d, hidden))
        self.fc1_b = T.new_param(f"{prefix}.mlp.0.bias", np.zeros(hidden))
        self.fc2_w = T.new_param(f"{prefix}.mlp.1.weight", T.glorot_uniform(rng, hidden, k * d))
        self.fc2_b = T.new_param(f"{prefix}.mlp.1.bias", np.zeros(k * d))

    def params(self) -> list[Parameter]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def __call__(self, h: LengthEmbedding) -> PromptBlock:
        return generate_prompts(h, self)


def generate_prompts(h: LengthEmbedding, gen: PromptGenerator) -> PromptBlock:
    if h.h_len.shape[-1] != gen.d:
        raise DimensionError(f"length embedding has dim {h.h_len.shape[-1]}, generator expects {gen.d}")
    flat = T.mlp_forward(h.h_len, [
        (gen.fc1_w.tensor, gen.fc1_b.tensor, "relu"),
        (gen.fc2_w.tensor, gen.fc2_b.tensor, "identity"),
    ])
    shape = flat.shape[:-1] + (gen.k, gen.d)
    return PromptBlock(T.reshape(flat, shape), gen.k, h.source_length)


def prepend_prompts(p: PromptBlock, seq: Tensor, seq_mask) -> tuple[Tensor, np.ndarray]:
    """Return ``[P; S]`` and its validity mask; prompt rows are always valid.

    Works for a single sequence ``(L_s, d)`` with tokens ``(k, d)`` or a batch
    ``(B, L_s, d)`` with tokens ``(B, k, d)``.
    """
    seq = T.as_tensor(seq)
    seq_mask = np.asarray(seq_mask, dtype=bool)
    if seq.shape[-1] != p.tokens.shape[-1]:
        raise DimensionError(f"sequence rows have dim {seq.shape[-1]}, prompt tokens {p.tokens.shape[-1]}")
    out = T.concat([p.tokens, seq], axis=-2)
    prompt_mask = np.ones(seq_mask.shape[:-1] + (p.k,), dtype=bool)
    return out, np.concatenate([prompt_mask, seq_mask], axis=-1)
