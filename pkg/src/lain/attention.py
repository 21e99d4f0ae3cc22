"""Target attention, with optional length conditioning and temperature.

Shapes: a batch of target queries ``q`` is ``(B, d)``, keys/values ``kv``
are ``(B, m, d)`` with a boolean ``mask`` of shape ``(B, m)``. Values are
the sequence rows themselves; only queries and keys are conditioned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from . import tensor as T
from .tensor import DegenerateMaskError, DimensionError, Parameter, Tensor

DEGENERATE_MASS = 1e-12


def _softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


class TemperatureParams:
    """Learnable ``gamma`` (kept >= 0 through softplus) and ``beta``; fixed ``L0``."""

    def __init__(self, gamma: float = 0.5, beta: float = 0.01, L0: float = 0.0, prefix: str = "lma"):
        if gamma <= 0:
            raise ValueError("initial gamma must be positive")
        self.gamma_raw = T.new_param(f"{prefix}.temp.gamma", np.array(_softplus_inverse(gamma)))
        self.beta = T.new_param(f"{prefix}.temp.beta", np.array(float(beta)))
        self.L0 = float(L0)

    def params(self) -> list[Parameter]:
        return [self.gamma_raw, self.beta]

    @property
    def gamma(self) -> float:
        return float(np.logaddexp(0.0, self.gamma_raw.data))


def temperature_tensor(lengths, tp: TemperatureParams) -> Tensor:
    """``1 + sigmoid(-beta * (L - L0)) * gamma`` as a differentiable tensor."""
    offset = np.asarray(lengths, dtype=np.float64) - tp.L0
    gate = T.sigmoid(T.mul(T.neg(tp.beta.tensor), offset))
    return T.add(1.0, T.mul(gate, T.softplus(tp.gamma_raw.tensor)))


def compute_temperature(L, tp: TemperatureParams):
    t = temperature_tensor(L, tp).data
    return float(t) if t.ndim == 0 else t


def condition_query_key(q: Tensor, k: Tensor, e_len: Tensor, w_q: Tensor, w_k: Tensor) -> tuple[Tensor, Tensor]:
    """Project ``[row; e_len]`` through ``w_q`` / ``w_k`` (each ``2d x d``).

    ``[x; e] @ W`` is evaluated as ``x @ W[:d] + e @ W[d:]`` so the length
    term is computed once per sample rather than once per row.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or e_len.shape[-1] != d:
        raise DimensionError(f"query {q.shape}, key {k.shape} and e_len {e_len.shape} must share the last dim")
    if w_q.shape != (2 * d, d) or w_k.shape != (2 * d, d):
        raise DimensionError(f"conditioning weights must be {(2 * d, d)}, got {w_q.shape} and {w_k.shape}")
    q_len = T.matmul(e_len, w_q[d:])
    k_len = T.matmul(e_len, w_k[d:])
    if k.data.ndim == 3:
        k_len = T.reshape(k_len, (k_len.shape[0], 1, d))
    q2 = T.add(T.matmul(q, w_q[:d]), q_len)
    k2 = T.add(T.matmul(k, w_k[:d]), k_len)
    return q2, k2


def attention_logits(q: Tensor, k: Tensor) -> Tensor:
    """``q_b . k_bj / sqrt(d)`` for ``q (B, d)`` and ``k (B, m, d)``."""
    d = q.shape[-1]
    s = T.matmul(k, T.reshape(q, q.shape + (1,)))
    return T.reshape(s, s.shape[:-1]) * (1.0 / np.sqrt(d))


def pool(alpha: Tensor, values: Tensor) -> Tensor:
    out = T.matmul(T.reshape(alpha, alpha.shape[:-1] + (1, alpha.shape[-1])), values)
    return T.reshape(out, out.shape[:-2] + (out.shape[-1],))


@dataclass
class AttentionTrace:
    weights: np.ndarray
    user_length: int
    bucket: str
    branch: str = ""
    user_id: object = None
    tau: float = 1.0
    logits: np.ndarray | None = None
    degenerate: bool = False

    def to_record(self) -> dict:
        rec = {
            "user_id": self.user_id,
            "branch": self.branch,
            "L": int(self.user_length),
            "bucket": self.bucket,
            "weights": [float(w) for w in self.weights],
            "tau": float(self.tau),
        }
        if self.logits is not None:
            rec["logits"] = [float(z) for z in self.logits]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "AttentionTrace":
        logits = rec.get("logits")
        return cls(
            weights=np.asarray(rec["weights"], dtype=np.float64),
            user_length=int(rec["L"]),
            bucket=rec["bucket"],
            branch=rec.get("branch", ""),
            user_id=rec.get("user_id"),
            tau=float(rec.get("tau", 1.0)),
            logits=None if logits is None else np.asarray(logits, dtype=np.float64),
        )


def behaviour_weights(alpha: np.ndarray, n_prompts: int, valid: np.ndarray | None = None
                      ) -> tuple[np.ndarray, bool]:
    """Drop prompt (and masked) positions and renormalise the remaining mass."""
    w = np.asarray(alpha[n_prompts:], dtype=np.float64)
    if valid is not None:
        w = w[np.asarray(valid, dtype=bool)]
    mass = w.sum()
    if mass < DEGENERATE_MASS:
        return w, True
    return w / mass, False


def write_traces(traces: Iterable[AttentionTrace], fh: IO[str]) -> None:
    for tr in traces:
        if tr.degenerate:
            continue
        fh.write(json.dumps(tr.to_record(), sort_keys=True) + "\n")


def read_traces(fh: IO[str]) -> list[AttentionTrace]:
    return [AttentionTrace.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class AttentionResult:
    output: Tensor            # (B, d)
    alpha: np.ndarray         # (B, m) attention weights incl. prompt positions
    logits: np.ndarray        # (B, m) pre-temperature logits
    tau: np.ndarray           # (B,)
    mask: np.ndarray          # (B, m)
    n_prompts: int = 0


def _check_mask(mask: np.ndarray) -> None:
    if not np.all(mask.any(axis=-1)):
        raise DegenerateMaskError("attention needs at least one valid position per query")


def target_attention_base(q: Tensor, kv: Tensor, mask, n_prompts: int = 0) -> AttentionResult:
    """DIN-style target attention: softmax(q . k / sqrt(d)) over valid rows."""
    mask = np.asarray(mask, dtype=bool)
    _check_mask(mask)
    logits = attention_logits(q, kv)
    alpha = T.softmax_temp(logits, 1.0, mask)
    return AttentionResult(pool(alpha, kv), alpha.data, logits.data, np.ones(q.shape[0]), mask, n_prompts)


class LengthModulatedAttention:
    """Query/key conditioning on a length embedding plus length-aware temperature."""

    def __init__(self, d: int, rng: np.random.Generator | None = None, gamma: float = 0.5,
                 beta: float = 0.01, L0: float = 0.0, prefix: str = "lma", qk_cond: bool = True,
                 temp_scale: bool = True):
        rng = rng or np.random.default_rng(0)
        self.d = d
        self.emb_w = self.emb_b = self.w_q = self.w_k = self.temp = None
        if qk_cond:
            self.emb_w = T.new_param(f"{prefix}.emb.weight", T.glorot_uniform(rng, d, d))
            self.emb_b = T.new_param(f"{prefix}.emb.bias", np.zeros(d))
            self.w_q = T.new_param(f"{prefix}.w_q", self._init_projection(d))
            self.w_k = T.new_param(f"{prefix}.w_k", self._init_projection(d))
        if temp_scale:
            self.temp = TemperatureParams(gamma, beta, L0, prefix)

    @staticmethod
    def _init_projection(d: int) -> np.ndarray:
        # identity on the row half, zeros on the length half: conditioning starts
        # as exact base attention and the length terms are learned from there
        w = np.zeros((2 * d, d))
        w[:d] = np.eye(d)
        return w

    def params(self) -> list[Parameter]:
        ps = [p for p in (self.emb_w, self.emb_b, self.w_q, self.w_k) if p is not None]
        return ps + (self.temp.params() if self.temp is not None else [])

    def length_embedding(self, h_len: Tensor) -> Tensor:
        return T.linear(h_len, self.emb_w.tensor, self.emb_b.tensor)

    def __call__(self, q: Tensor, kv: Tensor, mask, lengths, h_len: Tensor | None,
                 qk_cond: bool = True, temp_scale: bool = True, n_prompts: int = 0,
                 e_len: Tensor | None = None) -> AttentionResult:
        return length_modulated_attention(q, kv, mask, lengths, self, h_len, qk_cond, temp_scale,
                                          n_prompts, e_len)


def length_modulated_attention(q: Tensor, kv: Tensor, mask, lengths, lma: LengthModulatedAttention,
                               h_len: Tensor | None = None, qk_cond: bool = True, temp_scale: bool = True,
                               n_prompts: int = 0, e_len: Tensor | None = None) -> AttentionResult:
    mask = np.asarray(mask, dtype=bool)
    _check_mask(mask)
    lengths = np.asarray(lengths, dtype=np.float64).reshape(-1)
    if qk_cond and lma.w_q is None:
        raise ValueError("query/key conditioning requested but the module was built without it")
    if temp_scale and lma.temp is None:
        raise ValueError("temperature scaling requested but the module was built without it")
    if qk_cond:
        if e_len is None:
            e_len = lma.length_embedding(h_len)
        qc, kc = condition_query_key(q, kv, e_len, lma.w_q.tensor, lma.w_k.tensor)
    else:
        qc, kc = q, kv
    logits = attention_logits(qc, kc)
    if temp_scale:
        tau = T.reshape(temperature_tensor(lengths, lma.temp), (lengths.shape[0], 1))
        alpha = T.softmax_temp(logits, tau, mask)
        tau_vals = tau.data.reshape(-1)
    else:
        alpha = T.softmax_temp(logits, 1.0, mask)
        tau_vals = np.ones(lengths.shape[0])
    return AttentionResult(pool(alpha, kv), alpha.data, logits.data, tau_vals, mask, n_prompts)


def trace_from_result(res: AttentionResult, row: int, user_length: int, bucket: str,
                      branch: str = "", user_id=None) -> AttentionTrace:
    """Build the behaviour-only trace for one row of a batched attention call."""
    valid = res.mask[row, res.n_prompts:]
    w, degenerate = behaviour_weights(res.alpha[row], res.n_prompts, valid)
    logits = res.logits[row, res.n_prompts:][valid]
    return AttentionTrace(w, int(user_length), bucket, branch, user_id, float(res.tau[row]),
                          logits.copy(), degenerate or w.size == 0)
