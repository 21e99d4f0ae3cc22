"""Dense float64 tensors with reverse-mode differentiation.

Every operation records its parents and a backward closure on the output
tensor; ``Tensor.backward`` replays the recorded graph in reverse
topological order, accumulating gradients additively. A fresh graph is
built for each forward pass, so nothing needs clearing between batches
beyond ``zero_grad`` on the parameters.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

NEG_INF_LOGIT = -1e30


class DimensionError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


class OracleInvalidError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


@dataclass
class Parameter:
    """A named, optionally trainable tensor owned by a model."""

    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a: Tensor) -> Tensor:
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


# piecewise switches (ReLU gates, clamps, discrete selections) seen during a
# forward pass, so the gradient checker can tell when a finite difference
# straddles a non-differentiable point
_switch_log: list | None = None


def record_switch(state: np.ndarray) -> None:
    if _switch_log is not None:
        _switch_log.append(np.array(state, copy=True))


@contextmanager
def switch_log():
    global _switch_log
    prev, _switch_log = _switch_log, []
    try:
        yield _switch_log
    finally:
        _switch_log = prev


def relu(a: Tensor) -> Tensor:
    live = a.data > 0
    record_switch(live)
    return _result(np.where(live, a.data, 0.0), (a,), lambda g: (g * live,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def clamped_sigmoid(a: Tensor, eps: float = 1e-7) -> Tensor:
    """Sigmoid clipped to [eps, 1 - eps]; gradient is zero where clipped."""
    s = _stable_sigmoid(a.data)
    out = np.clip(s, eps, 1.0 - eps)
    inside = (s > eps) & (s < 1.0 - eps)
    record_switch(inside)
    return _result(out, (a,), lambda g: (g * s * (1.0 - s) * inside,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    return _result(out, (a,), lambda g: (g * _stable_sigmoid(x),))


# shape / reductions ---------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _result(out, tensors, backward)


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), backward)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table by integer ids (any index shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    d = table.shape[1]

    def backward(g):
        flat = ids.reshape(-1)
        scatter = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))),
                                    shape=(table.shape[0], flat.size))
        return (np.asarray(scatter @ g.reshape(-1, d)),)

    return _result(table.data[ids], (table,), backward)


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise DimensionError("matmul needs at least 1-D operands")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.data.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    flat_lhs = b.data.ndim == 2 and a.data.ndim > 2
    if flat_lhs:
        out = (a.data.reshape(-1, ka) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        g2 = g
        if bd.ndim == 1:
            ga = g2[..., None] * bd
            gb = np.einsum("...k,...->k", ad, g2) if ad.ndim > 1 else g2 * ad
            return _unbroadcast(ga, a.shape), gb
        if ad.ndim == 1:
            ga = g2 @ np.swapaxes(bd, -1, -2)
            gb = ad[:, None] * g2[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        if not a.requires_grad:
            ga = None
        elif flat_lhs:
            ga = (g2.reshape(-1, g2.shape[-1]) @ bd.T).reshape(ad.shape)
        else:
            ga = g2 @ np.swapaxes(bd, -1, -2)
        if not b.requires_grad:
            gb = None
        elif flat_lhs:
            # shared right operand: one large product instead of a batch of small ones
            gb = ad.reshape(-1, ka).T @ g2.reshape(-1, g2.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g2, b.shape)
        return (None if ga is None else _unbroadcast(ga, a.shape)), gb

    return _result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# normalisation / attention primitives --------------------------------------

def softmax_temp(logits, tau=1.0, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax of ``logits / tau`` along ``axis`` with optional validity mask.

    ``tau`` may be a float or a Tensor broadcastable against ``logits``.
    Masked positions get exactly zero weight and zero gradient.
    """
    logits = as_tensor(logits)
    tau_t = as_tensor(tau)
    if np.any(tau_t.data <= 0):
        raise ValueError("softmax temperature must be positive")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=axis)):
            raise DegenerateMaskError("every position is masked")
    scaled = logits.data / tau_t.data
    if mask is not None:
        scaled = np.where(mask, scaled, NEG_INF_LOGIT)
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        # d/dscaled of softmax, then chain through logits / tau
        gs = p * (g - (g * p).sum(axis=axis, keepdims=True))
        g_logits = gs / tau_t.data
        g_tau = -gs * logits.data / (tau_t.data ** 2)
        if mask is not None:
            g_logits = np.where(mask, g_logits, 0.0)
            g_tau = np.where(mask, g_tau, 0.0)
        return _unbroadcast(g_logits, logits.shape), _unbroadcast(g_tau, tau_t.shape)

    return _result(p, (logits, tau_t), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise gain and bias."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        g_gain = _unbroadcast(g * xhat, gain.shape)
        g_bias = _unbroadcast(g, bias.shape)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, g_gain, g_bias

    return _result(out, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity unless ``training`` and ``p > 0``."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "identity": lambda t: t,
    "relu": relu,
    "sigmoid": sigmoid,
}


def mlp_forward(
    x: Tensor,
    layers: Sequence[tuple[Tensor, Tensor | None, str]],
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Chain of affine maps and activations.

    Dropout follows every hidden activation (not the output layer) and is
    only applied in training mode.
    """
    h = as_tensor(x)
    for i, (w, b, act) in enumerate(layers):
        if h.shape[-1] != w.shape[0]:
            raise DimensionError(f"layer {i}: input {h.shape} does not chain into weight {w.shape}")
        h = ACTIVATIONS[act](linear(h, w, b))
        if i < len(layers) - 1:
            h = dropout(h, dropout_p, rng, training)
    return h


# gradient oracle ------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    failed: bool
    kink: bool = False                  # the step at h crossed a ReLU/clamp/selection switch
    recheck_h: float | None = None      # smaller step used to re-verify a kinked entry
    recheck_error: float | None = None


def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _same_switches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def _central_difference(f, p: Parameter, idx, h: float, base_switches: list) -> tuple[float, bool]:
    orig = p.data[idx]
    try:
        p.data[idx] = orig + h
        with switch_log() as up:
            fp = float(f().data)
        p.data[idx] = orig - h
        with switch_log() as down:
            fm = float(f().data)
    finally:
        p.data[idx] = orig
    kink = not (_same_switches(up, base_switches) and _same_switches(down, base_switches))
    return (fp - fm) / (2.0 * h), kink


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-4,
    tol: float = 1e-4,
    max_per_param: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    max_refinements: int = 3,
) -> list[GradCheckEntry]:
    """Compare analytic gradients against central differences.

    ``f`` must rebuild the graph on every call. When ``max_per_param`` is
    set, that many entries per parameter are sampled (half from entries with
    a nonzero analytic gradient); otherwise every trainable scalar is checked.
    Errors are relative to ``max(|analytic|, |numeric|, floor)``; the floor
    sits above the roughly 1e-12 rounding noise of a difference at h=1e-4,
    which would otherwise dominate entries whose true gradient is zero.

    A difference whose +/-h evaluations flip a ReLU gate, a clamp or a
    discrete selection is not a valid oracle. Such an entry is flagged
    ``kink`` and, if it misses ``tol``, re-verified with steps h/10, h/100, ...
    until the switches stop changing; it fails if that recheck misses too.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        p.tensor.zero_grad()
    with switch_log() as base_switches:
        base = f()
    if float(base.data) != float(f().data):
        raise OracleInvalidError("objective is not deterministic; disable dropout and sampling")
    base.backward()
    rng = np.random.default_rng(seed)
    report: list[GradCheckEntry] = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat_idx = _pick_entries(analytic, max_per_param, rng)
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape) if p.shape else ()
            a = float(analytic[idx])
            numeric, kink = _central_difference(f, p, idx, h, base_switches)
            err = relative_error(a, numeric, floor)
            entry = GradCheckEntry(p.name, tuple(int(i) for i in idx), a, numeric, err, err > tol, kink)
            if kink and entry.failed:
                step = h
                for _ in range(max_refinements):
                    step /= 10.0
                    fine, still = _central_difference(f, p, idx, step, base_switches)
                    if not still:
                        break
                entry.recheck_h, entry.recheck_error = step, relative_error(a, fine, floor)
                entry.failed = still or entry.recheck_error > tol
            report.append(entry)
    return report


def _pick_entries(analytic: np.ndarray, budget: int | None, rng: np.random.Generator) -> np.ndarray:
    n = analytic.size
    if budget is None or budget >= n:
        return np.arange(n)
    flat = analytic.reshape(-1)
    nonzero = np.flatnonzero(flat != 0.0)
    zero = np.flatnonzero(flat == 0.0)
    n_nz = min(len(nonzero), max(budget - budget // 2, budget - len(zero)))
    picked = list(rng.choice(nonzero, size=n_nz, replace=False)) if n_nz else []
    n_z = min(len(zero), budget - n_nz)
    if n_z:
        picked += list(rng.choice(zero, size=n_z, replace=False))
    return np.sort(np.asarray(picked, dtype=np.int64))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def new_param(name: str, data, trainable: bool = True) -> Parameter:
    return Parameter(name, Tensor(np.array(data, dtype=np.float64), requires_grad=trainable), trainable)
