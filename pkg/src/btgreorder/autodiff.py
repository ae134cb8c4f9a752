"""A small reverse-mode tape over a fixed set of array primitives.

The operator inventory is whatever the reordering pipeline needs: dense
arithmetic, row gathers, a fused GRU layer and fused chart primitives
(inside + normalisation, span-matrix accumulation, per-span softmax,
straight-through).  Every op appends one record to the tape; the tape order
is a topological order, so :func:`backward` just walks it in reverse.

    tape = Tape()
    w = tape.param("w", np.ones(3))
    loss = sum_all(tanh(w * 2.0))
    grads = backward(tape, 1.0, loss)
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import btg, inference

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Var:
    __slots__ = ("value", "grad", "tape", "requires_grad", "name")

    def __init__(self, value, tape: "Tape | None", requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=float)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)


class Tape:
    """Records ``(output, inputs, adjoint rule)`` triples in execution order."""

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.records: list[tuple[Var, tuple[Var, ...], Backward]] = []
        self.params: dict[str, Var] = {}

    def __len__(self):
        return len(self.records)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        v = Var(value, self, requires_grad=self.grad, name=name)
        self.params[name] = v
        return v

    def const(self, value) -> Var:
        return Var(value, self, requires_grad=False)


def _as_var(x, tape: Tape | None) -> Var:
    if isinstance(x, Var):
        return x
    return Var(x, tape, requires_grad=False)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _emit(value, inputs: Sequence[Var], rule: Backward) -> Var:
    tape = _tape_of(*inputs)
    req = any(v.requires_grad for v in inputs)
    out = Var(value, tape, requires_grad=req)
    if req and tape is not None:
        tape.records.append((out, tuple(inputs), rule))
    return out


def backward(tape: Tape, seed_adjoint=1.0, output: Var | None = None) -> dict[str, np.ndarray]:
    """Replay adjoints in reverse order; returns gradients keyed by parameter name."""
    if not tape.records:
        raise ValueError("backward called on an empty tape")
    out = tape.records[-1][0] if output is None else output
    out.grad = np.broadcast_to(np.asarray(seed_adjoint, dtype=float), out.value.shape).copy()
    for node, inputs, rule in reversed(tape.records):
        if node.grad is None:
            continue
        grads = rule(node.grad)
        for v, g in zip(inputs, grads):
            if g is None or not v.requires_grad:
                continue
            v.grad = g if v.grad is None else v.grad + g
    return {
        name: (v.grad if v.grad is not None else np.zeros_like(v.value)) for name, v in tape.params.items()
    }


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _as_var(a, t), _as_var(b, t)
    return _emit(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _as_var(a, t), _as_var(b, t)
    return _emit(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _as_var(a, t), _as_var(b, t)
    return _emit(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def matmul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _as_var(a, t), _as_var(b, t)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul supports 2-d operands only")
    return _emit(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(x: Var) -> Var:
    return _emit(x.value.T, (x,), lambda g: (g.T,))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Var) -> Var:
    y = _sigmoid(x.value)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Var) -> Var:
    y = np.exp(x.value)
    return _emit(y, (x,), lambda g: (g * y,))


def sum_all(x: Var) -> Var:
    return _emit(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Var) -> Var:
    size = x.value.size
    return _emit(np.mean(x.value), (x,), lambda g: (np.broadcast_to(g / size, x.shape).copy(),))


def index(x: Var, key) -> Var:
    """``x[key]`` for any numpy key; the adjoint scatters with ``np.add.at``."""

    def rule(g):
        out = np.zeros_like(x.value)
        np.add.at(out, key, g)
        return (out,)

    return _emit(x.value[key], (x,), rule)


def take_rows(table: Var, ids) -> Var:
    ids = np.asarray(ids, dtype=np.intp)

    order = np.argsort(ids, kind="stable")
    rows, starts = np.unique(ids[order], return_index=True)

    def rule(g):
        # sorted segment sums; much faster than np.add.at for long id lists
        out = np.zeros_like(table.value)
        if ids.size:
            out[rows] = np.add.reduceat(g[order], starts, axis=0)
        return (out,)

    return _emit(table.value[ids], (table,), rule)


def concat(xs: Sequence, axis: int = 0) -> Var:
    t = _tape_of(*xs)
    vs = [_as_var(x, t) for x in xs]
    sizes = [v.shape[axis] for v in vs]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([v.value for v in vs], axis=axis), vs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def cross_entropy(logits: Var, targets) -> Var:
    """Mean token negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets, dtype=np.intp)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(targets))
    loss = -logp[rows, targets].mean()

    def rule(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (g * p / len(targets),)

    return _emit(loss, (logits,), rule)


def straight_through(hard: np.ndarray, relaxed: Var) -> Var:
    """Forward value ``hard``; the adjoint flows unchanged into ``relaxed``."""
    return _emit(np.asarray(hard, dtype=float), (relaxed,), lambda g: (g,))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# fused GRU layer
# ---------------------------------------------------------------------------


def gru(x: Var, Wx: Var, Wh: Var, bx: Var, bh: Var, reverse: bool = False) -> Var:
    """Single-direction GRU over the rows of ``x`` (gate order: reset, update, candidate)."""
    n = x.shape[0]
    h_dim = Wh.shape[0]
    order = range(n - 1, -1, -1) if reverse else range(n)
    GX = x.value @ Wx.value + bx.value
    H = np.zeros((n, h_dim))
    cache = []
    h_prev = np.zeros(h_dim)
    for t in order:
        gh = h_prev @ Wh.value + bh.value
        gx = GX[t]
        r = _sigmoid(gx[:h_dim] + gh[:h_dim])
        z = _sigmoid(gx[h_dim : 2 * h_dim] + gh[h_dim : 2 * h_dim])
        c = np.tanh(gx[2 * h_dim :] + r * gh[2 * h_dim :])
        h = (1.0 - z) * c + z * h_prev
        cache.append((t, h_prev, gh, r, z, c))
        H[t] = h
        h_prev = h

    def rule(g):
        dGX = np.zeros_like(GX)
        dWh = np.zeros_like(Wh.value)
        dbh = np.zeros_like(bh.value)
        carry = np.zeros(h_dim)
        for t, hp, gh, r, z, c in reversed(cache):
            dh = g[t] + carry
            dz = dh * (hp - c)
            dc = dh * (1.0 - z)
            dac = dc * (1.0 - c * c)
            dar = dac * gh[2 * h_dim :] * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dgh = np.concatenate([dar, daz, dac * r])
            dGX[t] = np.concatenate([dar, daz, dac])
            dWh += np.outer(hp, dgh)
            dbh += dgh
            carry = dh * z + Wh.value @ dgh
        return (dGX @ Wx.value.T, x.value.T @ dGX, dWh, dGX.sum(axis=0), dbh)

    return _emit(H, (x, Wx, Wh, bx, bh), rule)


# ---------------------------------------------------------------------------
# chart primitives
# ---------------------------------------------------------------------------


def scatter_rules(flat: Var, n: int) -> Var:
    """Place per-rule ``(T, 2)`` scores into the dense chart layout."""
    w, i, l = btg.rule_index(n)
    dense = np.zeros(btg.chart_shape(n))
    dense[w, i, l, :] = flat.value
    return _emit(dense, (flat,), lambda g: (g[w, i, l, :],))


def rule_logprobs(logf: Var, n: int) -> Var:
    """Inside pass followed by local normalisation: ``log f -> log G``."""
    LB = btg.inside_kernel(logf.value, n)
    logG = btg.rule_logprobs_kernel(logf.value, LB, n)

    def rule(g):
        adj_f, adj_LB = btg.rule_logprobs_backward_kernel(g, n)
        return (adj_f + btg.inside_backward_kernel(logG, adj_LB, n),)

    return _emit(logG, (logf,), rule)


def log_partition(logf: Var, n: int) -> Var:
    LB = btg.inside_kernel(logf.value, n)
    logG = btg.rule_logprobs_kernel(logf.value, LB, n)

    def rule(g):
        adj_LB = np.zeros((n + 1, n + 1))
        adj_LB[n, 0] = g
        return (btg.inside_backward_kernel(logG, adj_LB, n),)

    return _emit(LB[n, 0], (logf,), rule)


def accumulate(sel: Var, n: int) -> Var:
    """Root span matrix of the accumulation over a rule-weight chart.

    Uses the top-down offset form, which yields the same matrix as the
    bottom-up chart at O(n^4) instead of O(n^5).
    """
    O = inference.offset_paths(sel.value, n)
    return _emit(O[1].T.copy(), (sel,), lambda g: (inference.offset_paths_backward(sel.value, O, g, n),))


def span_softmax(scores: Var, n: int, temperature: float) -> Var:
    soft = inference.span_softmax(scores.value, n, temperature)
    return _emit(soft, (scores,), lambda g: (inference.span_softmax_backward(soft, g, n, temperature),))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


# central stencils: offsets (in units of h) and weights, divided by h
_STENCILS = {
    2: ((1.0, -1.0), (0.5, -0.5)),
    4: ((-2.0, -1.0, 1.0, 2.0), (1 / 12, -8 / 12, 8 / 12, -1 / 12)),
}


def central_differences(
    fn: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-5, coords=None, points: int = 2
) -> np.ndarray:
    """Central-difference gradient; ``points=4`` is the fourth-order stencil."""
    if points not in _STENCILS:
        raise ValueError(f"points must be one of {sorted(_STENCILS)}")
    offsets, weights = _STENCILS[points]
    point = np.asarray(point, dtype=float)
    coords = range(point.size) if coords is None else coords
    out = np.zeros(len(coords))
    x = point.copy()
    for n, c in enumerate(coords):
        orig = x[c]
        total = 0.0
        for off, wt in zip(offsets, weights):
            x[c] = orig + off * h
            f = fn(x)
            if not np.isfinite(f):
                x[c] = orig
                raise FloatingPointError(f"non-finite function value at coordinate {c}")
            total += wt * f
        x[c] = orig
        out[n] = total / h
    return out


def finite_diff_check(
    fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    grad: np.ndarray,
    h: float = 1e-5,
    coords=None,
    floor: float = 1e-8,
    points: int = 2,
) -> float:
    """Max relative error between ``grad`` and central differences of ``fn`` at ``point``."""
    grad = np.asarray(grad, dtype=float).ravel()
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise FloatingPointError(f"non-finite analytic gradient at coordinate {bad}")
    coords = list(range(grad.size)) if coords is None else list(coords)
    numeric = central_differences(fn, np.asarray(point, dtype=float).ravel(), h, coords, points)
    if not coords:
        return 0.0
    return float(relative_error(grad[coords], numeric, floor).max())
