"""Marginal, MAP and sampling inference over BTG derivations.

Everything here runs on a :class:`~btgreorder.btg.PcfgChart`.  The bottom-up
accumulation :func:`accumulate` is shared by marginal inference (fed with
``G``) and by Gumbel sampling (fed with per-span one-hot or softmax
selections); its adjoint lives next to it so the tape in
:mod:`btgreorder.autodiff` can reuse both.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .btg import PcfgChart, RuleWeightChart, chart_shape, rule_index, valid_mask
from .perm_core import INVERTED, STRAIGHT, Leaf, Node, PermTree, tree_to_json, tree_to_matrix

GUMBEL_EPS = 1e-10
DEFAULT_TEMPERATURE = 1.0
MAX_MARGINAL_LENGTH = 120


class ChartTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ExpectedPerm:
    n: int
    entries: np.ndarray

    def to_json(self) -> dict:
        return {"n": self.n, "rows": self.entries.tolist()}


@dataclass(frozen=True)
class SampledPerm:
    hard: np.ndarray
    relaxed: ExpectedPerm
    tree: PermTree
    temperature: float
    seed: int | None = None

    def to_json(self) -> dict:
        from .perm_core import perm_matrix_to_json

        return {
            "tree": tree_to_json(self.tree),
            "hard": perm_matrix_to_json(self.hard),
            "seed": self.seed,
            "temperature": self.temperature,
        }


# ---------------------------------------------------------------------------
# accumulation kernels, shared by all modes
# ---------------------------------------------------------------------------


def accumulate(sel: np.ndarray, n: int) -> list[np.ndarray]:
    """Bottom-up chart of span matrices.

    ``sel`` holds one non-negative weight per anchored rule in the chart
    layout.  Returns ``E`` with ``E[w]`` of shape ``(n - w + 1, w, w)``;
    ``E[n][0]`` is the root matrix.  Straight rules add the block-diagonal
    composition of the two child matrices, Inverted rules the anti-diagonal
    one (right child's segment first).
    """
    E: list[np.ndarray] = [np.zeros((0, 0, 0)), np.ones((n, 1, 1))]
    for w in range(2, n + 1):
        m = n - w + 1
        Ew = np.zeros((m, w, w))
        for l in range(1, w):
            r = w - l
            A = E[l][:m]
            B = E[r][l : l + m]
            s = sel[w, :m, l, 0][:, None, None]
            v = sel[w, :m, l, 1][:, None, None]
            Ew[:, :l, :l] += s * A
            Ew[:, l:, l:] += s * B
            Ew[:, :r, l:] += v * B
            Ew[:, r:, :l] += v * A
        E.append(Ew)
    return E


def accumulate_backward(sel: np.ndarray, E: list[np.ndarray], adj_root: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of ``accumulate(sel)[n][0]`` with respect to ``sel``."""
    adj_sel = np.zeros(chart_shape(n))
    adjE = [None, np.zeros((n, 1, 1))] + [np.zeros_like(E[w]) for w in range(2, n + 1)]
    if n >= 2:
        adjE[n][0] = adj_root
    for w in range(n, 1, -1):
        m = n - w + 1
        Aw = adjE[w]
        for l in range(1, w):
            r = w - l
            A = E[l][:m]
            B = E[r][l : l + m]
            gA_s = Aw[:, :l, :l]
            gB_s = Aw[:, l:, l:]
            gB_v = Aw[:, :r, l:]
            gA_v = Aw[:, r:, :l]
            adj_sel[w, :m, l, 0] = np.einsum("mab,mab->m", gA_s, A) + np.einsum("mab,mab->m", gB_s, B)
            adj_sel[w, :m, l, 1] = np.einsum("mab,mab->m", gB_v, B) + np.einsum("mab,mab->m", gA_v, A)
            if l >= 2:
                s = sel[w, :m, l, 0][:, None, None]
                v = sel[w, :m, l, 1][:, None, None]
                adjE[l][:m] += s * gA_s + v * gA_v
            if r >= 2:
                s = sel[w, :m, l, 0][:, None, None]
                v = sel[w, :m, l, 1][:, None, None]
                adjE[r][l : l + m] += s * gB_s + v * gB_v
    return adj_sel


def _rule_view(a: np.ndarray, origin, step, count: int, m: int) -> np.ndarray:
    """Writable ``(count, m, m)`` view of ``a`` whose ``[l, i, t]`` element sits at
    ``origin + l * step + (0, i, t)``."""
    st = a.strides
    offset = sum(o * s for o, s in zip(origin, st))
    lstride = sum(d * s for d, s in zip(step, st))
    return np.ndarray((count, m, m), a.dtype, buffer=a, offset=offset, strides=(lstride, st[1], st[2]))


def _child_views(O: np.ndarray, w: int, m: int):
    """Child targets of every binary split of width-``w`` parents, indexed by left width - 1.

    Left child keeps the parent start; under Straight it keeps the output
    offset, under Inverted it moves behind the right child.  Symmetrically
    for the right child.
    """
    k = w - 1
    return (
        _rule_view(O, (1, 0, 0), (1, 0, 0), k, m),  # left, Straight
        _rule_view(O, (1, 0, w - 1), (1, 0, -1), k, m),  # left, Inverted
        _rule_view(O, (w - 1, 1, 1), (-1, 1, 1), k, m),  # right, Straight
        _rule_view(O, (w - 1, 1, 0), (-1, 1, 0), k, m),  # right, Inverted
    )


def offset_paths(sel: np.ndarray, n: int) -> np.ndarray:
    """Top-down form of the accumulation root in O(n^4).

    ``O[w, i, t]`` sums, over root-to-span paths, the product of ``sel``
    along the path for span ``[i, i+w)`` whose output block starts at slot
    ``t``.  Every entry of the bottom-up root matrix is one such path
    product ending at a leaf, so ``O[1].T == accumulate(sel, n)[n][0]``.
    """
    O = np.zeros((n + 1, n, n))
    O[n, 0, 0] = 1.0
    for w in range(n, 1, -1):
        m = n - w + 1
        P = O[w, :m, :m]
        s = sel[w, :m, 1:w, 0].T[:, :, None] * P
        v = sel[w, :m, 1:w, 1].T[:, :, None] * P
        ls, li, rs, ri = _child_views(O, w, m)
        ls += s
        li += v
        rs += s
        ri += v
    return O


def offset_paths_backward(sel: np.ndarray, O: np.ndarray, adj_root: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of ``offset_paths(sel, n)[1].T`` with respect to ``sel``."""
    adj_sel = np.zeros(chart_shape(n))
    adjO = np.zeros_like(O)
    adjO[1] = np.asarray(adj_root, dtype=float).T
    for w in range(2, n + 1):
        m = n - w + 1
        P = O[w, :m, :m]
        ls, li, rs, ri = _child_views(adjO, w, m)
        gs = ls + rs
        gv = li + ri
        adj_sel[w, :m, 1:w, 0] = np.einsum("it,lit->il", P, gs)
        adj_sel[w, :m, 1:w, 1] = np.einsum("it,lit->il", P, gv)
        adjO[w, :m, :m] += np.einsum("il,lit->it", sel[w, :m, 1:w, 0], gs) + np.einsum("il,lit->it", sel[w, :m, 1:w, 1], gv)
    return adj_sel


def _check_length(n: int, cap: int) -> None:
    if n > cap:
        raise ChartTooLong(f"marginal inference is capped at n <= {cap} (got {n}); raise the cap explicitly")


# ---------------------------------------------------------------------------
# marginal
# ---------------------------------------------------------------------------


def marginal(g: PcfgChart, max_length: int = MAX_MARGINAL_LENGTH) -> ExpectedPerm:
    """Expected permutation matrix under the derivation distribution.

    Time is O(n^5) and memory O(n^4) in the sentence length.
    """
    _check_length(g.n, max_length)
    E = accumulate(g.G, g.n)
    return ExpectedPerm(g.n, E[g.n][0].copy())


# ---------------------------------------------------------------------------
# MAP
# ---------------------------------------------------------------------------


def viterbi_kernel(scores: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Max-product pass over any log-score chart.

    Returns ``(best, back)``: ``best[w, i]`` is the best log-score of a
    derivation of ``[i, i+w)`` and ``back[w, i]`` the flattened
    ``(offset - 1) * 2 + o`` choice.  ``np.argmax`` keeps the first maximum,
    which gives the smallest split, then Straight before Inverted.
    """
    best = np.full((n + 1, n + 1), -np.inf)
    best[1, :n] = 0.0
    back = np.zeros((n + 1, n + 1), dtype=np.intp)
    for w in range(2, n + 1):
        m = n - w + 1
        starts = np.arange(m)[:, None]
        offs = np.arange(1, w)[None, :]
        kids = best[offs, starts] + best[w - offs, starts + offs]
        cand = (scores[w, :m, 1:w, :] + kids[..., None]).reshape(m, -1)
        choice = np.argmax(cand, axis=1)
        back[w, :m] = choice
        best[w, :m] = cand[np.arange(m), choice]
    return best, back


def _follow(choice: np.ndarray, n: int) -> PermTree:
    """Build the tree of per-span choices top-down from the root."""

    def build(i: int, w: int) -> PermTree:
        if w == 1:
            return Leaf(i)
        c = int(choice[w, i])
        l, o = c // 2 + 1, c % 2
        left = build(i, l)
        right = build(i + l, w - l)
        return Node(STRAIGHT if o == 0 else INVERTED, left, right)

    return build(0, n)


def map_from_scores(scores: np.ndarray, n: int) -> tuple[PermTree, float]:
    best, back = viterbi_kernel(scores, n)
    return _follow(back, n), float(best[n, 0])


def map_derivation(g: PcfgChart) -> tuple[PermTree, float]:
    tree, logp = map_from_scores(g.logG, g.n)
    return tree, float(np.exp(logp))


def map_derivation_weights(w: RuleWeightChart) -> tuple[PermTree, float]:
    """MAP from raw rule weights; same argmax as from the PCFG (Z is shared)."""
    return map_from_scores(w.logf, w.n)


# ---------------------------------------------------------------------------
# exact ancestral sampling
# ---------------------------------------------------------------------------


def ancestral_sample(g: PcfgChart, rng: np.random.Generator) -> PermTree:
    G = g.G
    n = g.n

    def draw(i: int, w: int) -> PermTree:
        if w == 1:
            return Leaf(i)
        p = G[w, i, 1:w, :].ravel()
        c = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
        c = min(c, p.size - 1)
        l, o = c // 2 + 1, c % 2
        return Node(STRAIGHT if o == 0 else INVERTED, draw(i, l), draw(i + l, w - l))

    return draw(0, n)


# ---------------------------------------------------------------------------
# Gumbel perturb-and-MAP
# ---------------------------------------------------------------------------


def gumbel_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """Gumbel(0, 1) draws for every valid rule, in canonical rule order."""
    w, i, l = rule_index(n)
    u = rng.uniform(GUMBEL_EPS, 1.0 - GUMBEL_EPS, size=(len(w), 2))
    noise = np.zeros(chart_shape(n))
    noise[w, i, l, :] = -np.log(-np.log(u))
    return noise


def span_argmax(scores: np.ndarray, n: int) -> np.ndarray:
    """Per-span one-hot selection of the highest-scoring rule."""
    hard = np.zeros(chart_shape(n))
    for w in range(2, n + 1):
        m = n - w + 1
        flat = scores[w, :m, 1:w, :].reshape(m, -1)
        c = np.argmax(flat, axis=1)
        block = np.zeros_like(flat)
        block[np.arange(m), c] = 1.0
        hard[w, :m, 1:w, :] = block.reshape(m, w - 1, 2)
    return hard


def span_softmax(scores: np.ndarray, n: int, temperature: float) -> np.ndarray:
    """Per-span softmax of ``scores / temperature`` over the span's rules."""
    out = np.zeros(chart_shape(n))
    for w in range(2, n + 1):
        m = n - w + 1
        flat = scores[w, :m, 1:w, :].reshape(m, -1) / temperature
        flat = flat - flat.max(axis=1, keepdims=True)
        e = np.exp(flat)
        out[w, :m, 1:w, :] = (e / e.sum(axis=1, keepdims=True)).reshape(m, w - 1, 2)
    return out


def span_softmax_backward(soft: np.ndarray, adj: np.ndarray, n: int, temperature: float) -> np.ndarray:
    out = np.zeros(chart_shape(n))
    for w in range(2, n + 1):
        m = n - w + 1
        y = soft[w, :m, 1:w, :].reshape(m, -1)
        a = adj[w, :m, 1:w, :].reshape(m, -1)
        dot = (a * y).sum(axis=1, keepdims=True)
        out[w, :m, 1:w, :] = (y * (a - dot) / temperature).reshape(m, w - 1, 2)
    return out


def _choices(scores: np.ndarray, n: int) -> np.ndarray:
    choice = np.zeros((n + 1, n + 1), dtype=np.intp)
    for w in range(2, n + 1):
        m = n - w + 1
        choice[w, :m] = np.argmax(scores[w, :m, 1:w, :].reshape(m, -1), axis=1)
    return choice


def span_argmax_tree(scores: np.ndarray, n: int) -> PermTree:
    """Tree obtained by following the per-span argmax of ``scores`` from the root."""
    return _follow(_choices(scores, n), n)


def perturbed_tree(g: PcfgChart, noise: np.ndarray) -> PermTree:
    return span_argmax_tree(g.logG + noise, g.n)


def gumbel_sample(
    g: PcfgChart,
    rng: np.random.Generator | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    noise: np.ndarray | None = None,
    seed: int | None = None,
    max_length: int = MAX_MARGINAL_LENGTH,
) -> SampledPerm:
    """Straight-through Gumbel sample of a permutation.

    ``noise`` overrides the Gumbel draws.  Zero noise gives the per-span
    argmax tree, which is the MAP tree only when the greedy choices agree.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n = g.n
    if noise is None:
        if rng is None:
            rng = np.random.default_rng(seed)
        noise = gumbel_noise(n, rng)
    perturbed = np.where(valid_mask(n), g.logG + noise, -np.inf)
    tree = span_argmax_tree(perturbed, n)
    hard = tree_to_matrix(tree)
    _check_length(n, max_length)
    relaxed = accumulate(span_softmax(perturbed, n, temperature), n)[n][0]
    return SampledPerm(hard, ExpectedPerm(n, relaxed), tree, float(temperature), seed)
