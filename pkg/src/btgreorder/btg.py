"""Anchored BTG charts: rule weights, inside scores and locally normalised rules.

All charts share one dense layout indexed by ``[width, start, offset, o]``:
the anchored rule ``X[i,k] -> X[i,j] X[j,k]`` with orientation ``o``
(0 = Straight, 1 = Inverted) lives at ``[k - i, i, j - i, o]``.  Entries
outside ``2 <= width <= n``, ``0 <= start <= n - width``,
``1 <= offset < width`` are padding and never read.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .perm_core import INVERTED, STRAIGHT, PermTree, internal_nodes

ORIENT_INDEX = {STRAIGHT: 0, INVERTED: 1}


def chart_shape(n: int) -> tuple[int, int, int, int]:
    m = max(n, 1)
    return (n + 1, m, m, 2)


@lru_cache(maxsize=256)
def rule_index(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Valid ``(width, start, offset)`` triples in canonical order."""
    ws, starts, offs = [], [], []
    for w in range(2, n + 1):
        for i in range(n - w + 1):
            for l in range(1, w):
                ws.append(w)
                starts.append(i)
                offs.append(l)
    out = (np.array(ws, dtype=np.intp), np.array(starts, dtype=np.intp), np.array(offs, dtype=np.intp))
    for a in out:
        a.setflags(write=False)
    return out


@lru_cache(maxsize=256)
def valid_mask(n: int) -> np.ndarray:
    mask = np.zeros(chart_shape(n), dtype=bool)
    w, i, l = rule_index(n)
    mask[w, i, l, :] = True
    mask.setflags(write=False)
    return mask


def num_rules(n: int) -> int:
    """Number of anchored binary rules (both orientations)."""
    return 2 * len(rule_index(n)[0])


def _width_index(n: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    m = n - w + 1
    starts = np.arange(m)[:, None]
    offs = np.arange(1, w)[None, :]
    return starts, offs


@dataclass(frozen=True)
class RuleWeightChart:
    """Log-weights ``log f(R)`` of every anchored binary rule of a sentence."""

    n: int
    logf: np.ndarray

    def __post_init__(self):
        if self.logf.shape != chart_shape(self.n):
            raise ValueError(f"logf has shape {self.logf.shape}, expected {chart_shape(self.n)}")
        if not np.all(np.isfinite(self.logf[valid_mask(self.n)])):
            raise ValueError("rule log-weights must be finite")

    @classmethod
    def uniform(cls, n: int, logf: float = 0.0) -> "RuleWeightChart":
        return cls(n, np.where(valid_mask(n), logf, 0.0))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator, scale: float = 1.0) -> "RuleWeightChart":
        vals = rng.normal(scale=scale, size=chart_shape(n))
        return cls(n, np.where(valid_mask(n), vals, 0.0))

    def get(self, i: int, j: int, k: int, o: str) -> float:
        return float(self.logf[k - i, i, j - i, ORIENT_INDEX[o]])

    def with_rule(self, i: int, j: int, k: int, o: str, logf: float) -> "RuleWeightChart":
        arr = self.logf.copy()
        arr[k - i, i, j - i, ORIENT_INDEX[o]] = logf
        return RuleWeightChart(self.n, arr)

    def to_json(self) -> dict:
        w, i, l = rule_index(self.n)
        rules = []
        for ww, ii, ll in zip(w.tolist(), i.tolist(), l.tolist()):
            for o, oi in ORIENT_INDEX.items():
                rules.append(
                    {"i": ii, "j": ii + ll, "k": ii + ww, "o": o, "logf": float(self.logf[ww, ii, ll, oi])}
                )
        return {"n": self.n, "rules": rules}

    @classmethod
    def from_json(cls, obj: dict) -> "RuleWeightChart":
        n = int(obj["n"])
        if n < 1:
            raise ValueError("n must be >= 1")
        arr = np.zeros(chart_shape(n))
        for r in obj.get("rules", []):
            i, j, k = int(r["i"]), int(r["j"]), int(r["k"])
            if not (0 <= i < j < k <= n):
                raise ValueError(f"rule anchor out of range: {(i, j, k)} for n={n}")
            arr[k - i, i, j - i, ORIENT_INDEX[r["o"]]] = float(r["logf"])
        return cls(n, arr)


@dataclass(frozen=True)
class InsideChart:
    """``logbeta[w, i]`` is the log total weight of derivations rooted at ``[i, i+w)``."""

    n: int
    logbeta: np.ndarray

    def at(self, i: int, k: int) -> float:
        return float(self.logbeta[k - i, i])

    @property
    def log_partition(self) -> float:
        return float(self.logbeta[self.n, 0])


@dataclass(frozen=True)
class PcfgChart:
    """Locally normalised rule probabilities ``G(R)`` (and their logs)."""

    n: int
    logG: np.ndarray

    @property
    def G(self) -> np.ndarray:
        return np.where(valid_mask(self.n), np.exp(self.logG), 0.0)

    def prob(self, i: int, j: int, k: int, o: str) -> float:
        return float(np.exp(self.logG[k - i, i, j - i, ORIENT_INDEX[o]]))

    @classmethod
    def from_probs(cls, n: int, G: np.ndarray) -> "PcfgChart":
        """Wrap an explicit probability chart; zeros become ``-inf`` log-probabilities."""
        mask = valid_mask(n)
        with np.errstate(divide="ignore"):
            logG = np.where(mask, np.log(np.where(mask, G, 1.0)), -np.inf)
        return cls(n, logG)

    def span_totals(self) -> np.ndarray:
        """``sum_{j,o} G`` for every span of width >= 2, as ``[w, i]``."""
        out = np.full((self.n + 1, max(self.n, 1)), np.nan)
        G = self.G
        for w in range(2, self.n + 1):
            out[w, : self.n - w + 1] = G[w, : self.n - w + 1, 1:w, :].sum(axis=(1, 2))
        return out


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def _logsumexp_last(x: np.ndarray) -> np.ndarray:
    mx = np.max(x, axis=-1)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.sum(np.exp(x - safe[..., None]), axis=-1))


def inside_kernel(logf: np.ndarray, n: int) -> np.ndarray:
    """Bottom-up log-space inside pass; returns ``logbeta[w, i]``."""
    LB = np.full((n + 1, n + 1), -np.inf)
    LB[1, :n] = 0.0
    for w in range(2, n + 1):
        m = n - w + 1
        I, L = _width_index(n, w)
        kids = LB[L, I] + LB[w - L, I + L]
        terms = logf[w, :m, 1:w, :] + kids[..., None]
        LB[w, :m] = _logsumexp_last(terms.reshape(m, -1))
    return LB


def rule_logprobs_kernel(logf: np.ndarray, LB: np.ndarray, n: int) -> np.ndarray:
    """``log G = log f + log beta(left) + log beta(right) - log beta(parent)``."""
    logG = np.full(chart_shape(n), -np.inf)
    for w in range(2, n + 1):
        m = n - w + 1
        I, L = _width_index(n, w)
        kids = LB[L, I] + LB[w - L, I + L] - LB[w, :m][:, None]
        logG[w, :m, 1:w, :] = logf[w, :m, 1:w, :] + kids[..., None]
    return logG


def inside_backward_kernel(logG: np.ndarray, adj_LB: np.ndarray, n: int) -> np.ndarray:
    """Push adjoints of ``logbeta`` down to ``logf``.

    The softmax weights of the log-sum-exp at a span are exactly the rule
    probabilities of that span, so ``logG`` is all the forward state needed.
    ``adj_LB`` is consumed (children accumulate into it).
    """
    adj_f = np.zeros(chart_shape(n))
    for w in range(n, 1, -1):
        m = n - w + 1
        a = adj_LB[w, :m]
        if not np.any(a):
            continue
        I, L = _width_index(n, w)
        wts = np.exp(logG[w, :m, 1:w, :])
        adj_f[w, :m, 1:w, :] += a[:, None, None] * wts
        s = a[:, None] * wts.sum(axis=-1)
        # (width, start) targets are distinct within one parent width
        adj_LB[L, I] += s
        adj_LB[w - L, I + L] += s
    return adj_f


def rule_logprobs_backward_kernel(adj_logG: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of :func:`rule_logprobs_kernel` w.r.t. ``logf`` and ``logbeta``."""
    mask = valid_mask(n)
    adj = np.where(mask, adj_logG, 0.0)
    adj_f = adj.copy()
    adj_LB = np.zeros((n + 1, n + 1))
    for w in range(2, n + 1):
        m = n - w + 1
        I, L = _width_index(n, w)
        s = adj[w, :m, 1:w, :].sum(axis=-1)
        # (width, start) targets are distinct within one parent width
        adj_LB[L, I] += s
        adj_LB[w - L, I + L] += s
        adj_LB[w, :m] -= s.sum(axis=1)
    return adj_f, adj_LB


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def inside(w: RuleWeightChart) -> InsideChart:
    return InsideChart(w.n, inside_kernel(w.logf, w.n))


def wcfg_to_pcfg(w: RuleWeightChart, b: InsideChart | None = None) -> PcfgChart:
    if b is None:
        b = inside(w)
    if b.n != w.n:
        raise ValueError("inside chart and rule chart lengths differ")
    return PcfgChart(w.n, rule_logprobs_kernel(w.logf, b.logbeta, w.n))


def _check_span(t: PermTree, n: int) -> None:
    if t.start != 0 or t.end != n:
        raise ValueError(f"tree covers [{t.start},{t.end}) but chart has n={n}")


def derivation_logweight(w: RuleWeightChart, t: PermTree) -> float:
    _check_span(t, w.n)
    total = 0.0
    for i, j, k, o in internal_nodes(t):
        total += w.logf[k - i, i, j - i, ORIENT_INDEX[o]]
    return float(total)


def derivation_logprob(g: PcfgChart, t: PermTree) -> float:
    _check_span(t, g.n)
    total = 0.0
    for i, j, k, o in internal_nodes(t):
        total += g.logG[k - i, i, j - i, ORIENT_INDEX[o]]
    return float(total)


def derivation_prob(g: PcfgChart, t: PermTree) -> float:
    return float(np.exp(derivation_logprob(g, t)))


def load_weights(path) -> RuleWeightChart:
    with open(path, encoding="utf-8") as fh:
        return RuleWeightChart.from_json(json.load(fh))

