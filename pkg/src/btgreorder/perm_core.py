"""Permutation trees, permutation matrices and their block compositions.

Conventions used across the package:

* spans are 0-based and half-open, ``[i, k)``;
* a permutation matrix ``M`` has ``M[a, b] == 1`` when output slot ``a``
  holds input token ``b``, so ``M @ X`` reorders the rows of ``X``;
* a :class:`Permutation` is the row reading of such a matrix, i.e. the
  input index found at every output slot.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence, Union

import numpy as np

STRAIGHT = "S"
INVERTED = "I"
ORIENTATIONS = (STRAIGHT, INVERTED)

MAX_ENUM_LENGTH = 8


class LengthExceeded(ValueError):
    """Raised when an enumeration oracle is asked for a length beyond its guard."""


@dataclass(frozen=True)
class Leaf:
    pos: int

    @property
    def start(self) -> int:
        return self.pos

    @property
    def end(self) -> int:
        return self.pos + 1


@dataclass(frozen=True)
class Node:
    orientation: str
    left: "PermTree"
    right: "PermTree"

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"orientation must be 'S' or 'I', got {self.orientation!r}")
        if self.left.end != self.right.start:
            raise ValueError(
                f"children are not adjacent: [{self.left.start},{self.left.end}) "
                f"and [{self.right.start},{self.right.end})"
            )

    @property
    def start(self) -> int:
        return self.left.start

    @property
    def end(self) -> int:
        return self.right.end

    @property
    def split(self) -> int:
        return self.left.end


PermTree = Union[Leaf, Node]


def tree_span(t: PermTree) -> tuple[int, int]:
    return t.start, t.end


def internal_nodes(t: PermTree) -> Iterator[tuple[int, int, int, str]]:
    """Yield ``(i, j, k, orientation)`` for every internal node, pre-order."""
    stack = [t]
    while stack:
        node = stack.pop()
        if isinstance(node, Node):
            yield node.start, node.split, node.end, node.orientation
            stack.append(node.right)
            stack.append(node.left)


def tree_depth(t: PermTree) -> int:
    if isinstance(t, Leaf):
        return 0
    return 1 + max(tree_depth(t.left), tree_depth(t.right))


# ---------------------------------------------------------------------------
# block compositions
# ---------------------------------------------------------------------------


def direct_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Block-diagonal ``[[a, 0], [0, b]]``: both segments keep their order."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    p, q = a.shape[0], b.shape[0]
    out = np.zeros((p + q, p + q))
    out[:p, :p] = a
    out[p:, p:] = b
    return out


def skew_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Anti-diagonal composition: the second segment is moved in front of the first.

    With ``a`` of size ``p`` (inputs ``0..p-1``) and ``b`` of size ``q``
    (inputs ``p..p+q-1``), output slots ``0..q-1`` are filled by ``b`` and
    slots ``q..q+p-1`` by ``a``::

        [[0, b],
         [a, 0]]

    where ``b`` sits in rows ``:q`` / columns ``p:`` and ``a`` in rows ``q:`` /
    columns ``:p``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    p, q = a.shape[0], b.shape[0]
    out = np.zeros((p + q, p + q))
    out[:q, p:] = b
    out[q:, :p] = a
    return out


def tree_to_matrix(t: PermTree) -> np.ndarray:
    if isinstance(t, Leaf):
        return np.ones((1, 1))
    left = tree_to_matrix(t.left)
    right = tree_to_matrix(t.right)
    if t.orientation == STRAIGHT:
        return direct_sum(left, right)
    return skew_sum(left, right)


def tree_to_perm(t: PermTree) -> tuple[int, ...]:
    """Input indices in output order (absolute positions, no matrix built)."""
    if isinstance(t, Leaf):
        return (t.pos,)
    left = tree_to_perm(t.left)
    right = tree_to_perm(t.right)
    return left + right if t.orientation == STRAIGHT else right + left


def matrix_to_perm(m: np.ndarray) -> tuple[int, ...]:
    m = np.asarray(m)
    if not is_permutation_matrix(m):
        raise ValueError("not a permutation matrix")
    return tuple(int(b) for b in np.argmax(m, axis=1))


def perm_to_matrix(p: Sequence[int]) -> np.ndarray:
    p = list(p)
    n = len(p)
    if sorted(p) != list(range(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {p}")
    m = np.zeros((n, n))
    m[np.arange(n), p] = 1.0
    return m


def is_permutation_matrix(m: np.ndarray) -> bool:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    if not np.all((m == 0) | (m == 1)):
        return False
    return bool(np.all(m.sum(axis=0) == 1) and np.all(m.sum(axis=1) == 1))


# ---------------------------------------------------------------------------
# separability
# ---------------------------------------------------------------------------


def is_separable(p: Sequence[int]) -> bool:
    """Chart test over spans of output slots.

    A span of slots is buildable when its input indices form a contiguous
    block and it is a single slot or splits into two buildable halves.
    """
    p = list(p)
    n = len(p)
    if sorted(p) != list(range(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {p}")
    if n == 0:
        return True
    ok = np.zeros((n + 1, n + 1), dtype=bool)
    for a in range(n):
        ok[a, a + 1] = True
    for w in range(2, n + 1):
        for a in range(n - w + 1):
            b = a + w
            seg = p[a:b]
            if max(seg) - min(seg) + 1 != w:
                continue
            ok[a, b] = any(ok[a, m] and ok[m, b] for m in range(a + 1, b))
    return bool(ok[0, n])


def separating_tree(p: Sequence[int]) -> PermTree:
    """Some permutation tree whose interpretation is ``p``; ValueError if none."""
    p = tuple(p)
    n = len(p)
    if not is_separable(p):
        raise ValueError(f"{p} is not separable")

    def build(a: int, b: int) -> PermTree:
        # slots [a, b) carry a contiguous block of inputs
        if b - a == 1:
            return Leaf(p[a])
        for m in range(a + 1, b):
            lo, hi = p[a:m], p[m:b]
            if max(lo) - min(lo) + 1 != len(lo) or max(hi) - min(hi) + 1 != len(hi):
                continue
            if not (is_separable(_normalise(lo)) and is_separable(_normalise(hi))):
                continue
            first, second = build(a, m), build(m, b)
            if max(lo) < min(hi):
                return Node(STRAIGHT, first, second)
            return Node(INVERTED, second, first)
        raise AssertionError("unreachable for a separable permutation")

    return build(0, n)


def _normalise(seg: Sequence[int]) -> tuple[int, ...]:
    base = min(seg)
    return tuple(x - base for x in seg)


# ---------------------------------------------------------------------------
# enumeration oracles
# ---------------------------------------------------------------------------


def _check_guard(n: int) -> None:
    if n < 1:
        raise ValueError("length must be at least 1")
    if n > MAX_ENUM_LENGTH:
        raise LengthExceeded(f"enumeration is limited to n <= {MAX_ENUM_LENGTH}, got {n}")


@lru_cache(maxsize=None)
def _trees(i: int, k: int) -> tuple[PermTree, ...]:
    if k - i == 1:
        return (Leaf(i),)
    out = []
    for j in range(i + 1, k):
        for left, right in itertools.product(_trees(i, j), _trees(j, k)):
            for o in ORIENTATIONS:
                out.append(Node(o, left, right))
    return tuple(out)


def enumerate_trees(n: int) -> list[PermTree]:
    _check_guard(n)
    return list(_trees(0, n))


def count_trees(n: int) -> int:
    """Closed form ``Catalan(n-1) * 2**(n-1)``."""
    m = n - 1
    return math.comb(2 * m, m) // (m + 1) * 2**m


def count_separable(n: int) -> int:
    _check_guard(n)
    return len({tree_to_perm(t) for t in _trees(0, n)})


# ---------------------------------------------------------------------------
# JSON forms
# ---------------------------------------------------------------------------


def tree_to_json(t: PermTree) -> dict:
    if isinstance(t, Leaf):
        return {"leaf": t.pos}
    return {"op": t.orientation, "l": tree_to_json(t.left), "r": tree_to_json(t.right)}


def tree_from_json(obj: dict) -> PermTree:
    if "leaf" in obj:
        return Leaf(int(obj["leaf"]))
    return Node(obj["op"], tree_from_json(obj["l"]), tree_from_json(obj["r"]))


def perm_matrix_to_json(m: np.ndarray) -> dict:
    perm = matrix_to_perm(m)
    return {"n": len(perm), "perm": list(perm)}


def perm_matrix_from_json(obj: dict) -> np.ndarray:
    m = perm_to_matrix(obj["perm"])
    if m.shape[0] != obj["n"]:
        raise ValueError("length field disagrees with perm")
    return m
