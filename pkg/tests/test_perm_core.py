import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from btgreorder import perm_core as pc
from btgreorder.perm_core import INVERTED, STRAIGHT, Leaf, Node
from conftest import catalan


def fig2_tree():
    # ((M + M) - M) + (M + M) over five unit blocks
    return Node(STRAIGHT, Node(INVERTED, Node(STRAIGHT, Leaf(0), Leaf(1)), Leaf(2)), Node(STRAIGHT, Leaf(3), Leaf(4)))


@st.composite
def trees(draw, lo=0, max_len=7):
    n = draw(st.integers(1, max_len))

    def build(i, k):
        if k - i == 1:
            return Leaf(i)
        j = draw(st.integers(i + 1, k - 1))
        return Node(draw(st.sampled_from([STRAIGHT, INVERTED])), build(i, j), build(j, k))

    return build(lo, lo + n)


# --- tree construction ---------------------------------------------------


def test_node_rejects_non_adjacent_children():
    with pytest.raises(ValueError):
        Node(STRAIGHT, Leaf(0), Leaf(2))


def test_node_rejects_unknown_orientation():
    with pytest.raises(ValueError):
        Node("X", Leaf(0), Leaf(1))


def test_internal_nodes_lists_anchors():
    assert list(pc.internal_nodes(fig2_tree())) == [
        (0, 3, 5, STRAIGHT),
        (0, 2, 3, INVERTED),
        (0, 1, 2, STRAIGHT),
        (3, 4, 5, STRAIGHT),
    ]


# --- block sums ----------------------------------------------------------


def test_direct_sum_examples():
    assert np.array_equal(pc.direct_sum([[1]], [[1]]), np.eye(2))
    swap = np.array([[0, 1], [1, 0]])
    assert np.array_equal(pc.direct_sum(swap, [[1]]), [[0, 1, 0], [1, 0, 0], [0, 0, 1]])


def test_skew_sum_unit_blocks_is_swap():
    assert np.array_equal(pc.skew_sum([[1]], [[1]]), [[0, 1], [1, 0]])


def test_skew_sum_moves_second_segment_first():
    # a = identity on inputs 0,1 ; b = single input 2 ; output order 2, 0, 1
    m = pc.skew_sum(np.eye(2), [[1]])
    assert pc.matrix_to_perm(m) == (2, 0, 1)


def test_block_sums_preserve_double_stochasticity(rng):
    def ds(k):
        # convex mix of permutation matrices
        ws = rng.dirichlet(np.ones(3))
        return sum(w * pc.perm_to_matrix(rng.permutation(k)) for w in ws)

    for op in (pc.direct_sum, pc.skew_sum):
        m = op(ds(3), ds(4))
        assert np.allclose(m.sum(0), 1) and np.allclose(m.sum(1), 1)


# --- interpretation ------------------------------------------------------


def test_leaf_and_swap_matrices():
    assert np.array_equal(pc.tree_to_matrix(Leaf(0)), [[1]])
    assert np.array_equal(pc.tree_to_matrix(Node(INVERTED, Leaf(0), Leaf(1))), [[0, 1], [1, 0]])


def test_fig2_sentence_order():
    words = ["the", "girl", "saw", "the", "hedgehog"]
    m = pc.tree_to_matrix(fig2_tree())
    assert pc.matrix_to_perm(m) == (2, 0, 1, 3, 4)
    X = np.arange(5)[:, None]
    assert [words[int(i)] for i in (m @ X).ravel()] == ["saw", "the", "girl", "the", "hedgehog"]


@given(trees())
def test_tree_matrix_is_permutation_and_matches_perm(t):
    m = pc.tree_to_matrix(t)
    assert pc.is_permutation_matrix(m)
    assert pc.matrix_to_perm(m) == tuple(p - t.start for p in pc.tree_to_perm(t))


@given(trees(max_len=6))
def test_structural_recursion(t):
    if isinstance(t, Leaf):
        return
    op = pc.direct_sum if t.orientation == STRAIGHT else pc.skew_sum
    expected = op(pc.tree_to_matrix(t.left), pc.tree_to_matrix(t.right))
    assert np.array_equal(pc.tree_to_matrix(t), expected)


def test_perm_matrix_round_trip(rng):
    for n in range(1, 8):
        p = tuple(int(x) for x in rng.permutation(n))
        assert pc.matrix_to_perm(pc.perm_to_matrix(p)) == p


def test_perm_to_matrix_rejects_non_bijection():
    with pytest.raises(ValueError):
        pc.perm_to_matrix([0, 0, 1])


def test_is_permutation_matrix_rejects_soft():
    assert not pc.is_permutation_matrix(np.full((2, 2), 0.5))
    assert not pc.is_permutation_matrix(np.ones((2, 3)))


# --- separability --------------------------------------------------------


@pytest.mark.parametrize(
    "p, expected",
    [((0, 1, 2, 3), True), ((1, 3, 0, 2), False), ((2, 0, 3, 1), False), ((2, 0, 1, 3, 4), True), ((0,), True)],
)
def test_is_separable_examples(p, expected):
    assert pc.is_separable(p) is expected


@pytest.mark.parametrize("n", range(1, 7))
def test_is_separable_agrees_with_enumeration(n):
    reachable = {pc.tree_to_perm(t) for t in pc.enumerate_trees(n)}
    for p in itertools.permutations(range(n)):
        assert pc.is_separable(p) == (p in reachable)


def _has_pattern(p, pattern):
    k = len(pattern)
    for idx in itertools.combinations(range(len(p)), k):
        vals = [p[i] for i in idx]
        if tuple(np.argsort(np.argsort(vals))) == pattern:
            return True
    return False


@pytest.mark.parametrize("n", range(1, 7))
def test_separable_iff_avoids_2413_and_3142(n):
    for p in itertools.permutations(range(n)):
        avoids = not _has_pattern(p, (1, 3, 0, 2)) and not _has_pattern(p, (2, 0, 3, 1))
        assert pc.is_separable(p) == avoids


@pytest.mark.parametrize("n", range(1, 7))
def test_separating_tree_reproduces_permutation(n):
    for p in itertools.permutations(range(n)):
        if pc.is_separable(p):
            assert pc.tree_to_perm(pc.separating_tree(p)) == p


def test_separating_tree_rejects_non_separable():
    with pytest.raises(ValueError):
        pc.separating_tree((1, 3, 0, 2))


# --- enumeration ---------------------------------------------------------


@pytest.mark.parametrize("n, count", [(1, 1), (2, 2), (3, 8), (4, 40), (5, 224)])
def test_enumerate_tree_counts(n, count):
    trees_ = pc.enumerate_trees(n)
    assert len(trees_) == count == pc.count_trees(n)
    assert len(set(trees_)) == count


@pytest.mark.parametrize("n", range(1, 9))
def test_count_trees_closed_form(n):
    assert pc.count_trees(n) == catalan(n - 1) * 2 ** (n - 1)


def test_separable_counts():
    assert [pc.count_separable(n) for n in range(1, 7)] == [1, 2, 6, 22, 90, 394]


def test_enumeration_guard():
    with pytest.raises(pc.LengthExceeded):
        pc.enumerate_trees(pc.MAX_ENUM_LENGTH + 1)
    with pytest.raises(ValueError):
        pc.enumerate_trees(0)


# --- JSON ----------------------------------------------------------------


@given(trees())
def test_tree_json_round_trip(t):
    obj = json.loads(json.dumps(pc.tree_to_json(t)))
    assert pc.tree_from_json(obj) == t


def test_json_shapes():
    assert pc.tree_to_json(Node(INVERTED, Leaf(0), Leaf(1))) == {"op": "I", "l": {"leaf": 0}, "r": {"leaf": 1}}
    m = pc.tree_to_matrix(fig2_tree())
    assert pc.perm_matrix_to_json(m) == {"n": 5, "perm": [2, 0, 1, 3, 4]}
    assert np.array_equal(pc.perm_matrix_from_json({"n": 5, "perm": [2, 0, 1, 3, 4]}), m)
    with pytest.raises(ValueError):
        pc.perm_matrix_from_json({"n": 4, "perm": [0, 1, 2]})
