import collections

import numpy as np
import pytest

from btgreorder import inference as inf
from btgreorder.btg import PcfgChart, RuleWeightChart, chart_shape, derivation_prob, valid_mask, wcfg_to_pcfg
from btgreorder.perm_core import (
    INVERTED,
    STRAIGHT,
    Leaf,
    Node,
    enumerate_trees,
    internal_nodes,
    is_permutation_matrix,
    tree_to_matrix,
)
from conftest import brute_force, brute_marginal, random_pcfg


def pcfg2(p_straight):
    G = np.zeros(chart_shape(2))
    G[2, 0, 1, 0] = p_straight
    G[2, 0, 1, 1] = 1 - p_straight
    return PcfgChart.from_probs(2, G)


# --- marginal -------------------------------------------------------------


def test_marginal_two_token_examples():
    assert np.allclose(inf.marginal(pcfg2(0.5)).entries, [[0.5, 0.5], [0.5, 0.5]])
    assert np.allclose(inf.marginal(pcfg2(0.75)).entries, [[0.75, 0.25], [0.25, 0.75]])


def test_marginal_single_token():
    assert np.array_equal(inf.marginal(wcfg_to_pcfg(RuleWeightChart.uniform(1))).entries, [[1.0]])


@pytest.mark.parametrize("n", range(2, 7))
def test_marginal_matches_enumeration(rng, n):
    for _ in range(10):
        w = RuleWeightChart.random(n, rng, scale=1.5)
        got = inf.marginal(wcfg_to_pcfg(w)).entries
        assert np.abs(got - brute_marginal(w)).max() <= 1e-10


@pytest.mark.parametrize("n", [7, 12, 20, 35])
def test_marginal_doubly_stochastic(rng, n):
    m = inf.marginal(random_pcfg(n, rng, scale=2.0)).entries
    assert np.all(m >= -1e-15) and np.all(m <= 1 + 1e-12)
    assert np.allclose(m.sum(axis=0), 1, atol=1e-9)
    assert np.allclose(m.sum(axis=1), 1, atol=1e-9)


def test_marginal_of_delta_pcfg_is_that_permutation():
    t = Node(STRAIGHT, Node(INVERTED, Node(STRAIGHT, Leaf(0), Leaf(1)), Leaf(2)), Node(STRAIGHT, Leaf(3), Leaf(4)))
    G = np.zeros(chart_shape(5))
    # every span that is not on the tree keeps some rule with mass 1 so the chart stays normalised
    for w in range(2, 6):
        G[w, : 6 - w, 1, 0] = 1.0
    for i, j, k, o in internal_nodes(t):
        G[k - i, i, 1 : k - i, :] = 0.0
        G[k - i, i, j - i, 0 if o == STRAIGHT else 1] = 1.0
    m = inf.marginal(PcfgChart.from_probs(5, G)).entries
    assert np.array_equal(m, tree_to_matrix(t))


def test_marginal_length_cap(rng):
    g = random_pcfg(6, rng)
    with pytest.raises(inf.ChartTooLong):
        inf.marginal(g, max_length=5)


def test_marginal_json():
    assert inf.marginal(pcfg2(0.5)).to_json() == {"n": 2, "rows": [[0.5, 0.5], [0.5, 0.5]]}


# --- accumulation kernels -------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 3, 6, 11])
def test_offset_form_equals_bottom_up(rng, n):
    for sel in (random_pcfg(n, rng).G, np.where(valid_mask(n), rng.random(chart_shape(n)), 0.0)):
        bottom_up = inf.accumulate(sel, n)[n][0]
        top_down = inf.offset_paths(sel, n)[1].T
        assert np.allclose(top_down, bottom_up, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("n", [2, 4, 9])
def test_offset_backward_equals_bottom_up_backward(rng, n):
    sel = np.where(valid_mask(n), rng.random(chart_shape(n)), 0.0)
    adj = rng.normal(size=(n, n))
    a = inf.accumulate_backward(sel, inf.accumulate(sel, n), adj, n)
    b = inf.offset_paths_backward(sel, inf.offset_paths(sel, n), adj, n)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


# --- MAP ------------------------------------------------------------------


def test_map_two_token_examples():
    tree, p = inf.map_derivation(pcfg2(0.75))
    assert tree == Node(STRAIGHT, Leaf(0), Leaf(1)) and p == pytest.approx(0.75)
    tree, p = inf.map_derivation(pcfg2(0.5))
    assert tree.orientation == STRAIGHT and p == pytest.approx(0.5)


def test_map_tie_break_smallest_split_first():
    tree, p = inf.map_derivation(wcfg_to_pcfg(RuleWeightChart.uniform(4)))
    # all 40 derivations tie; smallest split then Straight, recursively
    assert tree == Node(STRAIGHT, Leaf(0), Node(STRAIGHT, Leaf(1), Node(STRAIGHT, Leaf(2), Leaf(3))))
    assert p == pytest.approx(1 / 40)


@pytest.mark.parametrize("n", range(1, 7))
def test_map_matches_brute_force(rng, n):
    for _ in range(40):
        w = RuleWeightChart.random(n, rng, scale=2.0)
        trees, probs = brute_force(w)
        best = trees[int(np.argmax(probs))]
        tree, p = inf.map_derivation(wcfg_to_pcfg(w))
        assert tree == best
        assert p == pytest.approx(probs.max(), rel=1e-9)
        assert inf.map_derivation_weights(w)[0] == best


# --- ancestral sampling ---------------------------------------------------


def test_ancestral_degenerate():
    rng = np.random.default_rng(0)
    assert all(inf.ancestral_sample(pcfg2(1.0), rng) == Node(STRAIGHT, Leaf(0), Leaf(1)) for _ in range(50))


def test_ancestral_seed_determinism(rng):
    g = random_pcfg(7, rng)
    a = [inf.ancestral_sample(g, np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def _tv(samples, trees, probs):
    counts = collections.Counter(samples)
    total = len(samples)
    return 0.5 * sum(abs(counts.get(t, 0) / total - p) for t, p in zip(trees, probs))


def test_ancestral_distribution(rng):
    w = RuleWeightChart.random(4, rng)
    trees, probs = brute_force(w)
    g = wcfg_to_pcfg(w)
    srng = np.random.default_rng(11)
    samples = [inf.ancestral_sample(g, srng) for _ in range(20_000)]
    assert _tv(samples, trees, probs) < 0.03


# --- Gumbel ---------------------------------------------------------------


def test_gumbel_noise_finite_and_masked(rng):
    noise = inf.gumbel_noise(9, rng)
    assert np.all(np.isfinite(noise))
    assert np.all(noise[~valid_mask(9)] == 0.0)


def test_gumbel_hard_is_tree_matrix(rng):
    g = random_pcfg(8, rng)
    for t in (0.1, 1.0, 5.0):
        s = inf.gumbel_sample(g, np.random.default_rng(3), temperature=t)
        assert is_permutation_matrix(s.hard)
        assert np.array_equal(s.hard, tree_to_matrix(s.tree))
        assert s.relaxed.entries.shape == (8, 8)


def test_gumbel_zero_noise_follows_per_span_argmax(rng):
    g = random_pcfg(6, rng)
    s = inf.gumbel_sample(g, noise=np.zeros(chart_shape(6)))
    assert s.tree == inf.span_argmax_tree(g.logG, 6)


@pytest.mark.parametrize("n", [1, 2])
def test_gumbel_zero_noise_is_map_on_short_spans(rng, n):
    g = random_pcfg(n, rng)
    s = inf.gumbel_sample(g, noise=np.zeros(chart_shape(n)), temperature=0.3)
    assert np.array_equal(s.hard, tree_to_matrix(inf.map_derivation(g)[0]))


def test_gumbel_zero_noise_is_map_for_delta_charts(rng):
    # when every span has a single supported rule there is nothing to disagree about
    n = 6
    G = np.zeros(chart_shape(n))
    for w in range(2, n + 1):
        for i in range(n - w + 1):
            G[w, i, rng.integers(1, w), rng.integers(2)] = 1.0
    g = PcfgChart.from_probs(n, G)
    s = inf.gumbel_sample(g, noise=np.zeros(chart_shape(n)))
    assert s.tree == inf.map_derivation(g)[0]


def test_gumbel_never_selects_zero_probability_rules():
    n = 5
    G = np.zeros(chart_shape(n))
    for w in range(2, n + 1):
        G[w, : n - w + 1, w - 1, 1] = 0.6
        G[w, : n - w + 1, 1, 0] = G[w, : n - w + 1, 1, 0] + 0.4
    g = PcfgChart.from_probs(n, G)
    rng = np.random.default_rng(0)
    for _ in range(300):
        s = inf.gumbel_sample(g, rng)
        assert derivation_prob(g, s.tree) > 0


def test_gumbel_distribution(rng):
    w = RuleWeightChart.random(4, rng)
    trees, probs = brute_force(w)
    g = wcfg_to_pcfg(w)
    srng = np.random.default_rng(12)
    samples = [inf.gumbel_sample(g, srng).tree for _ in range(20_000)]
    assert _tv(samples, trees, probs) < 0.03


def test_gumbel_relaxed_low_temperature_approaches_hard(rng):
    g = random_pcfg(6, rng)
    noise = inf.gumbel_noise(6, np.random.default_rng(1))
    s = inf.gumbel_sample(g, noise=noise, temperature=1e-3)
    assert np.allclose(s.relaxed.entries, s.hard, atol=1e-6)


def test_gumbel_relaxed_rows_sum_to_one(rng):
    s = inf.gumbel_sample(random_pcfg(9, rng), rng, temperature=2.0)
    m = s.relaxed.entries
    assert np.allclose(m.sum(0), 1) and np.allclose(m.sum(1), 1)


def test_gumbel_rejects_bad_temperature(rng):
    with pytest.raises(ValueError):
        inf.gumbel_sample(random_pcfg(3, rng), rng, temperature=0.0)


def test_gumbel_seed_determinism(rng):
    g = random_pcfg(7, rng)
    a = inf.gumbel_sample(g, seed=9)
    b = inf.gumbel_sample(g, seed=9)
    assert a.tree == b.tree and np.array_equal(a.relaxed.entries, b.relaxed.entries)
    assert a.to_json() == b.to_json()


def test_span_softmax_sums_to_one_per_span(rng):
    n = 6
    soft = inf.span_softmax(rng.normal(size=chart_shape(n)), n, 0.5)
    for w in range(2, n + 1):
        assert np.allclose(soft[w, : n - w + 1, 1:w, :].sum(axis=(1, 2)), 1.0)


def test_span_argmax_is_one_hot(rng):
    n = 5
    hard = inf.span_argmax(rng.normal(size=chart_shape(n)), n)
    for w in range(2, n + 1):
        assert np.array_equal(hard[w, : n - w + 1, 1:w, :].sum(axis=(1, 2)), np.ones(n - w + 1))


def test_every_tree_reachable_by_some_noise():
    # with a uniform chart every derivation must come up eventually
    g = wcfg_to_pcfg(RuleWeightChart.uniform(3))
    rng = np.random.default_rng(0)
    seen = {inf.gumbel_sample(g, rng).tree for _ in range(400)}
    assert seen == set(enumerate_trees(3))
