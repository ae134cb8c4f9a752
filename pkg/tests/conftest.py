import math

import numpy as np
import pytest
from hypothesis import settings

from btgreorder.btg import RuleWeightChart, derivation_logweight, wcfg_to_pcfg
from btgreorder.perm_core import enumerate_trees, tree_to_matrix

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def brute_force(w: RuleWeightChart):
    """(trees, exact probabilities) by enumerating every derivation."""
    trees = enumerate_trees(w.n)
    logw = np.array([derivation_logweight(w, t) for t in trees])
    logz = np.logaddexp.reduce(logw)
    return trees, np.exp(logw - logz)


def brute_marginal(w: RuleWeightChart) -> np.ndarray:
    trees, probs = brute_force(w)
    return sum(p * tree_to_matrix(t) for t, p in zip(trees, probs))


def catalan(m: int) -> int:
    return math.comb(2 * m, m) // (m + 1)


def random_pcfg(n, rng, scale=1.0):
    return wcfg_to_pcfg(RuleWeightChart.random(n, rng, scale))


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
