import collections

import numpy as np
import pytest

from btgreorder import tasks
from btgreorder.perm_core import is_separable


TABLE_PAIR = ("((1+9)*((7+8)/4))", "((19+)((78+)4/)*)")


def test_table_pair():
    src, tgt = (tasks.tokenize(s) for s in TABLE_PAIR)
    assert len(src) == len(tgt) == 17
    assert tasks.to_postfix(src) == tgt
    assert tasks.expression_depth(src) == 3


def test_reorder_positions_reproduce_postfix():
    src = tasks.tokenize(TABLE_PAIR[0])
    perm = tasks.reorder_positions(src)
    assert tuple(src[p] for p in perm) == tasks.tokenize(TABLE_PAIR[1])
    assert is_separable(perm)


def test_single_digit_and_bad_input():
    assert tasks.to_postfix(("7",)) == ("7",)
    for bad in ("(1+2", "1+2", "(1+2))", "(1 2)", "(a+1)"):
        with pytest.raises((ValueError, IndexError)):
            tasks.to_postfix(tasks.tokenize(bad))


def test_depth_one_shape():
    for e in tasks.gen_arith(50, 1, 1, seed=3):
        d1, op, d2 = e.infix[1], e.infix[2], e.infix[3]
        assert e.infix == ("(", d1, op, d2, ")")
        assert e.postfix == ("(", d1, d2, op, ")")
        assert e.depth == 1


def test_generated_pairs_are_separable_reorderings():
    for e in tasks.gen_arith(300, 1, 6, seed=5):
        assert sorted(e.infix) == sorted(e.postfix)
        assert tasks.to_postfix(e.infix) == e.postfix
        perm = tasks.reorder_positions(e.infix)
        assert sorted(perm) == list(range(len(e.infix)))
        assert tuple(e.infix[p] for p in perm) == e.postfix
        assert is_separable(perm)
        assert set(e.infix) <= set(tasks.VOCAB)


def test_depth_coverage():
    depths = collections.Counter(e.depth for e in tasks.gen_arith(1000, 1, 6, seed=0))
    assert set(depths) == set(range(1, 7))


def test_depth_band_is_respected():
    assert {e.depth for e in tasks.gen_arith(40, 3, 4, seed=1)} <= {3, 4}
    assert {e.depth for e in tasks.gen_arith(20, 7, 7, seed=1)} == {7}


@pytest.mark.parametrize("count, lo, hi", [(0, 1, 2), (5, 0, 2), (5, 3, 2)])
def test_gen_arith_rejects_bad_arguments(count, lo, hi):
    with pytest.raises(ValueError):
        tasks.gen_arith(count, lo, hi, seed=0)


def test_gen_arith_deterministic():
    assert tasks.gen_arith(100, 1, 6, seed=9) == tasks.gen_arith(100, 1, 6, seed=9)
    assert tasks.gen_arith(100, 1, 6, seed=9) != tasks.gen_arith(100, 1, 6, seed=10)


def test_desk_split_sizes_and_depths():
    small = {"train": 60, "dev": 20, "test": 20}
    iid = tasks.make_splits(tasks.SplitSpec("iid", sizes=small, seed=4))
    ln = tasks.make_splits(tasks.SplitSpec("len", sizes=small, seed=4))
    assert {k: len(v) for k, v in iid.items()} == small
    assert all(1 <= e.depth <= 6 for part in iid.values() for e in part)
    assert all(e.depth == tasks.LEN_TEST_DEPTH for e in ln["test"])
    assert iid["train"] == ln["train"] and iid["dev"] == ln["dev"]
    assert iid["train"] != iid["dev"]


def test_default_sizes():
    assert tasks.DESK_SIZES == {"train": 5000, "dev": 1000, "test": 1000}


def test_bad_split_kind():
    with pytest.raises(ValueError):
        tasks.make_splits(tasks.SplitSpec("ood"))


def test_postfix_injective():
    rng = np.random.default_rng(0)
    seen = {}
    g = tasks.ArithGrammar()
    for _ in range(100_000):
        t = tasks._sample(rng, 3, g, True)
        src, tgt = tuple(tasks._infix(t)), tuple(tasks._postfix(t))
        assert seen.setdefault(tgt, src) == src


def test_tsv_round_trip(tmp_path):
    exs = tasks.gen_arith(30, 1, 4, seed=2)
    paths = tasks.write_splits(tmp_path, {"train": exs})
    raw = open(paths["train"], "rb").read()
    assert b"\r" not in raw and raw.endswith(b"\n")
    assert tasks.read_tsv(paths["train"]) == [(e.infix, e.postfix) for e in exs]


def test_tsv_rejects_malformed(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("( 1 + 2 )\t( 1 2 + )\textra\n")
    with pytest.raises(ValueError):
        tasks.read_tsv(p)
