"""Synthetic infix -> postfix arithmetic data with IID and LEN splits.

Expressions come from ``Expr -> ( Expr op Expr ) | digit``.  The postfix
side keeps the brackets, ``T("(" A op B ")") = "(" T(A) T(B) op ")"``, so
every target is a reordering of its source.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DIGITS = tuple("0123456789")
OPERATORS = ("+", "-", "*", "/")
BRACKETS = ("(", ")")
VOCAB = DIGITS + OPERATORS + BRACKETS

IID_DEPTHS = (1, 6)
LEN_TEST_DEPTH = 7
DESK_SIZES = {"train": 5000, "dev": 1000, "test": 1000}


@dataclass(frozen=True)
class ArithExample:
    infix: tuple[str, ...]
    postfix: tuple[str, ...]
    depth: int


@dataclass(frozen=True)
class ArithGrammar:
    """Sampling knobs for the expression grammar.

    ``expand_prob`` is the chance that a non-root node with remaining depth
    budget expands into a bracketed expression; the root always expands.
    """

    expand_prob: float = 0.3
    digits: tuple[str, ...] = DIGITS
    operators: tuple[str, ...] = OPERATORS
    max_attempts: int = 100_000


# ---------------------------------------------------------------------------
# transform
# ---------------------------------------------------------------------------


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(ch for ch in text if not ch.isspace())


def _parse(tokens: Sequence[str], pos: int):
    tok = tokens[pos]
    if tok in DIGITS:
        return tok, pos + 1
    if tok != "(":
        raise ValueError(f"unexpected token {tok!r} at {pos}")
    left, pos = _parse(tokens, pos + 1)
    op = tokens[pos]
    if op not in OPERATORS:
        raise ValueError(f"expected operator at {pos}, got {op!r}")
    right, pos = _parse(tokens, pos + 1)
    if tokens[pos] != ")":
        raise ValueError(f"expected ')' at {pos}")
    return (left, op, right), pos + 1


def parse(tokens: Sequence[str]):
    tree, end = _parse(tuple(tokens), 0)
    if end != len(tokens):
        raise ValueError("trailing tokens after expression")
    return tree


def _infix(t) -> list[str]:
    if isinstance(t, str):
        return [t]
    left, op, right = t
    return ["(", *_infix(left), op, *_infix(right), ")"]


def _postfix(t) -> list[str]:
    if isinstance(t, str):
        return [t]
    left, op, right = t
    return ["(", *_postfix(left), *_postfix(right), op, ")"]


def _depth(t) -> int:
    if isinstance(t, str):
        return 0
    return 1 + max(_depth(t[0]), _depth(t[2]))


def to_postfix(infix: Sequence[str]) -> tuple[str, ...]:
    return tuple(_postfix(parse(infix)))


def expression_depth(infix: Sequence[str]) -> int:
    return _depth(parse(infix))


def reorder_positions(infix: Sequence[str]) -> tuple[int, ...]:
    """Input position feeding every output slot of the postfix form."""

    def walk(t, start):
        if isinstance(t, str):
            return [start], start + 1
        left, _, right = t
        lp, pos = walk(left, start + 1)
        op_pos = pos
        rp, pos = walk(right, pos + 1)
        return [start, *lp, *rp, op_pos, pos], pos + 1

    perm, _ = walk(parse(infix), 0)
    return tuple(perm)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _sample(rng: np.random.Generator, budget: int, g: ArithGrammar, root: bool):
    if budget > 0 and (root or rng.random() < g.expand_prob):
        left = _sample(rng, budget - 1, g, False)
        op = g.operators[rng.integers(len(g.operators))]
        right = _sample(rng, budget - 1, g, False)
        return (left, op, right)
    return g.digits[rng.integers(len(g.digits))]


def sample_expression(rng: np.random.Generator, depth_min: int, depth_max: int, grammar: ArithGrammar = ArithGrammar()):
    for _ in range(grammar.max_attempts):
        t = _sample(rng, depth_max, grammar, True)
        if depth_min <= _depth(t) <= depth_max:
            return t
    raise RuntimeError(f"could not hit depth band [{depth_min},{depth_max}] in {grammar.max_attempts} draws")


def gen_arith(
    count: int,
    depth_min: int,
    depth_max: int,
    seed: int,
    grammar: ArithGrammar = ArithGrammar(),
) -> list[ArithExample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 1 <= depth_min <= depth_max:
        raise ValueError(f"infeasible depth band [{depth_min},{depth_max}]")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        t = sample_expression(rng, depth_min, depth_max, grammar)
        out.append(ArithExample(tuple(_infix(t)), tuple(_postfix(t)), _depth(t)))
    return out


@dataclass(frozen=True)
class SplitSpec:
    kind: str = "iid"
    sizes: dict = field(default_factory=lambda: dict(DESK_SIZES))
    seed: int = 0
    grammar: ArithGrammar = ArithGrammar()


def _stream_seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(3)
    return {name: int(c.generate_state(1)[0]) for name, c in zip(("train", "dev", "test"), children)}


def make_splits(spec: SplitSpec) -> dict[str, list[ArithExample]]:
    """Train/dev from depths 1-6; test from 1-6 (IID) or exactly 7 (LEN).

    The three sets draw from independent seed streams, so train and dev are
    identical between the IID and LEN splits of the same seed.
    """
    if spec.kind not in ("iid", "len"):
        raise ValueError(f"unknown split kind {spec.kind!r}")
    seeds = _stream_seeds(spec.seed)
    lo, hi = IID_DEPTHS
    out = {
        "train": gen_arith(spec.sizes["train"], lo, hi, seeds["train"], spec.grammar),
        "dev": gen_arith(spec.sizes["dev"], lo, hi, seeds["dev"], spec.grammar),
    }
    if spec.kind == "iid":
        out["test"] = gen_arith(spec.sizes["test"], lo, hi, seeds["test"], spec.grammar)
    else:
        out["test"] = gen_arith(spec.sizes["test"], LEN_TEST_DEPTH, LEN_TEST_DEPTH, seeds["test"], spec.grammar)
    return out


# ---------------------------------------------------------------------------
# TSV
# ---------------------------------------------------------------------------


def format_tsv(pairs: Iterable[tuple[Sequence[str], Sequence[str]]]) -> str:
    return "".join(" ".join(src) + "\t" + " ".join(tgt) + "\n" for src, tgt in pairs)


def write_tsv(path, examples: Iterable[ArithExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_tsv((e.infix, e.postfix) for e in examples))


def read_tsv(path) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.count("\t") != 1:
                raise ValueError(f"{path}:{lineno}: expected exactly one TAB")
            src, tgt = line.split("\t")
            pairs.append((tuple(src.split()), tuple(tgt.split())))
    return pairs


def write_splits(out_dir, splits: dict[str, list[ArithExample]]) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, examples in splits.items():
        path = os.path.join(out_dir, f"{name}.tsv")
        write_tsv(path, examples)
        paths[name] = path
    return paths
