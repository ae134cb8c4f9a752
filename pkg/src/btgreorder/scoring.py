"""Neural rule scorer: tokens -> rule log-weights for the BTG chart.

Span ``[i, k)`` is represented by boundary differences of a bidirectional
GRU, ``[f(k-1) - f(i-1) ; b(i) - b(k)]`` with zero padding outside the
sentence.  A one-hidden-layer tanh MLP over ``[s(i,j) ; s(j,k)]`` emits the
Straight and Inverted log-weights of rule ``(i, j, k)``.

The first MLP layer is linear in the span embeddings, and those are
differences of per-position states, so the hidden pre-activation of every
triple splits into ``a[i] + c[j] + d[k]``.  :func:`score_rules_var` uses that
to stay O(n^3 * hidden) rather than O(n^3 * hidden * span_dim).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .btg import RuleWeightChart, chart_shape, rule_index

GRU_TENSORS = ("Wx", "Wh", "bx", "bh")


def init_gru(rng: np.random.Generator, d_in: int, hidden: int, prefix: str) -> dict[str, np.ndarray]:
    k = 1.0 / np.sqrt(hidden)
    return {
        f"{prefix}.Wx": rng.uniform(-k, k, size=(d_in, 3 * hidden)),
        f"{prefix}.Wh": rng.uniform(-k, k, size=(hidden, 3 * hidden)),
        f"{prefix}.bx": rng.uniform(-k, k, size=3 * hidden),
        f"{prefix}.bh": rng.uniform(-k, k, size=3 * hidden),
    }


def bigru_var(x: ad.Var, p: dict[str, ad.Var], prefix: str) -> tuple[ad.Var, ad.Var]:
    fw = ad.gru(x, *(p[f"{prefix}.fw.{t}"] for t in GRU_TENSORS))
    bw = ad.gru(x, *(p[f"{prefix}.bw.{t}"] for t in GRU_TENSORS), reverse=True)
    return fw, bw


@dataclass
class ScorerParams:
    vocab_size: int
    d_syn: int = 32
    h_syn: int = 64
    mlp_hidden: int = 64
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def span_dim(self) -> int:
        return 2 * self.h_syn

    @classmethod
    def init(cls, vocab_size: int, rng: np.random.Generator, d_syn: int = 32, h_syn: int = 64, mlp_hidden: int = 64):
        t = {"emb": rng.normal(scale=1.0, size=(vocab_size, d_syn))}
        t.update(init_gru(rng, d_syn, h_syn, "enc.fw"))
        t.update(init_gru(rng, d_syn, h_syn, "enc.bw"))
        fan_in = 4 * h_syn
        t["mlp.W1"] = rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, mlp_hidden))
        t["mlp.b1"] = np.zeros(mlp_hidden)
        t["mlp.W2"] = rng.normal(scale=1.0 / np.sqrt(mlp_hidden), size=(mlp_hidden, 2))
        t["mlp.b2"] = np.zeros(2)
        return cls(vocab_size, d_syn, h_syn, mlp_hidden, t)

    def on_tape(self, tape: ad.Tape, prefix: str = "scorer.") -> dict[str, ad.Var]:
        return {k: tape.param(prefix + k, v) for k, v in self.tensors.items()}

    def dims(self) -> dict:
        return {"vocab_size": self.vocab_size, "d_syn": self.d_syn, "h_syn": self.h_syn, "mlp_hidden": self.mlp_hidden}


def _check_tokens(tokens, vocab_size: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("expected a non-empty 1-d token id sequence")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError("token id out of vocabulary")
    return ids


def encode_var(p: dict[str, ad.Var], tokens: np.ndarray) -> tuple[ad.Var, ad.Var]:
    x = ad.take_rows(p["emb"], tokens)
    return bigru_var(x, p, "enc")


def encode(params: ScorerParams, tokens) -> np.ndarray:
    """Position encodings ``(n, 2 * h_syn)``: forward states then backward states."""
    ids = _check_tokens(tokens, params.vocab_size)
    tape = ad.Tape(grad=False)
    fw, bw = encode_var(params.on_tape(tape), ids)
    return np.concatenate([fw.value, bw.value], axis=1)


def span_embedding(enc: np.ndarray, i: int, k: int) -> np.ndarray:
    n, two_h = enc.shape
    h = two_h // 2
    if not (0 <= i < k <= n):
        raise ValueError(f"degenerate or out-of-range span [{i},{k}) for n={n}")
    fw_end = enc[k - 1, :h]
    fw_start = enc[i - 1, :h] if i > 0 else np.zeros(h)
    bw_start = enc[i, h:]
    bw_end = enc[k, h:] if k < n else np.zeros(h)
    return np.concatenate([fw_end - fw_start, bw_start - bw_end])


def score_rules_var(p: dict[str, ad.Var], tokens: np.ndarray, h_syn: int) -> ad.Var:
    """Dense rule log-weight chart as a tape variable."""
    n = len(tokens)
    if n < 2:
        return ad.Var(np.zeros(chart_shape(n)), None)
    fw, bw = encode_var(p, tokens)
    zero = np.zeros((1, h_syn))
    F = ad.concat([zero, fw], axis=0)  # F[t] = f(t-1)
    B = ad.concat([bw, zero], axis=0)  # B[t] = b(t)
    h = h_syn
    W1 = p["mlp.W1"]
    Wa, Wb, Wc, Wd = W1[0:h], W1[h : 2 * h], W1[2 * h : 3 * h], W1[3 * h : 4 * h]
    a = B @ Wb - F @ Wa
    c = F @ (Wa - Wc) + B @ (Wd - Wb)
    d = F @ Wc - B @ Wd
    w, i, l = rule_index(n)
    pre = ad.take_rows(a, i) + ad.take_rows(c, i + l) + ad.take_rows(d, i + w) + p["mlp.b1"]
    out = ad.tanh(pre) @ p["mlp.W2"] + p["mlp.b2"]
    return ad.scatter_rules(out, n)


def score_rules(params: ScorerParams, tokens) -> RuleWeightChart:
    ids = _check_tokens(tokens, params.vocab_size)
    tape = ad.Tape(grad=False)
    logf = score_rules_var(params.on_tape(tape), ids, params.h_syn)
    return RuleWeightChart(len(ids), logf.value)
