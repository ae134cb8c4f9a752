"""Reorder-then-tag model: a BTG reordering module feeding a per-position tagger.

Three variants share the tagger:

``soft``
    training reorders with the expected permutation matrix;
``hard``
    training reorders with a straight-through Gumbel sample;
``identity-baseline``
    no reordering at all (the tagger has to learn everything itself).

Prediction always uses the MAP derivation (identity for the baseline).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .btg import PcfgChart, chart_shape
from .inference import gumbel_noise, map_from_scores, span_argmax_tree
from .perm_core import tree_to_matrix, tree_to_perm
from .scoring import ScorerParams, _check_tokens, bigru_var, init_gru, score_rules, score_rules_var

log = logging.getLogger(__name__)

VARIANTS = ("soft", "hard", "identity-baseline")
CHECKPOINT_FORMAT = "btgreorder-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TaggerParams:
    vocab_size: int
    d_sem: int = 32
    h_tag: int = 0
    tied: bool = True
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, vocab_size: int, rng: np.random.Generator, d_sem: int = 32, h_tag: int = 0, tied: bool = True):
        """With ``tied`` the readout of the reordered embedding is ``emb.T``;
        only the context features (if any) get their own output matrix."""
        t = {"emb": rng.normal(scale=1.0, size=(vocab_size, d_sem))}
        feat = 0 if tied else d_sem
        if h_tag:
            t.update(init_gru(rng, d_sem, h_tag, "enc.fw"))
            t.update(init_gru(rng, d_sem, h_tag, "enc.bw"))
            feat += 2 * h_tag
        if feat:
            t["out.W"] = rng.normal(scale=1.0 / np.sqrt(feat), size=(feat, vocab_size))
        t["out.b"] = np.zeros(vocab_size)
        return cls(vocab_size, d_sem, h_tag, tied, t)

    def on_tape(self, tape: ad.Tape, prefix: str = "tagger.") -> dict[str, ad.Var]:
        return {k: tape.param(prefix + k, v) for k, v in self.tensors.items()}

    def dims(self) -> dict:
        return {"vocab_size": self.vocab_size, "d_sem": self.d_sem, "h_tag": self.h_tag, "tied": self.tied}


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    temperature: float = 1.0
    lag_steps: int = 1000
    lag_prob: float = 0.5
    seed: int = 0
    variant: str = "soft"
    grad_clip: float = 5.0
    d_syn: int = 32
    h_syn: int = 64
    mlp_hidden: int = 64
    d_sem: int = 32
    h_tag: int = 0
    tied_tagger: bool = True
    keep_best: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("epochs", "batch_size", "d_syn", "h_syn", "mlp_hidden", "d_sem"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.temperature <= 0 or self.grad_clip <= 0:
            raise ValueError("lr must be >= 0, temperature and grad_clip > 0")
        if not 0.0 <= self.lag_prob <= 1.0 or self.lag_steps < 0:
            raise ValueError("lag_prob must lie in [0, 1] and lag_steps >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def from_pairs(cls, pairs) -> "Vocab":
        seen = set()
        for src, tgt in pairs:
            seen.update(src)
            seen.update(tgt)
        return cls(sorted(seen))

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.stoi[t] for t in tokens], dtype=np.intp)
        except KeyError as e:
            raise ValueError(f"token {e.args[0]!r} not in the closed vocabulary") from None

    def decode(self, ids) -> tuple[str, ...]:
        return tuple(self.itos[int(i)] for i in ids)


@dataclass
class Model:
    vocab: Vocab
    scorer: ScorerParams
    tagger: TaggerParams
    variant: str = "soft"

    @classmethod
    def init(cls, vocab: Vocab, config: TrainConfig, rng: np.random.Generator) -> "Model":
        scorer = ScorerParams.init(len(vocab), rng, config.d_syn, config.h_syn, config.mlp_hidden)
        tagger = TaggerParams.init(len(vocab), rng, config.d_sem, config.h_tag, config.tied_tagger)
        return cls(vocab, scorer, tagger, config.variant)

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {f"scorer.{k}": v for k, v in self.scorer.tensors.items()}
        out.update({f"tagger.{k}": v for k, v in self.tagger.tensors.items()})
        return out


@dataclass
class ForwardOutput:
    dists: np.ndarray
    loss: float
    reorder: np.ndarray
    tree: object = None


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _tagger_logits(tv: dict[str, ad.Var], reordered: ad.Var, tagger: TaggerParams) -> ad.Var:
    feats = [] if tagger.tied else [reordered]
    if tagger.h_tag:
        feats.extend(bigru_var(reordered, tv, "enc"))
    logits = tv["out.b"]
    if tagger.tied:
        logits = logits + reordered @ ad.transpose(tv["emb"])
    if feats:
        logits = logits + ad.concat(feats, axis=1) @ tv["out.W"]
    return logits


def _check_pair(tokens, gold, vocab_size):
    ids = _check_tokens(tokens, vocab_size)
    gold = np.asarray(gold, dtype=np.intp)
    if gold.shape != ids.shape:
        raise ValueError(f"gold length {gold.size} differs from input length {ids.size}")
    return ids, gold


def build_loss(
    tape: ad.Tape,
    scorer: ScorerParams,
    tagger: TaggerParams,
    tokens,
    gold,
    mode: str,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    noise: np.ndarray | None = None,
    pcfg: PcfgChart | None = None,
) -> tuple[ad.Var, ad.Var, np.ndarray, object]:
    """Record one example's loss on ``tape``.

    ``mode`` is ``soft``, ``hard`` or ``identity``; ``relaxed`` is the hard
    path with the relaxed matrix in the forward too, which is what the
    straight-through backward differentiates.  ``noise`` replaces the Gumbel
    draws and ``pcfg`` replaces the scorer's rule distribution; both exist
    for tests.
    """
    ids, gold = _check_pair(tokens, gold, tagger.vocab_size)
    n = len(ids)
    sv = scorer.on_tape(tape)
    tv = tagger.on_tape(tape)
    X = ad.take_rows(tv["emb"], ids)
    tree = None
    if mode == "identity":
        M = None
        reordered = X
    else:
        if pcfg is not None:
            logG = tape.const(pcfg.logG)
        else:
            logf = score_rules_var(sv, ids, scorer.h_syn)
            logG = ad.rule_logprobs(logf, n) if n >= 2 else tape.const(np.zeros(chart_shape(n)))
        if mode == "soft":
            M = ad.accumulate(ad.exp(logG), n)
        elif mode in ("hard", "relaxed"):
            if noise is None:
                noise = gumbel_noise(n, rng if rng is not None else np.random.default_rng())
            perturbed = logG + noise
            soft = ad.span_softmax(perturbed, n, temperature)
            relaxed = ad.accumulate(soft, n)
            tree = span_argmax_tree(perturbed.value, n)
            M = ad.straight_through(tree_to_matrix(tree), relaxed) if mode == "hard" else relaxed
        else:
            raise ValueError(f"unknown mode {mode!r}")
        reordered = M @ X
    logits = _tagger_logits(tv, reordered, tagger)
    loss = ad.cross_entropy(logits, gold)
    matrix = np.eye(n) if M is None else M.value
    return loss, logits, matrix, tree


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_soft(scorer: ScorerParams, tagger: TaggerParams, tokens, gold, pcfg: PcfgChart | None = None) -> ForwardOutput:
    tape = ad.Tape(grad=False)
    loss, logits, M, _ = build_loss(tape, scorer, tagger, tokens, gold, "soft", pcfg=pcfg)
    return ForwardOutput(_softmax_rows(logits.value), float(loss.value), M)


def forward_hard(
    scorer: ScorerParams,
    tagger: TaggerParams,
    tokens,
    gold,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    noise: np.ndarray | None = None,
    pcfg: PcfgChart | None = None,
) -> ForwardOutput:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    tape = ad.Tape(grad=False)
    loss, logits, M, tree = build_loss(
        tape, scorer, tagger, tokens, gold, "hard", rng=rng, temperature=temperature, noise=noise, pcfg=pcfg
    )
    return ForwardOutput(_softmax_rows(logits.value), float(loss.value), M, tree)


def forward_fixed(tagger: TaggerParams, tokens, gold, matrix: np.ndarray) -> ForwardOutput:
    """Tagger loss with an externally supplied reordering matrix."""
    ids, gold = _check_pair(tokens, gold, tagger.vocab_size)
    tape = ad.Tape(grad=False)
    tv = tagger.on_tape(tape)
    reordered = tape.const(matrix) @ ad.take_rows(tv["emb"], ids)
    logits = _tagger_logits(tv, reordered, tagger)
    loss = ad.cross_entropy(logits, gold)
    return ForwardOutput(_softmax_rows(logits.value), float(loss.value), np.asarray(matrix, dtype=float))


def map_order(scorer: ScorerParams, tokens) -> tuple[int, ...]:
    ids = _check_tokens(tokens, scorer.vocab_size)
    if len(ids) == 1:
        return (0,)
    w = score_rules(scorer, ids)
    tree, _ = map_from_scores(w.logf, w.n)
    return tree_to_perm(tree)


def predict(scorer: ScorerParams, tagger: TaggerParams, tokens, variant: str = "soft") -> np.ndarray:
    """Output ids: tagger argmax over the MAP-reordered input."""
    ids = _check_tokens(tokens, tagger.vocab_size)
    order = tuple(range(len(ids))) if variant == "identity-baseline" else map_order(scorer, ids)
    tape = ad.Tape(grad=False)
    tv = tagger.on_tape(tape)
    reordered = ad.take_rows(tv["emb"], ids[list(order)])
    logits = _tagger_logits(tv, reordered, tagger)
    return np.argmax(logits.value, axis=1)


def predict_tokens(model: Model, tokens: Sequence[str]) -> tuple[str, ...]:
    ids = model.vocab.encode(tokens)
    return model.vocab.decode(predict(model.scorer, model.tagger, ids, model.variant))


def evaluate(model: Model, pairs) -> float:
    """Fraction of examples whose whole predicted sequence equals the gold one."""
    if not pairs:
        return 0.0
    hits = 0
    for src, tgt in pairs:
        hits += predict_tokens(model, src) == tuple(tgt)
    return hits / len(pairs)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            params[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def example_grads(model: Model, ids, gold, mode: str, rng, temperature: float, weight: float = 1.0):
    tape = ad.Tape()
    loss, _, _, _ = build_loss(tape, model.scorer, model.tagger, ids, gold, mode, rng=rng, temperature=temperature)
    grads = ad.backward(tape, weight, loss)
    return float(loss.value), grads


def _mode_for(variant: str) -> str:
    return {"soft": "soft", "hard": "hard", "identity-baseline": "identity"}[variant]


def train(
    config: TrainConfig,
    train_pairs,
    dev_pairs=None,
    vocab: Vocab | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> tuple[Model, list[dict]]:
    """Mini-batch Adam training; returns the final model and the metric history.

    During the first ``lag_steps`` updates each step, with probability
    ``lag_prob``, only the reordering module's parameters move.  The baseline
    has no reordering module, so the lag is inert there.  With
    ``config.keep_best`` and dev data, the returned parameters are those of
    the epoch with the best dev exact match (latest on ties).
    """
    if not train_pairs:
        raise ValueError("empty training set")
    vocab = vocab or Vocab.from_pairs(list(train_pairs) + list(dev_pairs or []))
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_rng, shuffle_rng, noise_rng, lag_rng = (np.random.default_rng(s) for s in seeds)
    model = Model.init(vocab, config, init_rng)
    data = [(vocab.encode(s), vocab.encode(t)) for s, t in train_pairs]
    for ids, gold in data:
        if len(ids) != len(gold):
            raise ValueError("source and target lengths differ")
    mode = _mode_for(config.variant)
    params = model.named_tensors()
    opt = Adam(config.lr)
    history: list[dict] = []
    step = 0
    best_em, best_params = -1.0, None
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(data))
        total = 0.0
        for b in range(0, len(order), config.batch_size):
            batch = order[b : b + config.batch_size]
            acc: dict[str, np.ndarray] = {}
            for idx in batch:
                ids, gold = data[idx]
                loss, grads = example_grads(model, ids, gold, mode, noise_rng, config.temperature, 1.0 / len(batch))
                total += loss
                for k, g in grads.items():
                    acc[k] = acc[k] + g if k in acc else g
            lagged = mode != "identity" and step < config.lag_steps and lag_rng.random() < config.lag_prob
            if lagged:
                acc = {k: g for k, g in acc.items() if k.startswith("scorer.")}
            clip_by_global_norm(acc, config.grad_clip)
            opt.step(params, acc)
            step += 1
        rec = {"epoch": epoch, "split": "train", "loss": total / len(data), "exact_match": None}
        history.append(rec)
        if on_record:
            on_record(rec)
        if dev_pairs:
            rec = {"epoch": epoch, "split": "dev", "loss": map_loss(model, dev_pairs), "exact_match": evaluate(model, dev_pairs)}
            history.append(rec)
            if on_record:
                on_record(rec)
            if config.keep_best and rec["exact_match"] >= best_em:
                best_em = rec["exact_match"]
                best_params = {k: v.copy() for k, v in params.items()}
        log.info("epoch %d: %s", epoch, history[-1])
    if best_params is not None:
        for k, v in best_params.items():
            params[k][...] = v
    return model, history


def map_loss(model: Model, pairs) -> float:
    """Mean tagger loss when reordering with the MAP derivation (identity for the baseline)."""
    total = 0.0
    for src, tgt in pairs:
        ids, gold = model.vocab.encode(src), model.vocab.encode(tgt)
        if model.variant == "identity-baseline":
            order = list(range(len(ids)))
        else:
            order = list(map_order(model.scorer, ids))
        M = np.eye(len(ids))[order]
        total += forward_fixed(model.tagger, ids, gold, M).loss
    return total / max(len(pairs), 1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Model, config: TrainConfig | None = None) -> None:
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "vocab": model.vocab.itos,
        "scorer": model.scorer.dims(),
        "tagger": model.tagger.dims(),
        "config": asdict(config) if config else None,
        "tensors": {
            name: {"shape": list(v.shape), "data": v.ravel().tolist()} for name, v in model.named_tensors().items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def load_checkpoint(path) -> Model:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a btgreorder checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')}")
    tensors = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in obj["tensors"].items()}
    s, t = obj["scorer"], obj["tagger"]
    scorer = ScorerParams(
        s["vocab_size"], s["d_syn"], s["h_syn"], s["mlp_hidden"],
        {k[len("scorer."):]: v for k, v in tensors.items() if k.startswith("scorer.")},
    )
    tagger = TaggerParams(
        t["vocab_size"], t["d_sem"], t["h_tag"], t.get("tied", False),
        {k[len("tagger."):]: v for k, v in tensors.items() if k.startswith("tagger.")},
    )
    return Model(Vocab(obj["vocab"]), scorer, tagger, obj["variant"])


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

GRADCHECK_MODES = ("soft", "relaxed", "identity")
# fourth-order stencil: tiny gradient entries meet the 1e-8 floor, where a
# two-point rule is roundoff-bound at any step size
GRADCHECK_STEP = 3e-3
GRADCHECK_POINTS = 4


def pipeline_gradcheck(
    n: int,
    trials: int,
    seed: int,
    modes: Sequence[str] = GRADCHECK_MODES,
    config: TrainConfig | None = None,
    vocab_size: int = 16,
    h: float = GRADCHECK_STEP,
    temperature: float = 0.7,
) -> dict[str, float]:
    """Max relative error of tape gradients against central differences.

    Each trial draws a fresh model, sentence, gold sequence and Gumbel
    noise, then checks every parameter coordinate of the full
    tokens -> rule scores -> PCFG -> matrix -> tagger loss pipeline.
    """
    if n < 1 or trials < 1:
        raise ValueError("n and trials must be >= 1")
    config = config or TrainConfig(d_syn=4, h_syn=5, mlp_hidden=6, d_sem=4, h_tag=3)
    vocab = Vocab(str(i) for i in range(vocab_size))
    rng = np.random.default_rng(seed)
    worst = {m: 0.0 for m in modes}
    for _ in range(trials):
        model = Model.init(vocab, config, rng)
        ids = rng.integers(vocab_size, size=n)
        gold = rng.integers(vocab_size, size=n)
        noise = gumbel_noise(n, rng)
        tensors = model.named_tensors()
        names = sorted(tensors)
        sizes = [tensors[k].size for k in names]
        point = np.concatenate([tensors[k].ravel() for k in names])

        def load(x):
            for k, part in zip(names, np.split(x, np.cumsum(sizes)[:-1])):
                tensors[k][...] = part.reshape(tensors[k].shape)

        for mode in modes:

            def loss_at(x, mode=mode):
                load(x)
                tape = ad.Tape(grad=False)
                loss = build_loss(tape, model.scorer, model.tagger, ids, gold, mode, temperature=temperature, noise=noise)[0]
                return float(loss.value)

            load(point)
            tape = ad.Tape()
            loss = build_loss(tape, model.scorer, model.tagger, ids, gold, mode, temperature=temperature, noise=noise)[0]
            grads = ad.backward(tape, 1.0, loss)
            analytic = np.concatenate([grads[k].ravel() for k in names])
            err = ad.finite_diff_check(loss_at, point, analytic, h=h, points=GRADCHECK_POINTS)
            load(point)
            worst[mode] = max(worst[mode], err)
    return worst
