"""Desk-scale arithmetic comparison: soft and hard reordering vs. the identity baseline.

Every variant trains on the same IID train/dev data and is scored on the
IID test set (depths 1-6) and the LEN test set (depth 7).
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

from . import tasks
from .model import VARIANTS, TrainConfig, Vocab, evaluate, train

log = logging.getLogger(__name__)

# shared by all variants unless overridden
BASE_CONFIG = {"epochs": 16, "keep_best": True}
VARIANT_CONFIG = {
    "soft": {},
    "hard": {},
    # with no reordering module the tagger needs context to move tokens
    "identity-baseline": {"h_tag": 64},
}
EXPAND_PROB = tasks.ArithGrammar().expand_prob


@dataclass
class ExperimentSpec:
    seed: int = 0
    sizes: dict = field(default_factory=lambda: dict(tasks.DESK_SIZES))
    expand_prob: float = EXPAND_PROB
    variants: tuple[str, ...] = VARIANTS
    base: dict = field(default_factory=lambda: dict(BASE_CONFIG))
    per_variant: dict = field(default_factory=lambda: {k: dict(v) for k, v in VARIANT_CONFIG.items()})

    def config_for(self, variant: str) -> TrainConfig:
        raw = {**self.base, **self.per_variant.get(variant, {}), "variant": variant, "seed": self.seed}
        return TrainConfig.from_dict(raw)


def _pairs(examples):
    return [(e.infix, e.postfix) for e in examples]


def run_experiment(spec: ExperimentSpec, on_record: Callable[[dict], None] | None = None) -> dict:
    """Train each variant and return accuracies, histories and wall-clock seconds.

    Everything except the ``seconds`` entries is a deterministic function of
    ``spec``.
    """
    grammar = tasks.ArithGrammar(expand_prob=spec.expand_prob)
    iid = tasks.make_splits(tasks.SplitSpec("iid", sizes=spec.sizes, seed=spec.seed, grammar=grammar))
    ln = tasks.make_splits(tasks.SplitSpec("len", sizes=spec.sizes, seed=spec.seed, grammar=grammar))
    vocab = Vocab(tasks.VOCAB)
    results = {"spec": asdict(spec), "variants": {}}
    for variant in spec.variants:
        config = spec.config_for(variant)
        start = time.perf_counter()

        def record(rec, variant=variant):
            if on_record:
                on_record({"variant": variant, **rec})

        model, history = train(config, _pairs(iid["train"]), _pairs(iid["dev"]), vocab, record)
        trained = time.perf_counter() - start
        res = {
            "config": asdict(config),
            "history": history,
            "iid": evaluate(model, _pairs(iid["test"])),
            "len": evaluate(model, _pairs(ln["test"])),
        }
        res["seconds"] = {"train": trained, "total": time.perf_counter() - start}
        log.info("%s: iid=%.4f len=%.4f (%.0fs)", variant, res["iid"], res["len"], res["seconds"]["total"])
        results["variants"][variant] = res
    return results


def deterministic_view(results: dict) -> str:
    """Canonical JSON of ``results`` without the timing entries."""
    strip = {
        "spec": results["spec"],
        "variants": {k: {kk: vv for kk, vv in v.items() if kk != "seconds"} for k, v in results["variants"].items()},
    }
    return json.dumps(strip, sort_keys=True)
