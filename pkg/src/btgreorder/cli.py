"""Command-line entry point: ``btgreorder <subcommand> [flags]``.

Payloads (JSON, JSON lines, counts) go to stdout or to ``--out``; logs and
diagnostics go to stderr.  Exit status is 2 for flag errors, 1 when an input
breaks a contract (bad JSON, unknown token, chart too long, ...), 0 otherwise.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import btg, inference, model, perm_core, tasks

DEFAULT_SEED = 1234

log = logging.getLogger("btgreorder")


class ContractError(Exception):
    pass


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text + "\n")


def _pcfg(args) -> btg.PcfgChart:
    return btg.wcfg_to_pcfg(btg.load_weights(args.weights))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_marginal(args) -> None:
    g = _pcfg(args)
    result = inference.marginal(g, max_length=args.max_length)
    _emit(result.to_json(), args.out)
    if args.plot:
        from .plotting import plot_matrix

        plot_matrix(result.entries, args.plot, title=f"expected permutation, n={g.n}")
        log.info("wrote %s", args.plot)


def cmd_map(args) -> None:
    g = _pcfg(args)
    tree, prob = inference.map_derivation(g)
    payload = {
        "tree": perm_core.tree_to_json(tree),
        "perm": perm_core.perm_matrix_to_json(perm_core.tree_to_matrix(tree)),
        "prob": prob,
    }
    _emit(payload, args.out)


def cmd_sample(args) -> None:
    g = _pcfg(args)
    rng = np.random.default_rng(args.seed)
    if args.method == "ancestral":
        tree = inference.ancestral_sample(g, rng)
        payload = {
            "tree": perm_core.tree_to_json(tree),
            "hard": perm_core.perm_matrix_to_json(perm_core.tree_to_matrix(tree)),
            "seed": args.seed,
        }
    else:
        payload = inference.gumbel_sample(g, rng, args.temperature, seed=args.seed, max_length=args.max_length).to_json()
    _emit(payload, args.out)


def cmd_enumerate(args) -> None:
    n = args.n
    if n < 1:
        raise ContractError("--n must be >= 1")
    trees = perm_core.enumerate_trees(n)
    separable = len({perm_core.tree_to_perm(t) for t in trees})
    lines = [f"trees={len(trees)} separable={separable}"]
    if args.list:
        lines += [json.dumps(perm_core.tree_to_json(t)) for t in trees]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_gradcheck(args) -> None:
    modes = model.GRADCHECK_MODES if args.mode == "all" else (args.mode,)
    worst = model.pipeline_gradcheck(args.n, args.trials, args.seed, modes=modes, h=args.step)
    _emit({"n": args.n, "trials": args.trials, "step": args.step, "max_rel_error": worst, "overall": max(worst.values())}, args.out)


def cmd_gen_arith(args) -> None:
    if args.count < 1:
        raise ContractError("--count must be >= 1")
    held_out = args.held_out if args.held_out is not None else max(1, args.count // 5)
    spec = tasks.SplitSpec(
        kind=args.split,
        sizes={"train": args.count, "dev": held_out, "test": held_out},
        seed=args.seed,
        grammar=tasks.ArithGrammar(expand_prob=args.expand_prob),
    )
    paths = tasks.write_splits(args.out_dir, tasks.make_splits(spec))
    _emit({"split": args.split, "seed": args.seed, "expand_prob": args.expand_prob, "files": paths}, None)


def _load_config(args) -> model.TrainConfig:
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ContractError("config must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    raw.setdefault("seed", DEFAULT_SEED)
    if args.variant:
        raw["variant"] = args.variant
    return model.TrainConfig.from_dict(raw)


def _split_path(data_dir: str, name: str) -> str:
    path = os.path.join(data_dir, f"{name}.tsv")
    if not os.path.exists(path):
        raise ContractError(f"missing {path}")
    return path


def cmd_train(args) -> None:
    config = _load_config(args)
    train_pairs = tasks.read_tsv(_split_path(args.data_dir, "train"))
    dev_path = os.path.join(args.data_dir, "dev.tsv")
    dev_pairs = tasks.read_tsv(dev_path) if os.path.exists(dev_path) else []
    vocab = model.Vocab(tasks.VOCAB) if args.arith_vocab else None
    os.makedirs(args.out_dir, exist_ok=True)
    metrics_path = os.path.join(args.out_dir, "metrics.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as metrics:

        def record(rec):
            line = json.dumps(rec)
            metrics.write(line + "\n")
            metrics.flush()
            sys.stdout.write(line + "\n")

        trained, history = model.train(config, train_pairs, dev_pairs, vocab, record)
    ckpt = os.path.join(args.out_dir, "model.json")
    model.save_checkpoint(ckpt, trained, config)
    log.info("wrote %s and %s", ckpt, metrics_path)
    if not args.no_plot:
        from .plotting import plot_learning_curve

        png = os.path.join(args.out_dir, "learning_curve.png")
        plot_learning_curve(history, png, title=config.variant)
        log.info("wrote %s", png)


def cmd_eval(args) -> None:
    trained = model.load_checkpoint(args.checkpoint)
    pairs = tasks.read_tsv(args.data)
    preds = [model.predict_tokens(trained, src) for src, _ in pairs]
    hits = sum(p == tuple(tgt) for p, (_, tgt) in zip(preds, pairs))
    if args.predictions:
        tasks_lines = tasks.format_tsv((src, p) for (src, _), p in zip(pairs, preds))
        with open(args.predictions, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(tasks_lines)
    _emit({"data": args.data, "count": len(pairs), "exact_match": hits / len(pairs) if pairs else 0.0}, args.out)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="btgreorder", description="BTG separable-permutation inference and training")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def chart_cmd(name, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--weights", required=True, help="RuleWeightChart JSON")
        c.add_argument("--out", help="write the JSON result here instead of stdout")
        c.add_argument("--seed", type=int, default=DEFAULT_SEED)
        c.add_argument("--max-length", type=int, default=inference.MAX_MARGINAL_LENGTH)
        return c

    c = chart_cmd("marginal", "expected permutation matrix")
    c.add_argument("--plot", help="also render a heatmap PNG here")
    c.set_defaults(func=cmd_marginal)

    c = chart_cmd("map", "most probable derivation")
    c.set_defaults(func=cmd_map)

    c = chart_cmd("sample", "draw one derivation")
    c.add_argument("--method", choices=("gumbel", "ancestral"), default="gumbel")
    c.add_argument("--temperature", type=_positive_float, default=inference.DEFAULT_TEMPERATURE)
    c.set_defaults(func=cmd_sample)

    c = sub.add_parser("enumerate", help="count (and optionally list) all BTG trees of a length")
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--list", action="store_true", help="one tree JSON per line after the counts")
    c.add_argument("--out")
    c.add_argument("--seed", type=int, default=DEFAULT_SEED, help="unused; accepted for uniformity")
    c.set_defaults(func=cmd_enumerate)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    c.add_argument("--n", type=int, default=6)
    c.add_argument("--trials", type=int, default=5)
    c.add_argument("--mode", choices=(*model.GRADCHECK_MODES, "all"), default="all")
    c.add_argument("--step", type=_positive_float, default=model.GRADCHECK_STEP)
    c.add_argument("--seed", type=int, default=DEFAULT_SEED)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("gen-arith", help="write train/dev/test TSV splits")
    c.add_argument("--split", choices=("iid", "len"), required=True)
    c.add_argument("--count", type=int, default=tasks.DESK_SIZES["train"], help="training examples")
    c.add_argument("--held-out", type=int, help="dev and test size each (default count // 5)")
    c.add_argument("--seed", type=int, default=DEFAULT_SEED)
    c.add_argument("--expand-prob", type=float, default=tasks.ArithGrammar().expand_prob)
    c.add_argument("--out-dir", required=True)
    c.set_defaults(func=cmd_gen_arith)

    c = sub.add_parser("train", help="train a model from TSV splits")
    c.add_argument("--data-dir", required=True, help="directory holding train.tsv and optionally dev.tsv")
    c.add_argument("--config", help="TrainConfig JSON")
    c.add_argument("--variant", choices=model.VARIANTS)
    c.add_argument("--seed", type=int, help=f"overrides the config seed (default {DEFAULT_SEED})")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--arith-vocab", action="store_true", help="use the fixed arithmetic vocabulary")
    c.add_argument("--no-plot", action="store_true")
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("eval", help="exact-match accuracy of a checkpoint on a TSV file")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--predictions", help="write predicted TSV here")
    c.add_argument("--seed", type=int, default=DEFAULT_SEED, help="unused; prediction is deterministic")
    c.add_argument("--out")
    c.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        args.func(args)
    except (ContractError, ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
