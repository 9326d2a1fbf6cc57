"""Command-line driver.

Config is a JSON file matching ExperimentConfig.to_dict(); missing keys fall
back to defaults. Every value can be overridden on the command line with
``--set dotted.path=value`` (values parse as JSON, bare words as strings).

Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .data import generate_corpus, load_corpus, save_corpus, swap_corrupt
from .errors import ConfigError, NonFiniteError
from .harness import (
    EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, ExperimentConfig, bench_overhead,
    evaluate, export_heatmap, grid_clamp, grid_condition, sweep_noise, train,
    weight_histogram, write_metrics_csv,
)
from .loss import CalConfig
from .model import ContrastCondition, load_checkpoint


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(config_dict: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set needs key=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    keys = path.split(".")
    node = config_dict
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {path!r} crosses a non-object value")
    node[keys[-1]] = _parse_value(raw)


def _load_experiment(args) -> ExperimentConfig:
    config_dict: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            config_dict = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    for assignment in getattr(args, "set", None) or []:
        _apply_override(config_dict, assignment)
    if getattr(args, "seed", None) is not None:
        config_dict.setdefault("optim", {})["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        config_dict.setdefault("optim", {})["steps"] = args.steps
    if getattr(args, "output_dir", None) is not None:
        config_dict["output_dir"] = args.output_dir
    return ExperimentConfig.from_dict(config_dict)


def _parse_condition(text: str) -> ContrastCondition:
    try:
        if text == "full_drop":
            return ContrastCondition.full_drop()
        if ":" in text:
            kind, value = text.split(":", 1)
            if kind == "patch_mask":
                return ContrastCondition.patch_mask(float(value))
            if kind == "gaussian_perturb":
                return ContrastCondition.gaussian_perturb(float(value))
    except ValueError as exc:
        raise ConfigError(f"bad condition value in {text!r}: {exc}") from exc
    raise ConfigError(
        f"condition must be full_drop, patch_mask:R or gaussian_perturb:S, got {text!r}")


def _cal_from_flags(args) -> CalConfig:
    try:
        beta = math.inf if str(args.beta).lower() == "inf" else float(args.beta)
    except ValueError as exc:
        raise ConfigError(f"bad beta value {args.beta!r}") from exc
    cfg = CalConfig(alpha=args.alpha, beta=beta, window=args.window,
                    condition=_parse_condition(args.condition))
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calign",
        description="Contrastive token re-weighting workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", "-c", help="JSON experiment config")
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="override a config value (dotted path)")
        p.add_argument("--seed", type=int, help="override optim.seed")

    p = sub.add_parser("gen-data", help="generate a corpus file")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--contradiction-rate", type=float, default=0.5)
    p.add_argument("--swap-ratio", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train", choices=["train", "eval"])

    p = sub.add_parser("train", help="run one training experiment")
    add_config_args(p)
    p.add_argument("--steps", type=int, help="override optim.steps")
    p.add_argument("--output-dir", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--condition", default="full_drop")
    p.add_argument("--out", help="write a one-row metrics CSV here")

    p = sub.add_parser("sweep-noise", help="caption-swap noise sweep")
    add_config_args(p)
    p.add_argument("--ratios", default="0,0.1,0.2,0.3")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--output-dir", required=True)

    p = sub.add_parser("grid-clamp", help="clamp-bound grid")
    add_config_args(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--output-dir", required=True)

    p = sub.add_parser("grid-condition", help="contrast-condition grid")
    add_config_args(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--output-dir", required=True)

    p = sub.add_parser("heatmap", help="per-token weight report for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", default="5")
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--condition", default="full_drop")
    p.add_argument("--out-json")
    p.add_argument("--out-csv")

    p = sub.add_parser("histogram", help="logit-difference histogram over samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--condition", default="full_drop")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", default="5")
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--out-json")
    p.add_argument("--out-csv")

    p = sub.add_parser("bench", help="per-step overhead of the extra pass")
    add_config_args(p)
    p.add_argument("--trials", type=int, default=50)
    return parser


def _cmd_gen_data(args) -> int:
    corpus = generate_corpus(args.size, args.contradiction_rate, args.seed,
                             split=args.split)
    if args.swap_ratio > 0.0:
        corpus = swap_corrupt(corpus, args.swap_ratio,
                              np.random.default_rng(args.seed + 1))
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} samples to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_experiment(args)
    _, records = train(config)
    final = records[-1]
    print(f"done: step={final.step} loss={final.train_loss:.4f} "
          f"acc_correlated={final.acc_correlated:.4f}")
    print(f"outputs in {config.output_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.data)
    record = evaluate(params, corpus, condition=_parse_condition(args.condition))
    print(json.dumps({k: getattr(record, k) for k in (
        "acc_overall", "acc_correlated", "acc_contradictory_true",
        "delta_mean_correlated", "delta_mean_irrelevant",
        "delta_mean_contradictory", "auc_correlated_contradictory")}, indent=2))
    if args.out:
        write_metrics_csv([record], args.out)
    return EXIT_OK


def _cmd_sweep_noise(args) -> int:
    config = _load_experiment(args)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    rows = sweep_noise(config, ratios=ratios, n_seeds=args.seeds,
                       out_dir=args.output_dir)
    for row in rows:
        print(row)
    return EXIT_OK


def _cmd_grid_clamp(args) -> int:
    config = _load_experiment(args)
    rows = grid_clamp(config, n_seeds=args.seeds, out_dir=args.output_dir)
    for row in rows:
        print(row)
    return EXIT_OK


def _cmd_grid_condition(args) -> int:
    config = _load_experiment(args)
    rows = grid_condition(config, n_seeds=args.seeds, out_dir=args.output_dir)
    for row in rows:
        print(row)
    return EXIT_OK


def _cmd_heatmap(args) -> int:
    params = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.data)
    if not 0 <= args.index < len(corpus):
        raise ConfigError(f"sample index {args.index} out of range for corpus "
                          f"of {len(corpus)} samples")
    report, _ = export_heatmap(
        params, corpus.samples[args.index], _cal_from_flags(args),
        json_path=args.out_json, csv_path=args.out_csv,
        sample_index=args.index)
    for entry in report.entries:
        delta = "" if entry.delta is None else f"{entry.delta:+.3f}"
        pooled = "" if entry.pooled is None else f"{entry.pooled:.3f}"
        print(f"{entry.position:3d} {entry.token:12s} {entry.kind or '-':14s} "
              f"delta={delta:9s} pooled={pooled}")
    return EXIT_OK


def _cmd_histogram(args) -> int:
    params = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.data)
    result = weight_histogram(
        params, corpus, _cal_from_flags(args), n_samples=args.n_samples,
        seed=args.seed, json_path=args.out_json, csv_path=args.out_csv)
    print(json.dumps({k: result[k] for k in (
        "n_samples", "n_tokens", "fraction_below_5", "ci95")}, indent=2))
    return EXIT_OK


def _cmd_bench(args) -> int:
    config = _load_experiment(args)
    result = bench_overhead(config, trials=args.trials)
    print(json.dumps(result, indent=2))
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep-noise": _cmd_sweep_noise,
    "grid-clamp": _cmd_grid_clamp,
    "grid-condition": _cmd_grid_condition,
    "heatmap": _cmd_heatmap,
    "histogram": _cmd_histogram,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
