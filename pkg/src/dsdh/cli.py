"""Command-line entry point.

Every command prints a one-line JSON summary on success and exits 0.  On
failure it prints ``{"error": <type>, "message": <text>}`` to stderr and exits
with status 1.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import ConfigError
from .experiments import DEFAULT_SEEDS, SUITES, ablate, stats, synth
from .scenes import SynthConfig
from .training import evaluate, train


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _synth_config(path) -> SynthConfig:
    """Accept either a bare synthetic-data section or a full experiment config."""
    if path is None:
        return SynthConfig()
    doc = _read_json(path)
    synth_keys = {f.name for f in dataclasses.fields(SynthConfig)}
    if doc and set(doc) <= synth_keys:
        try:
            return SynthConfig.from_dict(doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    config = ExperimentConfig.from_dict(doc)
    if config.data.synth is None:
        raise ConfigError(f"{path}: config has no data.synth section")
    return config.data.synth


def _experiment_config(path) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def cmd_synth(args) -> dict:
    config = _synth_config(args.config)
    out = synth(config, args.out)
    return {"dataset": str(out), "scenes": config.scenes}


def cmd_train(args) -> dict:
    result = train(_experiment_config(args.config), out_dir=args.out)
    return {
        "out": str(args.out),
        "mean_ap": result.report.mean_ap if result.report else None,
        "final_loss": result.record.epochs[-1]["total"] if result.record.epochs else None,
    }


def cmd_eval(args) -> dict:
    config = load_config(args.config) if args.config else None
    if args.workers is not None:
        from .training import load_head

        config = config or load_head(args.checkpoint)[1]
        config = config.replace(eval=dataclasses.replace(config.eval, workers=args.workers))
    report = evaluate(args.checkpoint, args.data, config=config)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(report.to_csv())
    return {"report": str(args.report), "mean_ap": report.mean_ap}


def cmd_ablate(args) -> dict:
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else DEFAULT_SEEDS
    result = ablate(args.suite, _experiment_config(args.config), seeds, out_dir=args.out)
    return {"table": str(Path(args.out) / f"{args.suite}.csv"), "rows": [r.row.label for r in result.rows]}


def cmd_stats(args) -> dict:
    result = stats(args.checkpoint, args.data, args.out, bin_width=args.bin_width)
    return {"out": str(args.out), "summary": {f"{c}/{p}": v for (c, p), v in result.summary().items()}}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsdh", description="Detection-head laboratory.")
    parser.add_argument("--log-level", default="WARNING", help="python logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset container")
    p.add_argument("--config", help="JSON file: synthetic-data section or full experiment config")
    p.add_argument("--out", required=True, help="output .npz path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a head and evaluate it on the test split")
    p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset container")
    p.add_argument("--report", required=True, help="output CSV")
    p.add_argument("--config", help="override evaluation settings; architecture must match")
    p.add_argument("--workers", type=int, help="evaluate scenes on this many threads")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=sorted(SUITES))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="base experiment config JSON")
    p.add_argument("--seeds", help="comma-separated seeds (default 7,8,9,10,11)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats", help="offset statistics before and after the first refinement step")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--bin-width", type=float, default=0.5)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a machine-readable error
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
