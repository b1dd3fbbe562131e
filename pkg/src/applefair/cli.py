"""Command line entry point: ``applefair {synth,train,evaluate,sweep-beta,report}``.

Failures exit with status 1 and print one line to stderr::

    applefair: error: <category>: <message>
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .data import DatasetError
from .synth import SynthConfig, generate
from .training import TrainingDivergedError
from .workflow import (
    KINDS,
    CheckpointError,
    ConfigError,
    RunExistsError,
    evaluate_runs,
    load_config,
    report_from_files,
    sweep_beta,
    train_runs,
)

logger = logging.getLogger("applefair")

ERROR_CATEGORIES = [
    (ConfigError, "config"),
    (RunExistsError, "exists"),
    (CheckpointError, "checkpoint"),
    (DatasetError, "data"),
    (TrainingDivergedError, "training"),
]


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--profile", choices=["full", "desk"], help="default set (full: 256px, full U-Net)")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-root", help=f"overrides config and ${'APPLEFAIR_OUTPUT_ROOT'}")
    p.add_argument("--device")


def _overrides(args: argparse.Namespace) -> dict:
    over: dict = {}
    for key in ("seed", "output_root", "device"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    train = {}
    for key in ("epochs", "batch_size", "alpha", "beta"):
        v = getattr(args, key, None)
        if v is not None:
            train[key] = v
    if train:
        over["train"] = train
    data = {}
    if getattr(args, "data", None) and args.command in ("train", "sweep-beta"):
        data["root"] = args.data
    if getattr(args, "attribute", None):
        data["attribute"] = args.attribute
    if data:
        over["data"] = data
    return over


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="applefair", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--balance", type=float, dest="attribute_balance")
    p.add_argument("--gap", type=float, dest="difficulty_gap")
    p.add_argument("--shape", choices=["ellipse", "blob"])
    p.add_argument("--synth-attribute", choices=["sex", "age"], dest="synth_attribute")

    p = sub.add_parser("train", help="train baseline / apple / rs / sm runs")
    _common(p)
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--name", required=True)
    p.add_argument("--data")
    p.add_argument("--attribute")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--baseline", nargs="+", default=[], help="baseline run dir(s) for apple")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--method", help="label used in tables")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("evaluate", help="evaluate run directories on their test split")
    _common(p)
    p.add_argument("runs", nargs="+")
    p.add_argument("--data", help="evaluate on this dataset instead of the run's own")
    p.add_argument("--attribute")
    p.add_argument("--out", required=True)
    p.add_argument("--ddof", choices=["sample", "population"], default="sample")

    p = sub.add_parser("sweep-beta", help="APPLE runs over several beta values")
    _common(p)
    p.add_argument("--baseline", nargs="+", required=True)
    p.add_argument("--betas", type=_floats, default=[0.1, 1.0, 5.0])
    p.add_argument("--name", default="sweep")
    p.add_argument("--data")
    p.add_argument("--attribute")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--no-probe", action="store_true")
    p.add_argument("--parallel", type=int, default=1, help="train the beta values in N processes")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("report", help="merge report.json files into one table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--ddof", choices=["sample", "population"], default="sample")
    return parser


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.profile, _overrides(args))
    synth = cfg.synth
    changes = {k: getattr(args, k) for k in ("n_samples", "attribute_balance", "difficulty_gap", "shape")
               if getattr(args, k) is not None}
    if args.synth_attribute:
        changes["attribute"] = args.synth_attribute
    if args.seed is not None:
        changes["seed"] = args.seed
    try:
        synth = SynthConfig(**{**asdict(synth), **changes})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds = generate(synth, args.out)
    print(json.dumps({"out": args.out, "n_samples": len(ds), "counts": ds.counts()}))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.profile, _overrides(args))
    dirs = train_runs(args.kind, cfg, args.name, args.repeats, args.baseline, args.force,
                      method=args.method)
    for d in dirs:
        print(d)
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.profile, _overrides(args))
    report = evaluate_runs(args.runs, args.out, cfg, args.data, args.attribute, args.ddof)
    table = Path(args.out) / "table.txt"
    if table.is_file():
        print(table.read_text(), end="")
    else:
        print(json.dumps(report["runs"], indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.profile, _overrides(args))
    summary = sweep_beta(cfg, args.baseline, args.betas, args.name, args.repeats, args.force,
                         probe=not args.no_probe, parallel=args.parallel)
    out = Path(cfg.output_root) / "sweeps" / args.name / "sweep_summary.txt"
    print(out.read_text(), end="")
    return 0 if summary else 1


def cmd_report(args) -> int:
    table = report_from_files(args.reports, args.out, args.ddof)
    print(table.to_text(), end="")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate,
            "sweep-beta": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - single-line error contract
        category = next((c for t, c in ERROR_CATEGORIES if isinstance(exc, t)), "internal")
        if args.verbose:
            logger.exception("command failed")
        msg = str(exc).replace("\n", " ")
        print(f"applefair: error: {category}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
