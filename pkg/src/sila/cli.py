"""Command-line entry point: ``sila <subcommand> [--config FILE] [--out DIR] ...``.

On failure the last line on stderr is ``error: <category>: <message>`` and the
exit status is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data_io, experiments
from .autodiff import NonFiniteError, ShapeError
from .dynamic_eval import BudgetProfile, budgeted_curve, evaluate_anytime
from .experiments import ExperimentConfig
from .models import MultiExitSpec, load_parameters

EXIT_CODES = {"config": 2, "data": 3, "numeric": 4, "io": 5, "internal": 1}

SUBCOMMAND_KIND = {
    "train-pair": "pair_ab",
    "train-dynamic": "multi_exit",
    "probe-robustness": "robustness_probe",
    "dump-features": "feature_dump",
}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    common.add_argument("--seeds", type=_ints, help="comma-separated seeds, e.g. 1,2,3")
    common.add_argument("--experiment", choices=experiments.KINDS, help="experiment kind")
    common.add_argument("--budgets", type=_floats, help="comma-separated compute budgets")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sila", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/validation/test CSVs")
    sub.add_parser("train-pair", parents=[common], help="A/B pair training over all arms")
    sub.add_parser("train-dynamic", parents=[common], help="multi-exit training + evaluation curves")
    for name, what in (
        ("eval-anytime", "anytime curve of a multi-exit checkpoint"),
        ("eval-budgeted", "budgeted-batch curve of a multi-exit checkpoint"),
        ("probe-robustness", "parameter-noise NLL probe"),
        ("dump-features", "penultimate-layer feature CSV"),
    ):
        p = sub.add_parser(name, parents=[common], help=what)
        p.add_argument("--checkpoint", type=Path, help="parameter checkpoint (.npz)")
    sub.add_parser("run", parents=[common], help="run the experiment kind named in the config")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    kind = args.experiment or SUBCOMMAND_KIND.get(args.command)
    if kind is not None:
        cfg = replace(cfg, experiment=kind)
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(args.seeds))
    if args.budgets:
        cfg = replace(cfg, budgets=tuple(args.budgets))
    return cfg


def _need_checkpoint(args):
    if args.checkpoint is None:
        raise ValueError(f"{args.command} needs --checkpoint")
    return load_parameters(args.checkpoint)


def _multi_exit_checkpoint(args):
    params = _need_checkpoint(args)
    if not isinstance(params.spec, MultiExitSpec):
        raise ValueError(f"{args.checkpoint} is not a multi-exit checkpoint")
    return params


def run(args) -> None:
    cfg = load_config(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "gen-data":
        for ds in experiments.load_data(cfg.data):
            data_io.save_dataset_csv(ds, out / f"{ds.split}.csv")
    elif cmd == "train-pair" or (cmd == "run" and cfg.experiment == "pair_ab"):
        experiments.run_pair_ab(cfg, out)
    elif cmd == "train-dynamic" or (cmd == "run" and cfg.experiment == "multi_exit"):
        experiments.run_multi_exit(cfg, out)
    elif cmd == "eval-anytime":
        params = _multi_exit_checkpoint(args)
        _, _, test = experiments.load_data(cfg.data)
        profile = BudgetProfile.for_spec(params.spec)
        budgets = cfg.budgets or experiments.default_budgets(profile)
        evaluate_anytime(params, test, profile, budgets).to_csv(out / "anytime.csv")
    elif cmd == "eval-budgeted":
        params = _multi_exit_checkpoint(args)
        _, val, test = experiments.load_data(cfg.data)
        profile = BudgetProfile.for_spec(params.spec)
        budgets = cfg.budgets or experiments.default_budgets(profile)
        curve, profiles = budgeted_curve(params, val, test, profile, budgets)
        curve.to_csv(out / "budgeted.csv")
        thresholds = {repr(b): p.thresholds.tolist() for b, p in zip(sorted(budgets), profiles)}
        (out / "thresholds.json").write_text(json.dumps(thresholds, indent=2, sort_keys=True) + "\n")
    elif cmd == "probe-robustness" or (cmd == "run" and cfg.experiment == "robustness_probe"):
        if getattr(args, "checkpoint", None) is not None:
            params = _need_checkpoint(args)
            train, _, _ = experiments.load_data(cfg.data)
            report = experiments.run_robustness_probe(
                params, train, cfg.sigmas, cfg.repetitions, cfg.seeds[0]
            )
            report.to_csv(out / "robustness.csv")
        else:
            experiments.run_robustness_experiment(cfg, out)
    elif cmd == "dump-features" or (cmd == "run" and cfg.experiment == "feature_dump"):
        if getattr(args, "checkpoint", None) is not None:
            params = _need_checkpoint(args)
            _, _, test = experiments.load_data(cfg.data)
            experiments.run_feature_dump(params, test, out / "features.csv")
        else:
            experiments.run_feature_experiment(cfg, out)
    else:  # pragma: no cover - argparse restricts commands
        raise ValueError(f"unknown command {cmd!r}")


def _category(exc: BaseException) -> str:
    if isinstance(exc, data_io.IdxError):
        return "data"
    if isinstance(exc, NonFiniteError):
        return "numeric"
    if isinstance(exc, (ValueError, TypeError, KeyError, ShapeError, json.JSONDecodeError)):
        return "config"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except Exception as exc:  # noqa: BLE001 - reported as a one-line category
        cat = _category(exc)
        msg = " ".join(str(exc).split())
        print(f"error: {cat}: {msg}", file=sys.stderr)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
