"""Desk-scale experiment drivers: A/B pair training, multi-exit, probes, dumps.

Every driver writes CSV/JSON under an output directory, one subdirectory per
seed, so independent seeds never touch the same file.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data_io
from .data_io import BlobSpec, Dataset
from .dynamic_eval import BudgetProfile, budgeted_curve, evaluate_anytime
from .models import (
    MultiExitSpec,
    NetworkSpec,
    ParameterSet,
    penultimate_features,
    perturb_parameters,
    save_parameters,
)
from .training import (
    TrainConfig,
    TrainReport,
    init_seeds,
    nll,
    train_multi_exit,
    train_pair,
)

log = logging.getLogger(__name__)

KINDS = ("pair_ab", "multi_exit", "robustness_probe", "feature_dump")
PAIR_ARMS = ("independent", "sila", "dml", "sila_dml")
EXIT_ARMS = ("sila", "independent")


@dataclass
class DataConfig:
    source: str = "blobs"
    blobs: BlobSpec = field(default_factory=BlobSpec)
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    validation_fraction: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        source = d.pop("source", "blobs")
        mnist_keys = {f.name for f in fields(cls)} - {"source", "blobs"}
        mnist = {k: d.pop(k) for k in list(d) if k in mnist_keys}
        if "split" in d:
            d["split"] = tuple(d["split"])
        return cls(source=source, blobs=BlobSpec(**d), **mnist)


@dataclass
class ExperimentConfig:
    """One JSON document describing an experiment; CLI flags override fields."""

    experiment: str = "pair_ab"
    data: DataConfig = field(default_factory=DataConfig)
    hidden: tuple[int, ...] = (16, 16)
    hidden2: tuple[int, ...] | None = None
    blocks: tuple[tuple[int, ...], ...] = ((16,), (16,), (16,))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=40, batch_size=128))
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    arms: tuple[str, ...] | None = None
    budgets: tuple[float, ...] | None = None
    sigmas: tuple[float, ...] = (0.0, 0.01, 0.05, 0.1)
    repetitions: int = 20

    def __post_init__(self):
        if self.experiment not in KINDS:
            raise ValueError(f"experiment must be one of {KINDS}, got {self.experiment!r}")
        if not self.seeds:
            raise ValueError("seed list must be non-empty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "data" in d:
            d["data"] = DataConfig.from_dict(d["data"])
        if "train" in d:
            d["train"] = TrainConfig(**{"epochs": 40, "batch_size": 128, **d["train"]})
        for key in ("hidden", "hidden2", "seeds", "arms", "budgets", "sigmas"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if "blocks" in d:
            d["blocks"] = tuple(tuple(b) for b in d["blocks"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def load_data(cfg: DataConfig) -> tuple[Dataset, Dataset, Dataset]:
    """``(train, validation, test)`` for the configured source."""
    if cfg.source == "blobs":
        return data_io.generate_blobs(cfg.blobs)
    if cfg.source == "mnist":
        paths = (cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels)
        if any(p is None for p in paths):
            raise ValueError("mnist source needs train/test image and label paths")
        full = data_io.load_mnist_idx(cfg.train_images, cfg.train_labels, "train")
        test = data_io.load_mnist_idx(cfg.test_images, cfg.test_labels, "test")
        n_val = int(round(cfg.validation_fraction * len(full)))
        order = np.random.default_rng(cfg.blobs.seed).permutation(len(full))
        return (
            full.subset(order[n_val:], "train"),
            full.subset(order[:n_val], "validation"),
            test,
        )
    raise ValueError(f"unknown data source {cfg.source!r}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _seed_dir(out: Path, seed: int) -> Path:
    d = out / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- pair A/B ---------------------------------------------------------------

SUMMARY_METRICS = ("top1", "topk", "best", "nll")


def _report_metrics(rep: TrainReport) -> dict[str, float]:
    f = rep.final
    return {"top1": f.top1, "topk": f.topk, "best": rep.best_top1, "nll": f.nll}


def write_summary(rows: dict[tuple[str, str], list[dict]], path: Path) -> list[dict]:
    """Median and mean of each metric across seeds, one row per (arm, net)."""
    out = []
    for (arm, net), per_seed in rows.items():
        row = {"arm": arm, "net": net, "n_seeds": len(per_seed)}
        for m in SUMMARY_METRICS:
            vals = np.array([r[m] for r in per_seed])
            row[m] = float(np.median(vals))
            row[f"{m}_mean"] = float(np.mean(vals))
        out.append(row)
    cols = ["arm", "net", *SUMMARY_METRICS, *(f"{m}_mean" for m in SUMMARY_METRICS), "n_seeds"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in out:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return out


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k not in ("arm", "net"):
                r[k] = int(v) if k == "n_seeds" else float(v)
    return rows


def run_pair_ab(cfg: ExperimentConfig, out) -> list[dict]:
    """Train every arm for every seed from identical initializations and batches."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train, _, test = load_data(cfg.data)
    spec1 = NetworkSpec(train.dim, cfg.hidden, train.n_classes)
    spec2 = NetworkSpec(train.dim, cfg.hidden2 if cfg.hidden2 is not None else cfg.hidden, train.n_classes)
    arms = cfg.arms or PAIR_ARMS
    rows: dict[tuple[str, str], list[dict]] = {(a, n): [] for a in arms for n in ("net1", "net2")}
    for seed in cfg.seeds:
        d = _seed_dir(out, seed)
        s1, s2 = init_seeds(seed, 2)
        for arm in arms:
            tc = replace(cfg.train, loss_mode=arm, seed=seed, beta=cfg.train.beta or (1.0, 1.0))
            log.info("pair_ab seed=%s arm=%s", seed, arm)
            p1, p2, r1, r2 = train_pair(spec1, spec2, train, test, tc, seeds=(s1, s2))
            for net, p, r in (("net1", p1, r1), ("net2", p2, r2)):
                r.to_csv(d / f"{arm}_{net}.csv")
                save_parameters(p, d / f"{arm}_{net}.npz")
                rows[(arm, net)].append(_report_metrics(r))
    return write_summary(rows, out / "summary.csv")


# -- robustness probe -------------------------------------------------------


@dataclass(frozen=True)
class RobustnessEntry:
    sigma: float
    mean_delta_nll: float
    std_delta_nll: float


@dataclass
class RobustnessReport:
    entries: list[RobustnessEntry]
    repetitions: int
    base_nll: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sigma", "delta_nll_mean", "delta_nll_std", "repetitions", "base_nll"])
            for e in self.entries:
                w.writerow([repr(e.sigma), repr(e.mean_delta_nll), repr(e.std_delta_nll),
                            self.repetitions, repr(self.base_nll)])

    @classmethod
    def from_csv(cls, path) -> "RobustnessReport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        entries = [RobustnessEntry(float(r[0]), float(r[1]), float(r[2])) for r in rows]
        return cls(entries, int(rows[0][3]), float(rows[0][4]))


def run_robustness_probe(
    params: ParameterSet, data: Dataset, sigmas: Sequence[float], repetitions: int, seed: int
) -> RobustnessReport:
    """Mean increase of NLL on ``data`` after Gaussian parameter noise.

    Draw ``r`` uses the same underlying normals for every sigma, so curves
    across sigma are compared on common random numbers.  Draws come in
    antithetic pairs (``+eps``, ``-eps``), which cancels the first-order
    gradient term from the mean; an odd final draw is unpaired.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    base = nll(params, data)
    rep_seeds = init_seeds(seed, (repetitions + 1) // 2)
    draws = [(rep_seeds[r // 2], r % 2 == 1) for r in range(repetitions)]
    entries = []
    for sigma in sorted(float(s) for s in sigmas):
        deltas = np.array([
            nll(perturb_parameters(params, sigma, s, anti), data) - base for s, anti in draws
        ])
        entries.append(RobustnessEntry(sigma, float(deltas.mean()), float(deltas.std())))
    return RobustnessReport(entries, repetitions, base)


def run_robustness_experiment(cfg: ExperimentConfig, out) -> dict[str, list[RobustnessReport]]:
    """Train independent and SiLa pairs per seed, then probe net 1 of each."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train, _, test = load_data(cfg.data)
    spec = NetworkSpec(train.dim, cfg.hidden, train.n_classes)
    arms = cfg.arms or ("independent", "sila")
    result: dict[str, list[RobustnessReport]] = {a: [] for a in arms}
    for seed in cfg.seeds:
        d = _seed_dir(out, seed)
        for arm in arms:
            tc = replace(cfg.train, loss_mode=arm, seed=seed, beta=cfg.train.beta or (1.0, 1.0))
            p1, _, r1, _ = train_pair(spec, spec, train, test, tc)
            r1.to_csv(d / f"{arm}_net1.csv")
            save_parameters(p1, d / f"{arm}_net1.npz")
            rep = run_robustness_probe(p1, train, cfg.sigmas, cfg.repetitions, seed)
            rep.to_csv(d / f"robustness_{arm}.csv")
            result[arm].append(rep)
    return result


# -- feature dump -----------------------------------------------------------


def run_feature_dump(params: ParameterSet, data: Dataset, path) -> None:
    """CSV of penultimate-layer features plus the label, one row per sample."""
    feats = penultimate_features(params, data.features).values
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(feats.shape[1])] + ["label"])
        for row, label in zip(feats, data.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def read_feature_dump(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    feats = np.array([[float(v) for v in r[:-1]] for r in rows])
    return feats, np.array([int(r[-1]) for r in rows])


def run_feature_experiment(cfg: ExperimentConfig, out) -> None:
    """Train independent and SiLa pairs and dump net 1's test-set features."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train, _, test = load_data(cfg.data)
    spec = NetworkSpec(train.dim, cfg.hidden, train.n_classes)
    for seed in cfg.seeds:
        d = _seed_dir(out, seed)
        for arm in cfg.arms or ("independent", "sila"):
            tc = replace(cfg.train, loss_mode=arm, seed=seed, beta=cfg.train.beta or (1.0, 1.0))
            p1, _, r1, _ = train_pair(spec, spec, train, test, tc)
            save_parameters(p1, d / f"{arm}_net1.npz")
            run_feature_dump(p1, test, d / f"features_{arm}.csv")


# -- multi-exit -------------------------------------------------------------


def default_budgets(profile: BudgetProfile, n: int = 5) -> list[float]:
    c = profile.cumulative_cost
    return [float(b) for b in np.linspace(c[0], c[-1], n)]


def run_multi_exit(cfg: ExperimentConfig, out, budgets: Sequence[float] | None = None) -> list[dict]:
    """Train the chain with SiLa coupling and with summed per-exit CE.

    Writes per-exit training reports, and anytime plus budgeted curves for
    both arms, under each seed directory; returns per-exit median accuracies.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train, val, test = load_data(cfg.data)
    spec = MultiExitSpec(train.dim, cfg.blocks, train.n_classes)
    profile = BudgetProfile.for_spec(spec)
    budgets = list(budgets or cfg.budgets or default_budgets(profile))
    arms = cfg.arms or EXIT_ARMS
    acc: dict[str, list[list[float]]] = {a: [] for a in arms}
    for seed in cfg.seeds:
        d = _seed_dir(out, seed)
        (init_seed,) = init_seeds(seed, 1)
        for arm in arms:
            tc = replace(cfg.train, loss_mode=arm, seed=seed)
            log.info("multi_exit seed=%s arm=%s", seed, arm)
            params, reports = train_multi_exit(spec, train, test, tc, seed=init_seed)
            save_parameters(params, d / f"{arm}.npz")
            for c, rep in enumerate(reports, start=1):
                rep.to_csv(d / f"{arm}_exit{c}.csv")
            evaluate_anytime(params, test, profile, budgets).to_csv(d / f"{arm}_anytime.csv")
            curve, profiles = budgeted_curve(params, val, test, profile, budgets)
            curve.to_csv(d / f"{arm}_budgeted.csv")
            _write_json(d / f"{arm}_thresholds.json", {
                repr(b): p.thresholds.tolist() for b, p in zip(sorted(budgets), profiles)
            })
            acc[arm].append([r.final.top1 for r in reports])
    rows = []
    for arm, per_seed in acc.items():
        a = np.array(per_seed)
        for c in range(spec.n_exits):
            rows.append({
                "arm": arm, "exit": c + 1,
                "top1": float(np.median(a[:, c])), "top1_mean": float(np.mean(a[:, c])),
                "n_seeds": len(per_seed),
            })
    with open(out / "exit_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["arm", "exit", "top1", "top1_mean", "n_seeds"])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows
