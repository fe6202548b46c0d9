"""Anytime prediction and budgeted batch classification for multi-exit nets.

Exit indices in the public API are 1-based (exit 1 is the shallowest).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .data_io import Dataset
from .models import MultiExitSpec, ParameterSet, forward_multi_exit

# Threshold that no softmax confidence can reach.
NEVER = math.nextafter(1.0, 2.0)


@dataclass(frozen=True)
class BudgetProfile:
    cumulative_cost: np.ndarray
    thresholds: np.ndarray | None = None

    def __post_init__(self):
        cost = np.asarray(self.cumulative_cost, dtype=np.float64)
        if cost.ndim != 1 or cost.size < 1 or np.any(cost <= 0) or np.any(np.diff(cost) <= 0):
            raise ValueError(f"cumulative costs must be positive and strictly ascending, got {cost}")
        object.__setattr__(self, "cumulative_cost", cost)
        if self.thresholds is not None:
            t = np.asarray(self.thresholds, dtype=np.float64)
            if t.shape != (cost.size - 1,):
                raise ValueError(f"need {cost.size - 1} thresholds, got shape {t.shape}")
            object.__setattr__(self, "thresholds", t)

    @classmethod
    def for_spec(cls, spec: MultiExitSpec) -> "BudgetProfile":
        return cls(spec.exit_costs())

    @property
    def n_exits(self) -> int:
        return self.cumulative_cost.size


@dataclass(frozen=True)
class CurvePoint:
    budget: float
    top1: float
    mean_cost: float
    exit_histogram: tuple[int, ...]


@dataclass
class EvalCurve:
    points: list[CurvePoint] = field(default_factory=list)

    def to_csv(self, path) -> None:
        n = len(self.points[0].exit_histogram) if self.points else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["budget", "top1", "mean_cost", *(f"exit{c}" for c in range(1, n + 1))])
            for p in self.points:
                w.writerow([repr(p.budget), repr(p.top1), repr(p.mean_cost), *p.exit_histogram])

    @classmethod
    def from_csv(cls, path) -> "EvalCurve":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls([
            CurvePoint(float(r[0]), float(r[1]), float(r[2]), tuple(int(v) for v in r[3:]))
            for r in rows[1:]
        ])


@dataclass(frozen=True)
class ExitOutputs:
    """Per-exit predictions and max-softmax confidences, shape ``samples x C``."""

    predictions: np.ndarray
    confidence: np.ndarray
    labels: np.ndarray

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels[:, None]


def exit_outputs(params: ParameterSet, data: Dataset) -> ExitOutputs:
    logits = [z.values for z in forward_multi_exit(params, data.features)]
    preds = np.stack([z.argmax(axis=1) for z in logits], axis=1)
    conf = np.stack([kernels.row_softmax(z).max(axis=1) for z in logits], axis=1)
    return ExitOutputs(preds, conf, data.labels)


def anytime_select(profile: BudgetProfile, budget: float) -> int:
    """Deepest exit whose cumulative cost fits ``budget``; exit 1 if none does."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    affordable = np.flatnonzero(profile.cumulative_cost <= budget)
    return int(affordable[-1]) + 1 if affordable.size else 1


def _curve_point(budget, exits0, outs: ExitOutputs, profile: BudgetProfile) -> CurvePoint:
    rows = np.arange(exits0.size)
    acc = 100.0 * float(np.mean(outs.correct[rows, exits0]))
    cost = float(np.mean(profile.cumulative_cost[exits0]))
    hist = tuple(int(v) for v in np.bincount(exits0, minlength=profile.n_exits))
    return CurvePoint(float(budget), acc, cost, hist)


def evaluate_anytime(params: ParameterSet, data: Dataset, profile: BudgetProfile, budgets) -> EvalCurve:
    """Accuracy of the exit chosen by :func:`anytime_select` at each budget."""
    outs = exit_outputs(params, data)
    curve = EvalCurve()
    for b in sorted(budgets):
        exits0 = np.full(len(data), anytime_select(profile, b) - 1, dtype=np.int64)
        curve.points.append(_curve_point(b, exits0, outs, profile))
    return curve


def exit_fractions(t: float, n_exits: int) -> np.ndarray:
    """Geometric exit distribution ``f_k ~ r^(k-1)`` with ``r = t / (1 - t)``.

    ``t=0`` sends everything to exit 1, ``t=1`` everything to the last exit,
    ``t=0.5`` is uniform.  Written as ``t^(k-1) (1-t)^(C-k)`` to stay finite
    at both ends.
    """
    k = np.arange(n_exits)
    w = t**k * (1.0 - t) ** (n_exits - 1 - k)
    return w / w.sum()


def _exit_counts(t: float, n_samples: int, n_exits: int) -> np.ndarray:
    # Flooring the cumulative share keeps the counts monotone in t.
    cum = np.floor(n_samples * np.cumsum(exit_fractions(t, n_exits)) + 1e-9).astype(np.int64)
    cum[-1] = n_samples
    return np.diff(np.concatenate([[0], cum]))


def _thresholds_for_counts(conf: np.ndarray, counts: np.ndarray) -> np.ndarray:
    n, c = conf.shape
    remaining = np.ones(n, dtype=bool)
    thresholds = np.full(c - 1, NEVER)
    for k in range(c - 1):
        idx = np.flatnonzero(remaining)
        take = min(int(counts[k]), idx.size)
        if take == 0:
            continue
        # Stable sort on negated confidence: ties resolve by sample order.
        order = idx[np.argsort(-conf[idx, k], kind="stable")]
        thresholds[k] = conf[order[take - 1], k]
        remaining &= ~(conf[:, k] >= thresholds[k])
    return thresholds


def replay_policy(confidence: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """0-based exit of every sample under the threshold policy."""
    return kernels.assign_exits(confidence, thresholds)


def calibrate_thresholds(
    params: ParameterSet,
    validation: Dataset,
    profile: BudgetProfile,
    budget: float,
    iterations: int = 60,
) -> BudgetProfile:
    """Confidence thresholds whose replay on ``validation`` costs at most ``budget``.

    The exit distribution is geometric in the exit index with one free ratio,
    found by bisection; thresholds are the matching confidence quantiles among
    the samples still running at each exit.
    """
    cost = profile.cumulative_cost
    if budget < cost[0]:
        raise ValueError(f"budget {budget} is below the cheapest exit ({cost[0]})")
    conf = exit_outputs(params, validation).confidence
    return _calibrate_from_confidence(conf, profile, budget, iterations)


def _calibrate_from_confidence(conf, profile, budget, iterations=60) -> BudgetProfile:
    cost = profile.cumulative_cost
    n, c = conf.shape

    def solve(t):
        th = _thresholds_for_counts(conf, _exit_counts(t, n, c))
        realized = float(np.mean(cost[replay_policy(conf, th)]))
        return th, realized

    lo_th, _ = solve(0.0)
    hi_th, hi_cost = solve(1.0)
    if hi_cost <= budget:
        return replace(profile, thresholds=hi_th)
    lo, hi = 0.0, 1.0
    best = lo_th
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        th, realized = solve(mid)
        if realized <= budget:
            lo, best = mid, th
        else:
            hi = mid
    return replace(profile, thresholds=best)


def budgeted_assign(outs: ExitOutputs, profile: BudgetProfile) -> np.ndarray:
    if profile.thresholds is None:
        raise ValueError("profile has no thresholds; calibrate it first")
    return replay_policy(outs.confidence, profile.thresholds)


def evaluate_budgeted(params: ParameterSet, data: Dataset, profiles, budgets) -> EvalCurve:
    """Replay each calibrated profile on ``data``; one point per budget."""
    profiles = list(profiles)
    budgets = list(budgets)
    if len(profiles) != len(budgets):
        raise ValueError("need one calibrated profile per budget")
    outs = exit_outputs(params, data)
    curve = EvalCurve()
    for b, prof in sorted(zip(budgets, profiles), key=lambda bp: bp[0]):
        curve.points.append(_curve_point(b, budgeted_assign(outs, prof), outs, prof))
    return curve


def budgeted_curve(params, validation: Dataset, test: Dataset, profile: BudgetProfile, budgets):
    """Calibrate on ``validation`` per budget, then evaluate on ``test``."""
    budgets = sorted(budgets)
    profiles = [calibrate_thresholds(params, validation, profile, b) for b in budgets]
    return evaluate_budgeted(params, test, profiles, budgets), profiles
