"""SGD with a multi-step schedule and the joint training loops."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .data_io import Dataset, batches
from .losses import LOSS_MODES, loss_for_mode, term_names
from .models import (
    MultiExitSpec,
    NetworkSpec,
    ParameterSet,
    build_network,
    forward,
    forward_multi_exit,
)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule and loss settings for one training run.

    ``beta=None`` means a weight of 1 for every group.  ``topk=None`` picks
    ``min(5, N - 1)``.
    """

    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    beta: tuple[float, ...] | None = None
    loss_mode: str = "sila"
    lambda_dml: float = 1.0
    momentum: float = 0.0
    seed: int = 0
    topk: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.beta is not None:
            object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("initial learning rate must be positive")
        if not 0 < self.lr_decay < 1:
            raise ValueError("lr_decay must lie in (0, 1)")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs or m < 0 for m in ms):
            raise ValueError(f"milestones must be strictly ascending and < epochs, got {ms}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.lambda_dml < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lambda_dml must be >= 0 and momentum in [0, 1)")

    def weights(self, n_groups: int) -> tuple[float, ...]:
        return self.beta if self.beta is not None else (1.0,) * n_groups

    def k_for(self, n_classes: int) -> int:
        return self.topk if self.topk is not None else min(5, n_classes - 1)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Initial rate times ``lr_decay`` per milestone already reached."""
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.lr * config.lr_decay**passed


def sgd_step(params: Sequence[ad.Tensor] | ParameterSet, lr: float) -> None:
    """In-place descent ``p -= lr * p.grad``; gradients are left as they are."""
    tensors = list(params)
    names = params.names() if isinstance(params, ParameterSet) else [str(i) for i in range(len(tensors))]
    for name, p in zip(names, tensors):
        if not np.all(np.isfinite(p.grad)):
            raise ad.NonFiniteError(f"non-finite gradient for parameter {name}")
    for p in tensors:
        p.values -= lr * p.grad


class SGD:
    """Plain SGD, with an optional heavy-ball momentum buffer."""

    def __init__(self, params: ParameterSet, momentum: float = 0.0):
        self.params = params
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.values) for p in params] if momentum else None

    def step(self, lr: float) -> None:
        if not self.momentum:
            sgd_step(self.params, lr)
            return
        for name, p in zip(self.params.names(), self.params):
            if not np.all(np.isfinite(p.grad)):
                raise ad.NonFiniteError(f"non-finite gradient for parameter {name}")
        for v, p in zip(self._velocity, self.params):
            v *= self.momentum
            v += p.grad
            p.values -= lr * v


# -- metrics and reports -----------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    top1: float
    topk: float
    nll: float


def evaluate_logits(z: np.ndarray, labels: np.ndarray, k: int) -> Metrics:
    """Top-1 and top-k accuracy in percent, and mean NLL."""
    labels = np.asarray(labels, dtype=np.int64)
    nll = float(np.mean(kernels.row_logsumexp(z) - z[np.arange(len(labels)), labels]))
    top1 = 100.0 * float(np.mean(kernels.topk_hits(z, labels, 1)))
    topk = 100.0 * float(np.mean(kernels.topk_hits(z, labels, k)))
    return Metrics(top1, topk, nll)


def evaluate(params: ParameterSet, data: Dataset, k: int) -> Metrics:
    return evaluate_logits(forward(params, data.features).values, data.labels, k)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_terms: tuple[float, ...]
    top1: float
    topk: float
    nll: float


@dataclass
class TrainReport:
    term_names: list[str]
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_top1(self) -> float:
        return max(r.top1 for r in self.records)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def columns(self) -> list[str]:
        return ["epoch", "lr", "loss_total", *(f"loss_{t}" for t in self.term_names), "top1", "topk", "nll"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for r in self.records:
                w.writerow(
                    [r.epoch, repr(r.lr), repr(r.loss_total), *map(repr, r.loss_terms),
                     repr(r.top1), repr(r.topk), repr(r.nll)]
                )

    @classmethod
    def from_csv(cls, path) -> "TrainReport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        names = [h[len("loss_"):] for h in header[3:-3]]
        report = cls(names)
        for row in rows[1:]:
            v = [float(x) for x in row]
            report.records.append(
                EpochRecord(int(row[0]), v[1], v[2], tuple(v[3:-3]), v[-3], v[-2], v[-1])
            )
        return report


# -- training loops ----------------------------------------------------------


def init_seeds(seed: int, count: int) -> list[int]:
    """Distinct per-network initialization seeds derived from one run seed."""
    return [int(np.random.SeedSequence([seed, k]).generate_state(1)[0]) for k in range(count)]


class _LossMeter:
    def __init__(self, n_terms: int):
        self.n = 0
        self.total = 0.0
        self.terms = np.zeros(n_terms)

    def add(self, total: ad.Tensor, terms: Sequence[ad.Tensor], size: int) -> None:
        self.n += size
        self.total += total.item() * size
        self.terms += np.array([t.item() for t in terms]) * size

    def means(self) -> tuple[float, tuple[float, ...]]:
        return self.total / self.n, tuple(float(t) for t in self.terms / self.n)


def train_pair(
    spec1: NetworkSpec,
    spec2: NetworkSpec,
    train: Dataset,
    test: Dataset,
    config: TrainConfig,
    seeds: tuple[int, int] | None = None,
) -> tuple[ParameterSet, ParameterSet, TrainReport, TrainReport]:
    """Train two networks from one joint loss per step (one backward pass).

    Both networks see the same shuffled batches; each starts from its own
    initialization seed (``init_seeds(config.seed, 2)`` unless given).
    """
    if spec1.n_classes != spec2.n_classes:
        raise ValueError(f"class counts differ: {spec1.n_classes} vs {spec2.n_classes}")
    if spec1.n_classes != train.n_classes:
        raise ValueError(f"networks predict {spec1.n_classes} classes, data has {train.n_classes}")
    s1, s2 = seeds if seeds is not None else init_seeds(config.seed, 2)
    nets = [build_network(spec1, s1), build_network(spec2, s2)]
    beta = config.weights(2)
    names = term_names(config.loss_mode, 2)
    reports = [TrainReport(names), TrainReport(names)]
    opts = [SGD(p, config.momentum) for p in nets]
    k = config.k_for(spec1.n_classes)

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        meter = _LossMeter(len(names))
        for idx in batches(len(train), config.batch_size, config.seed, epoch):
            x, y = train.features[idx], train.labels[idx]
            for p in nets:
                p.zero_grads()
            with ad.Tape():
                logits = [forward(p, x) for p in nets]
                total, terms = loss_for_mode(config.loss_mode, logits, y, beta, config.lambda_dml)
                ad.backward(total)
            for opt in opts:
                opt.step(lr)
            meter.add(total, terms, len(idx))
        loss_total, loss_terms = meter.means()
        for p, rep in zip(nets, reports):
            m = evaluate(p, test, k)
            rep.records.append(EpochRecord(epoch, lr, loss_total, loss_terms, m.top1, m.topk, m.nll))
    return nets[0], nets[1], reports[0], reports[1]


def train_single(
    spec: NetworkSpec, train: Dataset, test: Dataset, config: TrainConfig, seed: int
) -> tuple[ParameterSet, TrainReport]:
    """Plain cross-entropy training of one network (weight ``beta[0]``)."""
    params = build_network(spec, seed)
    beta = config.weights(2)[:1]
    report = TrainReport(["ce1"])
    opt = SGD(params, config.momentum)
    k = config.k_for(spec.n_classes)
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        meter = _LossMeter(1)
        for idx in batches(len(train), config.batch_size, config.seed, epoch):
            x, y = train.features[idx], train.labels[idx]
            params.zero_grads()
            with ad.Tape():
                total, terms = loss_for_mode("independent", [forward(params, x)], y, beta)
                ad.backward(total)
            opt.step(lr)
            meter.add(total, terms, len(idx))
        loss_total, loss_terms = meter.means()
        m = evaluate(params, test, k)
        report.records.append(EpochRecord(epoch, lr, loss_total, loss_terms, m.top1, m.topk, m.nll))
    return params, report


def evaluate_exits(params: ParameterSet, data: Dataset, k: int) -> list[Metrics]:
    return [evaluate_logits(z.values, data.labels, k) for z in forward_multi_exit(params, data.features)]


def train_multi_exit(
    spec: MultiExitSpec,
    train: Dataset,
    test: Dataset,
    config: TrainConfig,
    seed: int | None = None,
) -> tuple[ParameterSet, list[TrainReport]]:
    """Train every exit of a chain jointly.

    ``loss_mode='sila'`` couples the exits through one siamese softmax;
    ``'independent'`` sums each exit's own cross-entropy.
    """
    if config.loss_mode not in ("sila", "independent"):
        raise ValueError(f"multi-exit training supports 'sila' and 'independent', got {config.loss_mode!r}")
    if spec.n_classes != train.n_classes:
        raise ValueError(f"network predicts {spec.n_classes} classes, data has {train.n_classes}")
    C = spec.n_exits
    params = build_network(spec, seed if seed is not None else init_seeds(config.seed, 1)[0])
    beta = config.weights(C)
    names = term_names(config.loss_mode, C)
    reports = [TrainReport(names) for _ in range(C)]
    opt = SGD(params, config.momentum)
    k = config.k_for(spec.n_classes)
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        meter = _LossMeter(C)
        for idx in batches(len(train), config.batch_size, config.seed, epoch):
            x, y = train.features[idx], train.labels[idx]
            params.zero_grads()
            with ad.Tape():
                total, terms = loss_for_mode(config.loss_mode, forward_multi_exit(params, x), y, beta)
                ad.backward(total)
            opt.step(lr)
            meter.add(total, terms, len(idx))
        loss_total, loss_terms = meter.means()
        for rep, m in zip(reports, evaluate_exits(params, test, k)):
            rep.records.append(EpochRecord(epoch, lr, loss_total, loss_terms, m.top1, m.topk, m.nll))
    return params, reports


def nll(params: ParameterSet, data: Dataset) -> float:
    """Mean negative log-likelihood of ``data`` under a plain network."""
    z = forward(params, data.features).values
    return float(np.mean(kernels.row_logsumexp(z) - z[np.arange(len(data)), data.labels]))


__all__ = [
    "TrainConfig",
    "TrainReport",
    "EpochRecord",
    "Metrics",
    "SGD",
    "lr_at",
    "sgd_step",
    "evaluate",
    "evaluate_logits",
    "evaluate_exits",
    "init_seeds",
    "train_pair",
    "train_single",
    "train_multi_exit",
    "nll",
]
