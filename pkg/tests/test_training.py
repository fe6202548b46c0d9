import threading

import numpy as np
import pytest

from sila import autodiff as ad
from sila.autodiff import Tape, Tensor
from sila.data_io import BlobSpec, Dataset, generate_blobs
from sila.losses import cross_entropy, group_loss, make_siamese, sila_loss
from sila.models import MultiExitSpec, NetworkSpec, build_network, forward, forward_multi_exit
from sila.training import (
    TrainConfig,
    TrainReport,
    evaluate,
    init_seeds,
    lr_at,
    sgd_step,
    train_multi_exit,
    train_pair,
    train_single,
)

from conftest import numeric_grad, rel_error


def test_lr_schedule_paper_defaults():
    cfg = TrainConfig(epochs=260, lr=0.1, milestones=(30, 55), lr_decay=0.1)
    assert lr_at(cfg, 0) == 0.1
    assert lr_at(cfg, 29) == 0.1
    assert lr_at(cfg, 30) == pytest.approx(0.01, rel=1e-15)
    assert lr_at(cfg, 55) == pytest.approx(0.001, rel=1e-15)


def test_lr_constant_without_milestones():
    cfg = TrainConfig(epochs=20, lr=0.1)
    assert {lr_at(cfg, e) for e in range(20)} == {0.1}


@pytest.mark.parametrize("kw", [
    dict(milestones=(5, 5)), dict(milestones=(7, 3)), dict(milestones=(20,)),
    dict(batch_size=0), dict(lr=0.0), dict(lr_decay=1.0), dict(loss_mode="bogus"),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(epochs=20, **kw)


def test_sgd_step_single_descent():
    w = Tensor([1.0], requires_grad=True)
    w.grad[:] = 2.0
    sgd_step([w], 0.1)
    assert w.values[0] == pytest.approx(0.8, abs=1e-15)
    np.testing.assert_array_equal(w.grad, [2.0])


def test_sgd_zero_lr_no_change():
    p = build_network(NetworkSpec(2, (3,), 2), 0)
    before = p.copy()
    for t in p:
        t.grad[...] = 1.0
    sgd_step(p, 0.0)
    assert p.equals(before)


def test_sgd_rejects_non_finite_grad():
    p = build_network(NetworkSpec(2, (3,), 2), 0)
    p["layer1.bias"].grad[0] = np.nan
    with pytest.raises(ad.NonFiniteError, match="layer1.bias"):
        sgd_step(p, 0.1)


def test_sgd_quadratic_bowl_strictly_decreases(rng):
    A = rng.normal(size=(4, 4))
    H = A @ A.T + np.eye(4)
    target = rng.normal(size=4)
    w = Tensor(rng.normal(size=4), requires_grad=True)
    lr = 1.0 / np.linalg.eigvalsh(H).max()

    def loss():
        d = ad.sub(w, target)
        return ad.scale(ad.sum_(ad.mul(d, ad.reshape(ad.matmul(ad.reshape(d, (1, 4)), H), (4,)))), 0.5)

    values = []
    for _ in range(100):
        w.zero_grad()
        with Tape():
            v = loss()
            ad.backward(v)
        values.append(v.item())
        sgd_step([w], lr)
    assert all(b < a for a, b in zip(values, values[1:]))


def test_joint_gradient_matches_finite_differences(rng):
    spec = NetworkSpec(3, (5,), 4)
    p1, p2 = build_network(spec, 1), build_network(spec, 2)
    assert p1.n_scalars() + p2.n_scalars() <= 200
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 4, size=6)

    def build():
        return sila_loss([forward(p1, x), forward(p2, x)], y, [1.0, 0.7])

    for p in (p1, p2):
        p.zero_grads()
    with Tape():
        ad.backward(build())
    for p in (p1, p2):
        for t in p:
            assert rel_error(t.grad, numeric_grad(lambda: build().item(), t.values)) < 1e-4


@pytest.fixture(scope="module")
def blobs():
    return generate_blobs(BlobSpec(n_classes=3, samples_per_class=60, center_spread=3.0,
                                   within_std=0.6, dim=2, seed=3))


def test_independent_mode_equals_solo_training(blobs):
    train, _, test = blobs
    spec = NetworkSpec(2, (8,), 3)
    cfg = TrainConfig(epochs=5, batch_size=16, loss_mode="independent", seed=4)
    s1, s2 = init_seeds(4, 2)
    p1, p2, r1, r2 = train_pair(spec, spec, train, test, cfg)
    solo1, solo_r1 = train_single(spec, train, test, cfg, s1)
    solo2, _ = train_single(spec, train, test, cfg, s2)
    assert p1.equals(solo1) and p2.equals(solo2)
    assert [r.top1 for r in r1.records] == [r.top1 for r in solo_r1.records]


def test_training_is_deterministic(blobs):
    train, _, test = blobs
    spec = NetworkSpec(2, (8,), 3)
    cfg = TrainConfig(epochs=4, batch_size=16, loss_mode="sila_dml", seed=2)
    a = train_pair(spec, spec, train, test, cfg)
    b = train_pair(spec, spec, train, test, cfg)
    assert a[0].equals(b[0]) and a[1].equals(b[1])
    assert a[2] == b[2] and a[3] == b[3]


def test_concurrent_runs_match_sequential(blobs):
    train, _, test = blobs
    spec = NetworkSpec(2, (8,), 3)
    cfgs = [TrainConfig(epochs=3, batch_size=16, seed=s) for s in (1, 2, 3)]
    sequential = [train_pair(spec, spec, train, test, c) for c in cfgs]
    out = [None] * 3

    def job(i):
        out[i] = train_pair(spec, spec, train, test, cfgs[i])

    threads = [threading.Thread(target=job, args=(i,)) for i in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for seq, par in zip(sequential, out):
        assert seq[0].equals(par[0]) and seq[1].equals(par[1])


def test_class_count_mismatch(blobs):
    train, _, test = blobs
    with pytest.raises(ValueError):
        train_pair(NetworkSpec(2, (4,), 3), NetworkSpec(2, (4,), 4), train, test, TrainConfig(epochs=1))


def _separable():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-3, 0.5, size=(60, 2)), rng.normal(3, 0.5, size=(60, 2))])
    y = np.repeat([0, 1], 60)
    return Dataset(x, y, 2, "train")


def test_sila_pair_fits_separable_blobs():
    data = _separable()
    spec = NetworkSpec(2, (8,), 2)
    cfg = TrainConfig(epochs=20, batch_size=16, loss_mode="sila", beta=(1, 1), seed=0)
    p1, p2, _, _ = train_pair(spec, spec, data, data, cfg)
    assert evaluate(p1, data, 1).top1 == 100.0
    assert evaluate(p2, data, 1).top1 == 100.0
    baseline, _ = train_single(spec, data, data, TrainConfig(epochs=20, batch_size=16, seed=0), 1)
    assert evaluate(baseline, data, 1).top1 == 100.0


def test_report_invariants_and_csv_round_trip(blobs, tmp_path):
    train, _, test = blobs
    spec = NetworkSpec(2, (8,), 3)
    _, _, r1, _ = train_pair(spec, spec, train, test, TrainConfig(epochs=5, batch_size=16, loss_mode="dml"))
    assert r1.best_top1 == max(r.top1 for r in r1.records) >= r1.final.top1
    assert r1.columns() == ["epoch", "lr", "loss_total", "loss_ce1", "loss_ce2",
                            "loss_kl12", "loss_kl21", "top1", "topk", "nll"]
    r1.to_csv(tmp_path / "r.csv")
    assert TrainReport.from_csv(tmp_path / "r.csv") == r1


# -- multi-exit --------------------------------------------------------------


def test_multi_exit_single_block_equals_plain_training(blobs):
    train, _, test = blobs
    cfg = TrainConfig(epochs=4, batch_size=16, loss_mode="sila", seed=1)
    me, reports = train_multi_exit(MultiExitSpec(2, ((8, 8),), 3), train, test, cfg, seed=5)
    plain, report = train_single(NetworkSpec(2, (8, 8), 3), train, test, cfg, 5)
    for a, b in zip(me, plain):
        np.testing.assert_array_equal(a.values, b.values)
    assert [r.top1 for r in reports[0].records] == [r.top1 for r in report.records]


def test_multi_exit_weight_masking(rng, blobs):
    spec = MultiExitSpec(2, ((5,), (5,), (5,)), 3)
    p = build_network(spec, 0)
    x = rng.normal(size=(7, 2))
    y = rng.integers(0, 3, size=7)
    outs = forward_multi_exit(p, x)
    masked = sila_loss(outs, y, [0, 0, 1]).item()
    assert masked == group_loss(make_siamese(outs), y, 3).item()


def test_multi_exit_gradient_matches_finite_differences(rng):
    spec = MultiExitSpec(2, ((3,), (3,), (2,)), 3)
    p = build_network(spec, 1)
    x = rng.normal(size=(5, 2))
    y = rng.integers(0, 3, size=5)

    def build():
        return sila_loss(forward_multi_exit(p, x), y, [1, 1, 1])

    p.zero_grads()
    with Tape():
        ad.backward(build())
    for t in p:
        assert rel_error(t.grad, numeric_grad(lambda: build().item(), t.values)) < 1e-4


def test_multi_exit_all_exits_beat_chance(blobs):
    train, _, test = blobs
    spec = MultiExitSpec(2, ((16,), (16,), (16,)), 3)
    _, reports = train_multi_exit(spec, train, test, TrainConfig(epochs=20, batch_size=16, seed=0))
    for rep in reports:
        assert rep.final.top1 > 100.0 * 1.5 / 3


def test_multi_exit_rejects_dml(blobs):
    train, _, test = blobs
    with pytest.raises(ValueError):
        train_multi_exit(MultiExitSpec(2, ((4,), (4,)), 3), train, test, TrainConfig(loss_mode="dml"))


def test_single_net_ce_helper_agrees(rng):
    p = build_network(NetworkSpec(2, (4,), 3), 0)
    x = rng.normal(size=(5, 2))
    y = rng.integers(0, 3, size=5)
    assert cross_entropy(forward(p, x), y).item() == sila_loss([forward(p, x)], y, [1]).item()
