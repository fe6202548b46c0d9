"""Compare the numba and pure-numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--epochs 3]

Kernel timings import both implementations side by side.  The training
epoch timing runs once per backend in a subprocess, since the backend is
chosen by ``SILA_DISABLE_NUMBA`` at import time.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from sila import _kernels_numba, _kernels_numpy

EPOCH_SNIPPET = """
import json, time
from sila import kernels
from sila.data_io import BlobSpec, generate_blobs
from sila.models import NetworkSpec
from sila.training import TrainConfig, train_pair
train, _, test = generate_blobs(BlobSpec(n_classes=4, samples_per_class=1000, center_spread=2.5))
spec = NetworkSpec(2, (16, 16), 4)
cfg = TrainConfig(epochs=1, batch_size=128, loss_mode="sila", seed=1)
train_pair(spec, spec, train, test, cfg)  # warm-up, includes any JIT compile
cfg = TrainConfig(epochs={epochs}, batch_size=128, loss_mode="sila", seed=1)
t0 = time.perf_counter()
train_pair(spec, spec, train, test, cfg)
print(json.dumps({{"backend": kernels.BACKEND, "seconds_per_epoch": (time.perf_counter() - t0) / {epochs}}}))
"""


def bench_kernels(repeat: int) -> list[tuple[str, str, float, float]]:
    rng = np.random.default_rng(0)
    rows = []
    for b, m in ((128, 8), (4096, 8), (4096, 200)):
        z = rng.normal(0, 3, size=(b, m))
        labels = rng.integers(m, size=b)
        for name, call in (
            ("row_logsumexp", lambda k: k.row_logsumexp(z)),
            ("row_softmax", lambda k: k.row_softmax(z)),
            ("topk_hits", lambda k: k.topk_hits(z, labels, 5)),
        ):
            call(_kernels_numba)  # compile outside the timing
            t_nb = min(timeit.repeat(lambda: call(_kernels_numba), number=10, repeat=repeat)) / 10
            t_np = min(timeit.repeat(lambda: call(_kernels_numpy), number=10, repeat=repeat)) / 10
            rows.append((name, f"{b}x{m}", t_nb, t_np))
    conf = rng.uniform(0.25, 1.0, size=(20_000, 3))
    th = np.array([0.9, 0.7])
    _kernels_numba.assign_exits(conf, th)
    t_nb = min(timeit.repeat(lambda: _kernels_numba.assign_exits(conf, th), number=10, repeat=repeat)) / 10
    t_np = min(timeit.repeat(lambda: _kernels_numpy.assign_exits(conf, th), number=10, repeat=repeat)) / 10
    rows.append(("assign_exits", "20000x3", t_nb, t_np))
    return rows


def bench_epoch(disable_numba: bool, epochs: int) -> dict:
    env = dict(os.environ, SILA_DISABLE_NUMBA="1" if disable_numba else "0")
    out = subprocess.run(
        [sys.executable, "-c", EPOCH_SNIPPET.format(epochs=epochs)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=3)
    args = ap.parse_args(argv)

    print(f"{'kernel':<14} {'shape':>9} {'numba us':>10} {'numpy us':>10} {'speedup':>8}")
    for name, shape, t_nb, t_np in bench_kernels(args.repeat):
        print(f"{name:<14} {shape:>9} {t_nb * 1e6:10.1f} {t_np * 1e6:10.1f} {t_np / t_nb:8.2f}")
    print()
    for disable in (False, True):
        r = bench_epoch(disable, args.epochs)
        print(f"SiLa pair epoch, 2800 samples, {r['backend']:>5}: {r['seconds_per_epoch'] * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
