"""Compare the numba and numpy kernel backends, then time full training steps.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 20] [--steps 5] [--no-train]

Kernel timings call the ``nb_*`` and ``np_*`` functions directly on
shapes used by the default model (N=2, C=16, 60x120 features, 9 anchors
per cell). Training steps run in a subprocess per backend so the
``GLA_DISABLE_NUMBA`` flag takes effect at import time.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

from gla import kernels as K


def _best(fn, repeat: int) -> float:
    fn()  # warm-up, triggers numba compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def _boxes(r, n, size):
    xy = r.random((n, 2)) * size
    wh = r.random((n, 2)) * size / 4 + 1.0
    return np.concatenate([xy, xy + wh], axis=1)


def kernel_cases():
    r = np.random.default_rng(0)
    n, c, h, w, a, k = 2, 16, 60, 120, 9, 4
    x = r.standard_normal((n, c, h, w)).astype(np.float32)
    rb, cb = K.partition_bounds(h, 5), K.partition_bounds(w, 10)
    v = r.standard_normal((n, c, 5, 10)).astype(np.float32)
    gamma, beta = np.ones(c, np.float32), np.zeros(c, np.float32)
    _, xhat, _, _, invstd = K.np_bn_forward(x, gamma, beta, 1e-5)
    logits = r.standard_normal((n, a * k, h, w)).astype(np.float32)
    targets = (r.random(logits.shape) < 0.01).astype(np.float32)
    weights = np.ones_like(logits)
    pred = r.standard_normal((n, a * 4, h, w)).astype(np.float32)
    labels = r.integers(-2, k, size=(n, h * w * a)).astype(np.int64)
    deltas = r.standard_normal((n, h * w * a, 4)).astype(np.float32)
    anchors, gts = _boxes(r, h * w * a, 120.0), _boxes(r, 8, 120.0)
    dets = _boxes(r, 300, 60.0)
    return {
        "partition_sum": ((x, rb, cb), {}),
        "partition_expand": ((v, rb, cb), {}),
        "box3_sum": ((x,), {}),
        "bn_forward": ((x, gamma, beta, 1e-5), {}),
        "bn_backward": ((x, xhat, gamma, invstd), {}),
        "focal": ((logits, targets, weights, 0.25, 2.0), {}),
        "huber": ((pred, pred * 0.5, weights[:, : a * 4], 1.0), {}),
        "head_targets": ((labels, deltas, h, w, a, k, -2), {}),
        "iou_matrix": ((anchors, gts), {}),
        "nms_sorted": ((dets, 0.7), {}),
    }


def bench_kernels(repeat: int) -> list:
    rows = []
    for name, (args, kw) in kernel_cases().items():
        t_nb = _best(lambda: getattr(K, f"nb_{name}")(*args, **kw), repeat)
        t_np = _best(lambda: getattr(K, f"np_{name}")(*args, **kw), repeat)
        rows.append((name, t_nb * 1e3, t_np * 1e3, t_np / t_nb))
    return rows


TRAIN_SNIPPET = """
import sys, time
from gla.config import ExperimentConfig
from gla.experiment import generate, train
from gla.kernels import BACKEND
root, steps = sys.argv[1], int(sys.argv[2])
cfg = ExperimentConfig(frames_per_cell=2, test_fraction=0.5, steps=steps + 1, lr=1e-3)
generate(cfg, root + "/data")
train(cfg.replace(steps=1), root + "/data", root + "/warm")
t = time.perf_counter()
train(cfg, root + "/data", root + "/ck")
print(BACKEND, (time.perf_counter() - t) / cfg.steps)
"""


def bench_train(steps: int) -> list:
    rows = []
    for flag in ("0", "1"):
        with tempfile.TemporaryDirectory() as tmp:
            env = dict(os.environ, GLA_DISABLE_NUMBA=flag)
            out = subprocess.run(
                [sys.executable, "-c", TRAIN_SNIPPET, tmp, str(steps)], env=env, capture_output=True, text=True, check=True
            )
            backend, sec = out.stdout.split()[-2:]
            rows.append((backend, float(sec)))
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--no-train", action="store_true")
    args = p.parse_args(argv)

    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1
    print(f"{'kernel':<18} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, a, b, s in bench_kernels(args.repeat):
        print(f"{name:<18} {a:>10.3f} {b:>10.3f} {s:>7.2f}x")
    if not args.no_train:
        print()
        print(f"{'backend':<18} {'s / train step (GLA, batch 2)':>30}")
        for backend, sec in bench_train(args.steps):
            print(f"{backend:<18} {sec:>30.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
