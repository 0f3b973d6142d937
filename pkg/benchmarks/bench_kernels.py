#!/usr/bin/env python3
"""
Kernel benchmark: numba @njit kernels against the pure-numpy fallback.

Each backend runs in its own interpreter with ``VASIM_BACKEND`` set, the same
way a user selects it.  Timings are the best of ``--repeats`` runs after one
warm-up call (which also pays the numba compile cost).

Run:
  python benchmarks/bench_kernels.py [--size 128] [--batch 16] [--repeats 5]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeats: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_worker(size: int, batch: int, repeats: int) -> dict:
    from vasim import cnn, kernels

    rng = np.random.default_rng(0)
    model = cnn.init_model(size, seed=0)
    x = rng.standard_normal((batch, 1, size, size)).astype(np.float32)
    h1 = kernels.conv_forward(x, model.conv1_w, model.conv1_b)
    h2 = kernels.conv_forward(h1, model.conv2_w, model.conv2_b)
    dy2 = rng.standard_normal(h2.shape).astype(np.float32)
    pooled, idx = kernels.maxpool_forward(h2)
    dyp = rng.standard_normal(pooled.shape).astype(np.float32)
    images = rng.random((batch, size, size)).astype(np.float32)
    labels = rng.integers(0, 8, batch)
    cases = {
        "conv1_forward": lambda: kernels.conv_forward(x, model.conv1_w, model.conv1_b),
        "conv2_forward": lambda: kernels.conv_forward(h1, model.conv2_w, model.conv2_b),
        "conv2_backward": lambda: kernels.conv_backward(h1, model.conv2_w, dy2),
        "maxpool_forward": lambda: kernels.maxpool_forward(h2),
        "maxpool_backward": lambda: kernels.maxpool_backward(dyp, idx, h2.shape),
        "train_step": lambda: cnn.backprop_gradients(model, images, labels, 1e-4),
    }
    return {"backend": kernels.get_backend(),
            "times": {name: _best(fn, repeats) for name, fn in cases.items()}}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    ap.add_argument("--size", type=int, default=128, help="image side in px (128 desk, 512 full)")
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.worker:
        print(json.dumps(run_worker(args.size, args.batch, args.repeats)))
        return

    results = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, VASIM_BACKEND=backend)
        proc = subprocess.run([sys.executable, __file__, "--worker", "--size", str(args.size),
                               "--batch", str(args.batch), "--repeats", str(args.repeats)],
                              env=env, capture_output=True, text=True, check=True)
        results[backend] = json.loads(proc.stdout.strip().splitlines()[-1])["times"]

    print(f"image {args.size} px, batch {args.batch}, best of {args.repeats}")
    print(f"{'kernel':<18}{'numpy [ms]':>12}{'numba [ms]':>12}{'speed-up':>10}")
    for name in results["numpy"]:
        t_np, t_nb = results["numpy"][name], results["numba"][name]
        print(f"{name:<18}{t_np * 1e3:>12.1f}{t_nb * 1e3:>12.1f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
