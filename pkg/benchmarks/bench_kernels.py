"""Time every hot kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--end-to-end]

``--end-to-end`` also times one training epoch and one LLC estimate in
subprocesses with and without ``LIPENS_DISABLE_NUMBA=1``.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from lipens._kernels import numba_kernels, numpy_kernels


def cases(rng):
    acts = rng.normal(size=(128, 256))
    grads = rng.normal(size=(128, 256))
    logits = rng.normal(scale=5, size=(500, 10))
    labels = rng.integers(0, 10, size=500)
    imgs = rng.random((500, 784))
    cand = imgs + rng.normal(scale=0.02, size=imgs.shape)
    w = rng.normal(size=(256, 784))
    v0 = rng.normal(size=784)
    n_params = 784 * 256 + 256
    p, g = rng.normal(size=n_params), rng.normal(size=n_params)

    def adam(k):
        m, v, q = np.zeros(n_params), np.zeros(n_params), p.copy()
        return lambda: k.adam_step(q, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 3)

    return {
        "relu_forward 128x256": lambda k: lambda: k.relu_forward(acts),
        "relu_backward 128x256": lambda k: lambda: k.relu_backward(grads, acts),
        "softmax_xent 500x10": lambda k: lambda: k.softmax_xent(logits, labels),
        "linf_project 500x784": lambda k: lambda: k.linf_project(cand, imgs, 0.01, 0.0, 1.0),
        "row_l1_distance 500x784": lambda k: lambda: k.row_l1_distance(cand, imgs),
        "adam_step 200k params": adam,
        "power_iteration 256x784": lambda k: lambda: k.power_iteration(w, v0, 1e-10, 10_000),
    }


E2E = """
import time, numpy as np
from lipens import data, nn, BACKEND
from lipens.lipschitz import AscentConfig, empirical_llc
from lipens.training import TrainConfig, train
ds = data.make_blobs(4096, seed=0)
x = np.random.default_rng(0).random((4096, 64))
ds = data.LabeledDataset(x, ds.labels, 2)
net = nn.build_architecture("fnn4", 64, 2, np.random.default_rng(0), hidden=128)
train(net, ds.head(64), TrainConfig(epochs=1, batch_size=64))  # warm-up
t = time.perf_counter(); train(net, ds, TrainConfig(epochs=1, batch_size=64)); a = time.perf_counter() - t
t = time.perf_counter(); empirical_llc(net, x[:50], 0.1, AscentConfig(restarts=4)); b = time.perf_counter() - t
print(BACKEND, f"{a:.3f}", f"{b:.3f}")
"""


def end_to_end() -> None:
    print("\nend to end (seconds)            train epoch    LLC (50 anchors)")
    for disable in ("0", "1"):
        env = dict(os.environ, LIPENS_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        backend, a, b = out.stdout.split()
        print(f"  {backend:<30}{a:>11}{b:>16}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--end-to-end", action="store_true")
    args = parser.parse_args(argv)
    if numba_kernels is None:
        print("numba is not installed; only the numpy backend is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy (ms)':>12}{'numba (ms)':>12}{'speed-up':>10}")
    for name, make in cases(rng).items():
        times = {}
        for label, k in (("numpy", numpy_kernels), ("numba", numba_kernels)):
            fn = make(k)
            fn()  # warm-up / JIT compile
            times[label] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<28}{times['numpy']:>12.3f}{times['numba']:>12.3f}{times['numpy'] / times['numba']:>9.2f}x")
    if args.end_to_end:
        end_to_end()
    return 0


if __name__ == "__main__":
    sys.exit(main())
