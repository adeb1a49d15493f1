"""Time the correlation kernels under each available backend.

    python benchmarks/bench_kernels.py [--size 64] [--width 16] [--repeat 20]

Also times one full forward/backward pass of a 4-layer hyperbolic network,
which is what a training iteration costs.
"""
import argparse
import time

import numpy as np

from distseg import _backend
from distseg import tensor as T
from distseg.network import backward, forward, init_params


def timeit(fn, repeat):
    fn()  # warm up
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    c, n = args.width, args.size
    x = rng.standard_normal((c, n, n))
    K = T.KernelBank(rng.standard_normal((c, c, 3, 3)) / (3 * np.sqrt(c)))
    d = rng.standard_normal((3, n, n))
    P = init_params("hyperbolic", 3, width=c, n_layers=4, seed=0)

    def step():
        logits, probs, traj = forward(P, d)
        backward(P, traj, probs - 0.5)

    cases = [
        ("conv2d", lambda: T.conv2d(x, K)),
        ("conv2d_transpose", lambda: T.conv2d_transpose(x, K)),
        ("weight_grad", lambda: T.conv2d_weight_grad(x, x, 3, 3)),
        ("train_step", step),
    ]
    previous = _backend.NAME
    names = sorted(_backend.BACKENDS)
    results = {}
    try:
        for b in names:
            _backend.use(b)
            for label, fn in cases:
                results[b, label] = timeit(fn, args.repeat)
    finally:
        _backend.use(previous)

    print(f"{c} channels, {n}x{n}, best of {args.repeat} (ms)")
    print(f"{'kernel':18s}" + "".join(f"{b:>10s}" for b in names) + ("   speedup" if len(names) > 1 else ""))
    for label, _ in cases:
        row = f"{label:18s}" + "".join(f"{1e3 * results[b, label]:10.2f}" for b in names)
        if len(names) > 1:
            row += f"{results['python', label] / results['cython', label]:10.2f}x"
        print(row)


if __name__ == "__main__":
    main()
