"""Time each hot kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the best-of-N wall time for each backend and
checks the two outputs agree bit for bit. Also times one batched gradient of
the attack objective, which is where a campaign spends its time.
"""

import argparse
import time

import numpy as np

from medusa_lab import attack as atk
from medusa_lab import kernels, verify
from medusa_lab.numkit import Rng


def best_of(fn, repeat):
    fn()  # warm-up (JIT compile on first call)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    imgs = rng.uniform(0, 1, (100, 32, 32))
    grads = rng.normal(size=(100, 4, 4))
    scores = rng.normal(size=(100, 200))
    one = rng.uniform(0, 1, (32, 32))
    return {
        "patch_mean (100x32x32, p=8)": lambda: kernels.patch_mean(imgs, 8),
        "patch_mean_adjoint (100x4x4, p=8)": lambda: kernels.patch_mean_adjoint(grads, 8),
        "bilinear_resize (32->35)": lambda: kernels.bilinear_resize(one, 35, 35),
        "quantize (100x32x32, 4 bits)": lambda: kernels.quantize(imgs, 15),
        "topk (100x200, k=5)": lambda: kernels.topk_indices(scores, 5),
    }


def objective_case(rng):
    members, image, _, spec = verify.toy_instance(rng, n_models=3, size=8)
    cfg = atk.AttackConfig()
    x = np.stack([image.pixels] * 32)
    targets = [atk.text_targets(m, [spec] * 32) for m in members]
    return lambda: atk.objective_batch(members, x, targets, cfg)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = Rng(0).child("bench")
    print(f"{'kernel':40s} {'numba':>11s} {'numpy':>11s} {'speedup':>8s}  parity")
    for name, fn in {**cases(rng), "objective_batch (32 imgs, 3 models)": objective_case(rng)}.items():
        times, outs = {}, {}
        for be in ("numba", "numpy"):
            prev = kernels.set_backend(be)
            try:
                times[be] = best_of(fn, args.repeat)
                outs[be] = fn()
            finally:
                kernels.set_backend(prev)
        a, b = outs["numba"], outs["numpy"]
        if isinstance(a, np.ndarray):
            same = a.shape == b.shape and np.array_equal(a, b)
        else:
            same = np.array_equal(a.grad, b.grad) and np.array_equal(a.l_total, b.l_total)
        print(f"{name:40s} {times['numba'] * 1e3:9.3f}ms {times['numpy'] * 1e3:9.3f}ms "
              f"{times['numpy'] / times['numba']:7.2f}x  {'exact' if same else 'DIFFERS'}")


if __name__ == "__main__":
    main()
