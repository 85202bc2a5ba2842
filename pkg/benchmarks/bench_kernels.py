"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--end-to-end]

Kernel timings call both variants directly, so one process covers both.  The
optional end-to-end timing trains one full-mode protocol run per backend in a
subprocess with ``LRT_NUMBA`` set accordingly.
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from lrt.numerics import _kernels as K

E2E = """
import time
from lrt import datagen, sessions
ds = datagen.generate(datagen.GeneratorConfig(seed=0))
t = time.perf_counter()
sessions.run_protocol(ds, sessions.TrainConfig(seed=0))
print(time.perf_counter() - t)
"""


def cases(rng):
    x = rng.normal(size=(64, 36, 8))  # (N, patches, D_raw)
    w = rng.normal(size=(8, 16)) / np.sqrt(8)
    b = np.full(16, 0.05)
    fwd = K.patch_encode_fwd_np(x, w, b)
    active = fwd[1]
    g = rng.normal(size=(64, 16))
    a = rng.normal(size=(512, 16))
    y, norms = K.normalize_rows_fwd_np(a)
    z = rng.normal(size=(512, 40))
    sm = K.softmax_rows_np(z)
    return {
        "patch_encode_fwd": ((x, w, b), K.patch_encode_fwd_np, K.patch_encode_fwd_nb),
        "patch_encode_bwd": ((x, w, active, g), K.patch_encode_bwd_np, K.patch_encode_bwd_nb),
        "normalize_rows_fwd": ((a,), K.normalize_rows_fwd_np, K.normalize_rows_fwd_nb),
        "normalize_rows_bwd": ((y, norms, a), K.normalize_rows_bwd_np, K.normalize_rows_bwd_nb),
        "softmax_rows": ((z,), K.softmax_rows_np, K.softmax_rows_nb),
        "softmax_rows_bwd": ((sm, z), K.softmax_rows_bwd_np, K.softmax_rows_bwd_nb),
        "pairwise_cosine": ((a[:40], a), K.pairwise_cosine_np, K.pairwise_cosine_nb),
    }


def best(fn, args, repeat):
    fn(*args)  # warm-up / JIT compile
    return min(timeit.repeat(lambda: fn(*args), number=10, repeat=repeat)) / 10


def end_to_end(backend):
    env = dict(os.environ, LRT_NUMBA="1" if backend == "numba" else "0")
    out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, (inputs, f_np, f_nb) in cases(rng).items():
        t_np, t_nb = best(f_np, inputs, args.repeat), best(f_nb, inputs, args.repeat)
        print(f"{name:<22s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.2f}")
    if args.end_to_end:
        t0 = time.perf_counter()
        res = {b: end_to_end(b) for b in ("numpy", "numba")}
        print(f"full protocol run: numpy {res['numpy']:.2f} s, numba {res['numba']:.2f} s "
              f"(total {time.perf_counter() - t0:.1f} s incl. start-up)")


if __name__ == "__main__":
    main()
