#!/usr/bin/env python3
"""Benchmark the jitted kernels against their pure-numpy fallbacks.

Runs every kernel from phaserec.kernels in both backends on training-shaped
float32 inputs, verifies the two implementations agree, and prints per-kernel
timings (best of --repeats) with the speedup factor. When numba is not
installed only the numpy column is reported.

Usage:
    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from phaserec import kernels


def _softmax_case(rng):
    x = rng.standard_normal((4096, 64)).astype(np.float32)
    return "4096x64", lambda: (x.copy(),), lambda args, out: out


def _softmax_grad_case(rng):
    x = rng.standard_normal((4096, 64)).astype(np.float32)
    y = kernels.softmax_rows_np(x)
    g = rng.standard_normal((4096, 64)).astype(np.float32)
    return "4096x64", lambda: (y.copy(), g.copy()), lambda args, out: out


def _layernorm_case(rng):
    x = rng.standard_normal((4096, 64)).astype(np.float32)
    gain = rng.standard_normal(64).astype(np.float32)
    bias = rng.standard_normal(64).astype(np.float32)
    return ("4096x64", lambda: (x.copy(), gain, bias, 1e-5),
            lambda args, out: np.concatenate([o.ravel() for o in out]))


def _layernorm_grad_case(rng):
    x = rng.standard_normal((4096, 64)).astype(np.float32)
    gain = rng.standard_normal(64).astype(np.float32)
    bias = rng.standard_normal(64).astype(np.float32)
    _, mean, rstd = kernels.layernorm_rows_np(x, gain, bias, 1e-5)
    g = rng.standard_normal((4096, 64)).astype(np.float32)
    return ("4096x64", lambda: (x.copy(), mean.copy(), rstd.copy(), gain, g.copy()),
            lambda args, out: np.concatenate([o.ravel() for o in out]))


def _adam_case(rng):
    n = 1_000_000
    p = rng.standard_normal(n).astype(np.float32)
    g = rng.standard_normal(n).astype(np.float32)
    m = rng.standard_normal(n).astype(np.float32) * 0.1
    v = np.abs(rng.standard_normal(n).astype(np.float32)) * 0.01
    return ("1M params",
            lambda: (p.copy(), g.copy(), m.copy(), v.copy(),
                     1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001),
            lambda args, out: np.concatenate([args[0], args[2], args[3]]))


def _scatter_case(rng):
    acc = np.zeros((32, 512, 64), dtype=np.float32)
    idx = rng.integers(0, 512, 448)
    g = rng.standard_normal((32, 448, 64)).astype(np.float32)
    return ("32x512x64, k=448", lambda: (acc.copy(), idx, g),
            lambda args, out: args[0].ravel())


CASES = {
    "softmax_rows": _softmax_case,
    "softmax_rows_grad": _softmax_grad_case,
    "layernorm_rows": _layernorm_case,
    "layernorm_rows_grad": _layernorm_grad_case,
    "adam_update": _adam_case,
    "scatter_add_rows": _scatter_case,
}


def _time_call(fn, make_args, repeats):
    fn(*make_args())  # warmup; compiles the jitted variant on first use
    best = float("inf")
    for _ in range(repeats):
        args = make_args()
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _result_of(fn, make_args, extract):
    args = make_args()
    out = fn(*args)
    return np.asarray(extract(args, out), dtype=np.float64)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repetitions per kernel (best is reported)")
    cli_args = parser.parse_args()

    rng = np.random.default_rng(0)
    have_numba = bool(kernels.NUMBA_IMPLS)
    print(f"active backend: {kernels.BACKEND}"
          + ("" if have_numba else "  (numba not installed; numpy only)"))
    header = f"{'kernel':22s}{'shape':>18s}{'numpy':>12s}"
    if have_numba:
        header += f"{'numba':>12s}{'speedup':>10s}{'max|diff|':>12s}"
    print(header)
    print("-" * len(header))

    for name, case in CASES.items():
        shape, make_args, extract = case(rng)
        np_fn = kernels.NUMPY_IMPLS[name]
        t_np = _time_call(np_fn, make_args, cli_args.repeats)
        line = f"{name:22s}{shape:>18s}{t_np * 1e3:>9.3f} ms"
        if have_numba:
            nb_fn = kernels.NUMBA_IMPLS[name]
            t_nb = _time_call(nb_fn, make_args, cli_args.repeats)
            ref = _result_of(np_fn, make_args, extract)
            got = _result_of(nb_fn, make_args, extract)
            diff = float(np.max(np.abs(ref - got)))
            scale = float(np.max(np.abs(ref))) or 1.0
            line += f"{t_nb * 1e3:>9.3f} ms{t_np / t_nb:>9.1f}x{diff:>12.1e}"
            if diff > 1e-4 * scale:
                line += "  <-- MISMATCH"
        print(line)


if __name__ == "__main__":
    main()
