"""Time the compiled kernels against the numpy reference on attention-sized inputs.

Run from the repository root:

    python3 benchmarks/bench_kernels.py --rows 4096 --cols 64 --repeats 30
"""

import argparse
import statistics
import time

import numpy as np

from stlink._kernels import _numpy_ref

try:
    from stlink._kernels import _core
except ImportError:
    _core = None


def _time(fn, args, repeats: int) -> float:
    fn(*args)  # warm up and fault in the inputs
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def _cases(rows: int, cols: int, dtype):
    rng = np.random.default_rng(0)

    def arr(*shape):
        return np.ascontiguousarray(rng.standard_normal(shape), dtype=dtype)

    x = arr(rows, cols)
    gy = arr(rows, cols)
    gamma, beta = arr(cols), arr(cols)
    y_sm = _numpy_ref.softmax_fwd(x)
    _, mean, rstd = _numpy_ref.layernorm_fwd(x, gamma, beta, 1e-5)
    half = cols // 2
    theta = arr(rows, half)
    cos, sin = np.cos(theta), np.sin(theta)
    return [
        ("softmax_fwd", (x,)),
        ("softmax_bwd", (y_sm, gy)),
        ("layernorm_fwd", (x, gamma, beta, 1e-5)),
        ("layernorm_bwd", (x, gamma, mean, rstd, gy)),
        ("gelu_fwd", (x,)),
        ("gelu_bwd", (x, gy)),
        ("rope_fwd", (x, cos, sin)),
        ("rope_bwd_x", (gy, cos, sin)),
        ("rope_bwd_theta", (x, gy, cos, sin)),
    ]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=4096)
    parser.add_argument("--cols", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=30)
    parser.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = parser.parse_args()

    dtype = np.dtype(args.dtype)
    print(f"rows={args.rows} cols={args.cols} dtype={dtype.name} "
          f"median of {args.repeats} runs")
    if _core is None:
        print("compiled backend unavailable; build it with: pip install -e . "
              "--no-build-isolation")
    print(f"{'kernel':>16} {'numpy (us)':>12} {'compiled (us)':>14} {'speedup':>8}")
    for name, call_args in _cases(args.rows, args.cols, dtype):
        t_py = _time(getattr(_numpy_ref, name), call_args, args.repeats)
        if _core is None:
            print(f"{name:>16} {t_py * 1e6:12.1f} {'-':>14} {'-':>8}")
            continue
        t_cy = _time(getattr(_core, name), call_args, args.repeats)
        print(f"{name:>16} {t_py * 1e6:12.1f} {t_cy * 1e6:14.1f} "
              f"{t_py / t_cy:8.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
