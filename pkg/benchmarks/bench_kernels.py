"""Compiled vs numpy kernels: wall time on bank- and label-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per (kernel, size) with the best-of-``repeat`` time of each
backend, the speedup, and the max absolute difference between outputs.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from fdg2s.kernels import compiled_backend, python_backend


def _similarity_case(rng, k, n, h):
    return (rng.normal(size=(k, n, h)),)


def _variation_case(rng, n, t_len, m, td=24, pi_q=4):
    cal = np.arange(t_len)
    cell_t = rng.integers(t_len // 2, t_len, size=m)
    return (rng.normal(100, 20, size=(n, t_len)), rng.random((n, t_len)) > 0.1,
            (cal // td) % 7, cal % td, rng.integers(0, 3, size=(n, t_len)), cell_t,
            (cell_t // td) % 7, cell_t % td, rng.integers(0, 3, size=(n, m)),
            np.full(m, t_len), pi_q)


CASES = {
    "window_similarity": (_similarity_case, [(16, 20, 6), (64, 20, 6), (64, 80, 12)]),
    "variation_stats": (_variation_case, [(20, 1440, 6), (20, 1440, 192), (80, 4320, 192)]),
}


def _best(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if compiled_backend is None:
        raise SystemExit("compiled extension not built; run `pip install -e .` first")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<19}{'size':<16}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}{'max diff':>10}")
    for name, (make, sizes) in CASES.items():
        for size in sizes:
            case = make(rng, *size)
            py_fn, c_fn = getattr(python_backend, name), getattr(compiled_backend, name)
            diff = _max_diff(py_fn(*case), c_fn(*case))
            t_py, t_c = _best(py_fn, case, args.repeat), _best(c_fn, case, args.repeat)
            print(f"{name:<19}{'x'.join(map(str, size)):<16}{t_py * 1e3:>10.2f}{t_c * 1e3:>11.2f}"
                  f"{t_py / t_c:>8.1f}x{diff:>10.1e}")


if __name__ == "__main__":
    main()
