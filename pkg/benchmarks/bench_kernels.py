"""Time the numba kernels against their numpy fallbacks on identical inputs.

Usage: ``python3 benchmarks/bench_kernels.py [--size N] [--repeat R]``.
The first numba call (compilation) is excluded from the timings.
"""
import argparse
import timeit

import numpy as np

from totalstab import _kernels as K


def cases(n: int, rng: np.random.Generator) -> dict:
    P = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 1.5]])
    J = 0.5 * rng.normal(size=(n, 3, 3))
    r = np.geomspace(1e-3, 1e3, 50 * n)
    vals = np.sin(np.linspace(0, 200, 50 * n))
    m = max(2, int(np.sqrt(n)) * 8)
    return {
        "counterexample_profile": (r,),
        "sublevel_runs": (vals, 0.2),
        "lmi_margins": (J, P, 0.6),
        "quad_forms": (rng.normal(size=(50 * n, 3)), P),
        "min_pair_distance": (rng.normal(size=(m, 3)), rng.normal(size=(m, 3))),
        "spectral_norms": (rng.normal(size=(n, 3, 3)),),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=20_000, help="batch size scale")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, inputs in cases(args.size, rng).items():
        f_np, f_nb = getattr(K, f"{name}_numpy"), getattr(K, f"{name}_numba")
        nb_inputs = tuple(K._c(a) if isinstance(a, np.ndarray) else a for a in inputs)
        f_nb(*nb_inputs)  # compile
        t_np = min(timeit.repeat(lambda: f_np(*inputs), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: f_nb(*nb_inputs), number=1, repeat=args.repeat))
        print(f"{name:<24}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.1f}x")


if __name__ == "__main__":
    main()
