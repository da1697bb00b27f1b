"""Compare the compiled and numpy kernel backends.

Run ``python benchmarks/bench_kernels.py``.  Each kernel is timed on a
representative problem size (best of ``--repeat`` runs) and the outputs of
the two backends are compared.  A final end-to-end row times a short
fluorescence experiment with each backend in a fresh interpreter.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fluorsim import kernels


def problems(rng):
    P, S, R = 400, 2000, 50
    g = rng.uniform(50.0, 3000.0, P)
    delta = rng.uniform(-3e6, 3e6, P)
    gam = rng.uniform(1.0, 10.0, P)
    field = (rng.normal(size=S) + 1j * rng.normal(size=S)) * 300.0
    dt = np.full(S, 5e-9)
    rec = np.linspace(1, S, R).astype(np.int64)
    K, C, M, U = 8001, 3, 3, 2000
    tdelta = rng.uniform(-1e7, 1e7, K)
    lam = rng.uniform(300.0, 500.0, K)
    B = rng.normal(size=(C, M, K)) + 1j * rng.normal(size=(C, M, K))
    u = np.linspace(0.0, 1e-3, U)
    rates = rng.uniform(1.0, 5.0, 20000)
    A = rng.normal(size=(2, rates.size))
    ud = np.linspace(0.0, 0.6, 2000)
    return {
        "propagate_affine": ("propagate_affine", (g, delta, gam, 0.5 * gam, field, dt, rec)),
        "transverse_sums": ("transverse_sums", (tdelta, lam, B, u)),
        "decay_sums": ("decay_sums", (rates, A, ud)),
    }


def end_to_end(backend):
    env = dict(os.environ, FLUORSIM_PURE_PYTHON="1" if backend == "python" else "0")
    code = ("import time; from fluorsim.config import load_preset; "
            "from fluorsim.experiments import fluorescence_experiment; "
            "c = load_preset('paper_fig2').with_(repetitions=50); t = time.perf_counter(); "
            "fluorescence_experiment(c); print(time.perf_counter() - t)")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--no-end-to-end", action="store_true")
    args = ap.parse_args(argv)
    try:
        cy = kernels.get_backend("cython")
    except ImportError:
        print("compiled extension not built; only the numpy backend is available")
        return 1
    py = kernels.get_backend("python")
    rng = np.random.default_rng(0)
    print("decay_sums dispatches to numpy in both modes; the compiled version is timed for reference")
    print(f"{'kernel':<20}{'numpy [s]':>12}{'cython [s]':>12}{'speedup':>10}{'max rel diff':>15}")
    for name, (fn, a) in problems(rng).items():
        t_py = min(timeit.repeat(lambda: getattr(py, fn)(*a), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: getattr(cy, fn)(*a), number=1, repeat=args.repeat))
        r_py, r_cy = getattr(py, fn)(*a), getattr(cy, fn)(*a)
        diff = float(np.max(np.abs(r_py - r_cy)) / np.max(np.abs(r_py)))
        print(f"{name:<20}{t_py:>12.4f}{t_cy:>12.4f}{t_py / t_cy:>10.1f}{diff:>15.2e}")
    if not args.no_end_to_end:
        t_py, t_cy = end_to_end("python"), end_to_end("cython")
        print(f"{'fluorescence (50)':<20}{t_py:>12.3f}{t_cy:>12.3f}{t_py / t_cy:>10.1f}{'':>15}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
