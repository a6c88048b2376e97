"""Benchmark the time-stepping kernel: numba backend against the numpy twin.

Runs the same Monte Carlo workload on both backends and reports wall time
per path and the speedup.  Usage:

    python benchmarks/bench_backends.py [--paths N] [--steps N] [--basis N]
"""

import argparse
import time

import numpy as np

from slipflow import _kernels
from slipflow.basis import build_eigenbasis
from slipflow.dynamics import Simulator, build_noise, make_initial_coeffs
from slipflow.geometry import DomainSpec, build_grid
from slipflow.lifting import BoundaryControl, LiftingCache, project_compatible


def build_workload(n_basis, n_steps):
    spec = DomainSpec(length_x=2 * np.pi, modes_x=8, nodes_y=24,
                      friction_alpha=1.0, viscosity=0.5)
    grid = build_grid(spec)
    basis = build_eigenbasis(spec, n_basis, grid)
    cache = LiftingCache(grid, spec.friction_alpha, 2)
    noise = build_noise(n_basis, 2, 0.05, 1.0, 7, [0.1, 0.1])
    t_final = 0.5
    sim = Simulator(basis, cache, noise, t_final=t_final, dt=t_final / n_steps)
    rng = np.random.default_rng(0)
    ctrl = BoundaryControl.zeros(spec.length_x, 2, np.linspace(0, t_final, 3))
    ctrl.gamma[:] = 0.15 * rng.standard_normal(ctrl.gamma.shape)
    ctrl = project_compatible(ctrl)
    u0 = make_initial_coeffs(n_basis, "random", 3, 0.5, 1.0)
    return sim, ctrl, u0


def run(sim, ctrl, u0, paths):
    start = time.perf_counter()
    trajs = sim.run_many(range(paths), ctrl=ctrl, u0=u0)
    elapsed = time.perf_counter() - start
    check = float(np.mean([tr.u_sq[-1] for tr in trajs]))
    return elapsed, check


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=400)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--basis", type=int, default=32)
    args = ap.parse_args()

    sim, ctrl, u0 = build_workload(args.basis, args.steps)
    print(f"workload: {args.paths} paths x {args.steps} steps, basis {args.basis}")

    results = {}
    backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    for backend in backends:
        _kernels.set_backend(backend)
        if backend == "numba":
            run(sim, ctrl, u0, 2)  # trigger compilation outside the timing
        elapsed, check = run(sim, ctrl, u0, args.paths)
        results[backend] = elapsed
        print(f"{backend:>6}: {elapsed:8.3f} s  "
              f"({1e3 * elapsed / args.paths:7.3f} ms/path)  checksum {check:.6e}")
    if len(results) == 2:
        print(f"speedup: numba is {results['numpy'] / results['numba']:.1f}x "
              f"faster than numpy on this workload")


if __name__ == "__main__":
    main()
