"""Compare the compiled and pure-Python integration kernels.

    python benchmarks/bench_integrate.py [--repeat 5] [--horizon 10]

Runs the same post-switching trajectory (line 4-5, base case, SEP angles
perturbed) on every available backend, checks that the backends agree and
prints the best wall time for each.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from cuepflow.checks import build_context
from cuepflow.dynamics import continue_algebraic
from cuepflow.equilibria import project_coi, solve_equilibrium
from cuepflow.integrate import IntegratorConfig, available_backends, integrate
from cuepflow.study import load_scenario, scenario_fixture


def trajectory_case():
    ctx = build_context(load_scenario(scenario_fixture("line_4_5")))
    model = ctx.model
    n = model.n
    sep = solve_equilibrium(ctx.x0, model, confirm=False)
    x = sep.x.copy()
    x[:n] += np.array([0.5, -0.3, -0.2])
    x = project_coi(model, x)
    vm, th = continue_algebraic(model, sep.x, x[:n])
    x[2 * n:] = np.r_[vm, th]
    return model, sep, x


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--horizon", type=float, default=10.0)
    args = ap.parse_args(argv)

    model, sep, x0 = trajectory_case()
    cfg = IntegratorConfig(horizon=args.horizon, exit_radius=1e-12)  # run the full horizon
    results = {}
    for name in available_backends():
        t, tr = best_time(lambda: integrate(x0, cfg, model, target=sep.x, backend=name), args.repeat)
        results[name] = (t, tr)
        print(f"{name:>9}: {t * 1e3:9.2f} ms  ({tr.accepted} accepted, {tr.rejected} rejected steps, "
              f"reason {tr.reason.label})")
    if len(results) == 2:
        (tp, a), (tc, b) = results["python"], results["compiled"]
        diff = float(np.max(np.abs(a.final - b.final)))
        same = a.states.shape == b.states.shape and np.allclose(a.states, b.states, rtol=0, atol=1e-9)
        print(f"speed-up: {tp / tc:.1f}x; final-state difference {diff:.2e}; trajectories match: {same}")
    else:
        print("compiled kernel not built; only the Python fallback was timed")


if __name__ == "__main__":
    main()
