"""Numerical property suites behind ``cuepflow validate``.

Each suite builds what it needs from a scenario (the line 4-5 fixture by
default) and returns a :class:`SuiteResult` of named checks. Suites never
raise for a numerical failure; an exception inside a suite is recorded as
its error and counts as a failure.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import powerflow as pf
from .dynamics import (SPSModel, build_sps_model, coi_transform, continue_algebraic,
                       init_dynamic_state)
from .energy import energy_along
from .equilibria import project_coi, solve_equilibrium
from .errors import CuepError
from .integrate import IntegratorConfig, Scheme, Termination, available_backends, integrate, step_implicit
from .integrate import vector_field
from .sysmodel import apply_switching, loads_to_admittance

COI_TOL = 1e-10
JAC_REL_TOL = 1e-5
ORDER_TARGET, ORDER_SLACK = 2.0, 0.1
EPS_TOL = 1e-8
N_ENERGY_TRAJ = 20


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    limit: float
    passed: bool
    note: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: list[Check] = field(default_factory=list)
    error: str | None = None
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.error is None and bool(self.checks) and all(c.passed for c in self.checks)

    def add(self, name: str, value: float, limit: float, passed: bool | None = None, note: str = ""):
        ok = bool(value <= limit) if passed is None else bool(passed)
        self.checks.append(Check(name, float(value), float(limit), ok, note))


@dataclass(frozen=True)
class Context:
    model: SPSModel
    x0: np.ndarray  # initialized post-switching state (not an equilibrium)
    lam: float


def build_context(scenario, lam: float = 0.0, lossless: bool | None = None, eps: float | None = None) -> Context:
    """Post-switching model at ``lam`` from an unvalidated copy of the scenario network."""
    net = scenario.load_network(validate=False)
    pattern = pf.StressPattern.proportional_load(net)
    sol = pf.solve_at(net, pattern, lam)
    st, gens = init_dynamic_state(sol, net)
    model = build_sps_model(apply_switching(net, scenario.switching), gens, loads_to_admittance(sol, net),
                            eps=scenario.eps if eps is None else eps)
    if scenario.damping_scale != 1.0:
        model = model.with_damping_scale(scenario.damping_scale)
    if scenario.lossless if lossless is None else lossless:
        model = model.lossless()
    return Context(model, st.to_vector(), lam)


def _random_states(ctx: Context, k: int, rng: np.random.Generator, spread: float = 0.5) -> list[np.ndarray]:
    n, m = ctx.model.n, ctx.model.m
    out = []
    for _ in range(k):
        x = ctx.x0.copy()
        x[:n] += rng.uniform(-spread, spread, n)
        x[n:2 * n] = rng.uniform(-spread, spread, n)
        x[2 * n:2 * n + m] *= rng.uniform(0.9, 1.1, m)
        x[2 * n + m:] += rng.uniform(-0.2, 0.2, m)
        out.append(x)
    return out


# ------------------------------------------------------------------ suites

def coi_suite(scenario, seed: int = 0) -> SuiteResult:
    """COI identities: frame transform, invariance of the COI manifold, drift along a trajectory."""
    res = SuiteResult("coi")
    ctx = build_context(scenario)
    model = ctx.model
    M, n = model.inertia, model.n
    res.add("inertia weights positive", float(-M.min()), 0.0, passed=bool(np.all(M > 0)),
            note="COI frame needs positive inertia")
    rng = np.random.default_rng(seed)
    scale = float(np.abs(M).sum())
    worst_frame = worst_field = 0.0
    rhs, _ = vector_field(model)
    for x in _random_states(ctx, 10, rng):
        d, w, _, _ = coi_transform(x[:n], x[n:2 * n], M)
        worst_frame = max(worst_frame, abs(M @ d) / scale, abs(M @ w) / scale)
        y = x.copy()
        y[:n], y[n:2 * n] = d, w
        f = rhs(y)
        worst_field = max(worst_field, abs(M @ f[:n]) / scale, abs(M @ f[n:2 * n]) / scale)
    res.add("transformed angles/speeds have zero inertia-weighted mean", worst_frame, COI_TOL)
    res.add("vector field tangent to the COI manifold", worst_field, COI_TOL)

    x = project_coi(model, _random_states(ctx, 1, rng, spread=0.2)[0])
    x[n:2 * n] -= (M @ x[n:2 * n]) / M.sum()
    vm, th = continue_algebraic(model, ctx.x0, x[:n])
    x[2 * n:] = np.r_[vm, th]
    tr = integrate(x, IntegratorConfig(horizon=5.0), model)
    drift = max(float(np.max(np.abs(tr.states[:, :n] @ M))), float(np.max(np.abs(tr.states[:, n:2 * n] @ M))))
    res.add("COI drift along a 5 s trajectory", drift / scale, COI_TOL)
    return res


def _fd_jacobian(rhs: Callable, x: np.ndarray) -> np.ndarray:
    J = np.empty((x.size, x.size))
    for j in range(x.size):
        h = 1e-6 * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (rhs(x + e) - rhs(x - e)) / (2 * h)
    return J


def jacobian_suite(scenario, seed: int = 0) -> SuiteResult:
    """Analytic Jacobian against central differences (and the compiled kernel against numpy)."""
    res = SuiteResult("jacobian")
    ctx = build_context(scenario)
    model = ctx.model
    rng = np.random.default_rng(seed)
    worst = backend = 0.0
    states = [ctx.x0] + _random_states(ctx, 5, rng)
    for x in states:
        J = model.jac(x)
        Jfd = _fd_jacobian(model.rhs, x)
        worst = max(worst, float(np.max(np.abs(J - Jfd)) / max(1.0, np.max(np.abs(J)))))
        if "compiled" in available_backends():
            r, j = vector_field(model, "compiled")
            backend = max(backend, float(np.max(np.abs(j(x) - J)) / max(1.0, np.max(np.abs(J)))),
                          float(np.max(np.abs(r(x) - model.rhs(x))) / max(1.0, np.max(np.abs(model.rhs(x))))))
    res.add("analytic vs finite-difference Jacobian (relative)", worst, JAC_REL_TOL)
    if "compiled" in available_backends():
        res.add("compiled vs numpy vector field and Jacobian", backend, 1e-12)
    return res


def trapezoidal_errors(model: SPSModel, x0: np.ndarray, T: float = 1.0,
                       divisions=(50, 100, 200, 400), ref_division: int = 6400):
    """Fixed-step trapezoidal end-point errors on the machine states against a fine reference."""
    n = model.n

    def run(k):
        x, h = x0.copy(), T / k
        for _ in range(k):
            x, ok, _ = step_implicit(x, h, Scheme.TRAPEZOIDAL, model, 1e-13, 30)
            if not ok:
                raise CuepError("Newton failed in fixed-step run")
        return x

    ref = run(ref_division)
    hs = np.array([T / k for k in divisions])
    errs = np.array([np.max(np.abs(run(k)[:2 * n] - ref[:2 * n])) for k in divisions])
    return hs, errs


def order_suite(scenario, seed: int = 0) -> SuiteResult:
    """Observed convergence order of fixed-step trapezoidal integration."""
    res = SuiteResult("order")
    ctx = build_context(scenario)
    model = ctx.model
    n = model.n
    sep = solve_equilibrium(ctx.x0, model, confirm=False)
    x = sep.x.copy()
    x[:n] += np.array([0.4, -0.2, -0.3])[:n] if n == 3 else np.linspace(0.3, -0.3, n)
    x = project_coi(model, x)
    vm, th = continue_algebraic(model, sep.x, x[:n])
    x[2 * n:] = np.r_[vm, th]
    hs, errs = trapezoidal_errors(model, x)
    slope = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    res.add("trapezoidal order (log-log fit)", abs(slope - ORDER_TARGET), ORDER_SLACK,
            note=f"slope {slope:.4f}")
    return res


def in_region_trajectories(ctx: Context, sep, k: int, seed: int = 0, cfg: IntegratorConfig | None = None,
                           max_draws: int = 400):
    """``k`` recorded trajectories from random initial states that converge to ``sep``."""
    model = ctx.model
    n = model.n
    rng = np.random.default_rng(seed)
    cfg = cfg or IntegratorConfig()
    out = []
    for _ in range(max_draws):
        x = sep.x.copy()
        x[:n] += rng.uniform(-1.0, 1.0, n)
        x[n:2 * n] = rng.uniform(-1.0, 1.0, n)
        x = project_coi(model, x)
        x[n:2 * n] -= (model.inertia @ x[n:2 * n]) / model.total_inertia
        try:
            vm, th = continue_algebraic(model, sep.x, x[:n])
        except CuepError:
            continue
        x[2 * n:] = np.r_[vm, th]
        tr = integrate(x, cfg, model, target=sep.x)
        if tr.reason == Termination.CONVERGED:
            out.append(tr)
            if len(out) == k:
                break
    return out


def decay_tolerance(cfg: IntegratorConfig) -> float:
    """Allowed per-step energy increase: 1e-4 plus ten local error tolerances."""
    return 1e-4 + 10.0 * cfg.local_tol


def energy_suite(scenario, seed: int = 0, k: int = N_ENERGY_TRAJ) -> SuiteResult:
    """Energy non-increasing along in-region trajectories of the lossless model."""
    res = SuiteResult("energy")
    ctx = build_context(scenario, lossless=True)
    sep = solve_equilibrium(ctx.x0, ctx.model)
    cfg = scenario.integrator
    tol = decay_tolerance(cfg)
    trs = in_region_trajectories(ctx, sep, k, seed, cfg)
    res.add("in-region trajectories sampled", float(k - len(trs)), 0.0, note=f"{len(trs)} of {k}")
    worst, violations = -np.inf, 0
    for tr in trs:
        W = energy_along(tr.states, sep, ctx.model)
        inc = np.diff(W)
        worst = max(worst, float(inc.max()))
        violations += int(np.sum(inc > tol))
    res.add("largest per-step energy increase", worst, tol)
    res.add("steps with energy increase above tolerance", float(violations), 0.0)
    return res


def eps_suite(scenario, seed: int = 0) -> SuiteResult:
    """Equilibria do not depend on the singular-perturbation parameter."""
    res = SuiteResult("eps")
    ctx = build_context(scenario, eps=1e-3)
    a = solve_equilibrium(ctx.x0, ctx.model, confirm=False)
    b = solve_equilibrium(ctx.x0, ctx.model.with_eps(1e-2), confirm=False)
    res.add("SEP at eps 1e-3 vs 1e-2", float(np.max(np.abs(a.x - b.x))), EPS_TOL)
    return res


def rerun_suite(scenario, seed: int = 0) -> SuiteResult:
    """Two identical runs give bit-identical trajectories."""
    res = SuiteResult("rerun")
    ctx = build_context(scenario)
    sep = solve_equilibrium(ctx.x0, ctx.model)
    a = in_region_trajectories(ctx, sep, 2, seed)
    b = in_region_trajectories(ctx, sep, 2, seed)
    same = len(a) == len(b) and all(np.array_equal(p.states, q.states) for p, q in zip(a, b))
    res.add("bit-identical reruns under a fixed seed", 0.0 if same else 1.0, 0.0)
    return res


SUITES: dict[str, Callable] = {
    "coi": coi_suite,
    "jacobian": jacobian_suite,
    "order": order_suite,
    "energy": energy_suite,
    "eps": eps_suite,
    "rerun": rerun_suite,
}


def run_suite(name: str, scenario, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    try:
        res = SUITES[name](scenario, seed=seed)
    except CuepError as exc:
        res = SuiteResult(name, error=f"{type(exc).__name__}: {exc}")
    except (FloatingPointError, np.linalg.LinAlgError, ValueError, ZeroDivisionError) as exc:
        res = SuiteResult(name, error=f"{type(exc).__name__}: {exc}")
    res.seconds = time.perf_counter() - t0
    return res
