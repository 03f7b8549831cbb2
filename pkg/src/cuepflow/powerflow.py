"""Newton power flow for the pre-switching network and load scaling along a stress pattern."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import BracketingError, DivergenceError, InputError
from .sysmodel import AdmittanceMatrix, NetworkModel, build_ybus

log = logging.getLogger(__name__)

MISMATCH_TOL = 1e-8
MAX_ITER = 30


@dataclass(frozen=True)
class StressPattern:
    """Per-bus load increments (pu per unit of lambda).

    ``participation`` names the buses that pick up the extra generation;
    only the slack is supported, which is what the Newton formulation does
    by leaving the slack without mismatch equations.
    """

    dp: np.ndarray
    dq: np.ndarray
    participation: tuple[str, ...] = ("slack",)

    @classmethod
    def proportional_load(cls, net: NetworkModel) -> "StressPattern":
        """Scale every load at constant power factor, slack-only pickup."""
        return cls(dp=net.p_load.copy(), dq=net.q_load.copy())


@dataclass(frozen=True)
class Injections:
    lam: float
    p_load: np.ndarray
    q_load: np.ndarray
    p_gen: np.ndarray
    v_set: np.ndarray


@dataclass(frozen=True)
class PowerFlowSolution:
    vm: np.ndarray
    va: np.ndarray
    lam: float
    iterations: int
    max_mismatch: float
    p_load: np.ndarray
    q_load: np.ndarray
    p_gen: np.ndarray = field(repr=False)

    @property
    def voltage(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    @property
    def total_load(self) -> float:
        return float(self.p_load.sum())


def scale_injections(net: NetworkModel, pattern: StressPattern, lam: float) -> Injections:
    if lam < 0:
        raise InputError("lambda must be non-negative")
    p_gen = np.zeros(net.n_bus)
    for g in net.generators:
        p_gen[g.bus - 1] += g.p_set
    return Injections(lam=float(lam), p_load=net.p_load + lam * pattern.dp,
                      q_load=net.q_load + lam * pattern.dq, p_gen=p_gen,
                      v_set=np.array([b.v_set for b in net.buses]))


def _bus_sets(net: NetworkModel):
    kinds = [b.kind for b in net.buses]
    pv = np.array([i for i, k in enumerate(kinds) if k == "generator"], dtype=np.intp)
    pq = np.array([i for i, k in enumerate(kinds) if k == "load"], dtype=np.intp)
    return pv, pq


def power_injection(Y: np.ndarray, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
    v = vm * np.exp(1j * va)
    return v * np.conj(Y @ v)


def mismatch(Y: np.ndarray, vm: np.ndarray, va: np.ndarray, inj: Injections) -> np.ndarray:
    """Complex mismatch S_scheduled - S_network for every bus."""
    s_sched = inj.p_gen - inj.p_load - 1j * inj.q_load
    return s_sched - power_injection(Y, vm, va)


def _jacobian(Y, vm, va, pv, pq):
    v = vm * np.exp(1j * va)
    i_bus = Y @ v
    dS_dva = 1j * np.diag(v) @ np.conj(np.diag(i_bus) - Y @ np.diag(v))
    dS_dvm = np.diag(v) @ np.conj(Y @ np.diag(v / vm)) + np.diag(np.conj(i_bus) * v / vm)
    ang = np.r_[pv, pq]
    J11 = dS_dva.real[np.ix_(ang, ang)]
    J12 = dS_dvm.real[np.ix_(ang, pq)]
    J21 = dS_dva.imag[np.ix_(pq, ang)]
    J22 = dS_dvm.imag[np.ix_(pq, pq)]
    return np.block([[J11, J12], [J21, J22]])


def solve_power_flow(net: NetworkModel, injections: Injections,
                     init: PowerFlowSolution | None = None,
                     ybus: AdmittanceMatrix | None = None,
                     tol: float = MISMATCH_TOL, max_iter: int = MAX_ITER) -> PowerFlowSolution:
    """Polar Newton-Raphson; the slack bus carries no mismatch equations."""
    Y = (ybus or build_ybus(net)).matrix
    pv, pq = _bus_sets(net)
    ang = np.r_[pv, pq]
    if init is None:
        vm = np.ones(net.n_bus)
        va = np.zeros(net.n_bus)
    else:
        vm, va = init.vm.copy(), init.va.copy()
    fixed = np.array([b.kind != "load" for b in net.buses])
    vm[fixed] = injections.v_set[fixed]

    def residual(vm, va):
        dS = mismatch(Y, vm, va, injections)
        return np.r_[dS.real[ang], dS.imag[pq]]

    F = residual(vm, va)
    err = np.max(np.abs(F))
    it = 0
    while err >= tol:
        if it >= max_iter:
            raise DivergenceError(f"power flow did not converge at lambda={injections.lam:g}",
                                  last_iterate=(vm, va), mismatch=err, iterations=it)
        J = _jacobian(Y, vm, va, pv, pq)
        try:
            dx = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            raise DivergenceError("singular power-flow Jacobian", last_iterate=(vm, va),
                                  mismatch=err, iterations=it) from None
        va = va.copy()
        vm = vm.copy()
        va[ang] += dx[: len(ang)]
        vm[pq] += dx[len(ang):]
        it += 1
        F = residual(vm, va)
        err = np.max(np.abs(F))
        if not np.isfinite(err) or np.any(vm <= 0):
            raise DivergenceError(f"power flow diverged at lambda={injections.lam:g}",
                                  last_iterate=(vm, va), mismatch=err, iterations=it)
    return PowerFlowSolution(vm=vm, va=va, lam=injections.lam, iterations=it,
                             max_mismatch=float(err), p_load=injections.p_load,
                             q_load=injections.q_load, p_gen=injections.p_gen)


def jacobian_sigma_min(net: NetworkModel, sol: PowerFlowSolution) -> float:
    pv, pq = _bus_sets(net)
    J = _jacobian(build_ybus(net).matrix, sol.vm, sol.va, pv, pq)
    return float(np.linalg.svd(J, compute_uv=False)[-1])


def solve_at(net: NetworkModel, pattern: StressPattern, lam: float,
             init: PowerFlowSolution | None = None) -> PowerFlowSolution:
    return solve_power_flow(net, scale_injections(net, pattern, lam), init=init)


@dataclass(frozen=True)
class NoseBracket:
    lo: float
    hi: float
    sigma_min: float
    solution: PowerFlowSolution


def nose_bracket(net: NetworkModel, pattern: StressPattern, lam_lo: float, lam_hi: float,
                 width: float = 1e-3, init: PowerFlowSolution | None = None) -> NoseBracket:
    """Bisect between a convergent and a divergent lambda down to ``width``."""
    if not lam_hi > lam_lo:
        raise BracketingError("need lam_lo < lam_hi")

    def attempt(lam, start):
        try:
            return solve_at(net, pattern, lam, init=start)
        except DivergenceError:
            return None

    lo_sol = attempt(lam_lo, init)
    if lo_sol is None:
        raise BracketingError(f"power flow diverges at lam_lo={lam_lo:g}")
    if attempt(lam_hi, lo_sol) is not None:
        raise BracketingError(f"power flow converges at lam_hi={lam_hi:g}")
    lo, hi = lam_lo, lam_hi
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        s = attempt(mid, lo_sol)
        if s is None:
            hi = mid
        else:
            lo, lo_sol = mid, s
    return NoseBracket(lo=lo, hi=hi, sigma_min=jacobian_sigma_min(net, lo_sol), solution=lo_sol)


@dataclass
class PVCurve:
    solutions: list[PowerFlowSolution]
    failed_at: float | None

    @property
    def lams(self) -> np.ndarray:
        return np.array([s.lam for s in self.solutions])

    def load_bus_monotonicity_violations(self, net: NetworkModel) -> list[tuple[float, int]]:
        """(lambda, bus id) pairs where a load-bus magnitude rose along the sweep."""
        load = [i for i, b in enumerate(net.buses) if b.kind == "load"]
        out = []
        for a, b in zip(self.solutions, self.solutions[1:]):
            for i in load:
                if b.vm[i] > a.vm[i] + 1e-12:
                    out.append((b.lam, i + 1))
        return out


def trace_pv_curve(net: NetworkModel, pattern: StressPattern, step: float = 0.05,
                   lam_max: float = 10.0, min_step: float = 1e-3) -> PVCurve:
    """Warm-started sweep with step halving on divergence until ``min_step``."""
    sols = [solve_at(net, pattern, 0.0)]
    lam, h = 0.0, step
    failed = None
    while lam < lam_max - 1e-12:
        nxt = min(lam + h, lam_max)
        try:
            s = solve_at(net, pattern, nxt, init=sols[-1])
        except DivergenceError:
            h *= 0.5
            if h < min_step:
                failed = nxt
                break
            continue
        sols.append(s)
        lam = nxt
    return PVCurve(sols, failed)
