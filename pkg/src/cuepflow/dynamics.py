"""Structure-preserving classical-machine model in the centre-of-inertia frame.

State vector layout (``n`` machines, ``m`` buses)::

    x = [delta (n), omega (n), V (m), theta (m)]

All angles are measured from the inertia-weighted mean machine angle. The
network equations are embedded as fast dynamics

    eps * dtheta_k/dt = dP_k / V_k**2,    eps * dV_k/dt = dQ_k / V_k

where ``dP + j dQ`` is the complex power mismatch (machine injection minus
network draw) at bus ``k``. In rectangular coordinates this is
``eps dv/dt = j * (current mismatch)``, whose Jacobian has the negative
definite symmetric part ``diag(B, B)`` for an inductive network, so the
fast subsystem is stable.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InitializationError, NoEquilibriumError
from .sysmodel import Generator, NetworkModel, build_ybus


@dataclass(frozen=True)
class DynamicState:
    delta: np.ndarray
    omega: np.ndarray
    vm: np.ndarray
    theta: np.ndarray

    @property
    def n(self) -> int:
        return len(self.delta)

    @property
    def m(self) -> int:
        return len(self.vm)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.delta, self.omega, self.vm, self.theta])

    @classmethod
    def from_vector(cls, x: np.ndarray, n: int, m: int) -> "DynamicState":
        x = np.asarray(x, dtype=float)
        return cls(x[:n].copy(), x[n:2 * n].copy(), x[2 * n:2 * n + m].copy(), x[2 * n + m:].copy())

    def coi_drift(self, inertia: np.ndarray) -> tuple[float, float]:
        return float(inertia @ self.delta), float(inertia @ self.omega)


@dataclass(frozen=True)
class SPSConfig:
    eps: float = 1e-3
    # P_COI is recomputed on every evaluation; no caching is implemented.
    pcoi_cache: str = "recompute"

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class MachineCurrents:
    i_d: np.ndarray
    i_q: np.ndarray


@dataclass(frozen=True)
class SPSModel:
    """Everything the vector field needs: machine constants plus the folded Y-bus."""

    gen_bus: np.ndarray
    inertia: np.ndarray
    damping: np.ndarray
    p_m: np.ndarray
    e_q: np.ndarray
    xd: np.ndarray
    xq: np.ndarray
    Y: np.ndarray
    eps: float = 1e-3

    def __post_init__(self):
        for a in (self.gen_bus, self.inertia, self.damping, self.p_m, self.e_q, self.xd, self.xq, self.Y):
            a.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.inertia)

    @property
    def m(self) -> int:
        return self.Y.shape[0]

    @property
    def size(self) -> int:
        return 2 * self.n + 2 * self.m

    @property
    def total_inertia(self) -> float:
        return float(self.inertia.sum())

    def slices(self):
        n, m = self.n, self.m
        return slice(0, n), slice(n, 2 * n), slice(2 * n, 2 * n + m), slice(2 * n + m, 2 * n + 2 * m)

    def with_eps(self, eps: float) -> "SPSModel":
        return replace(self, eps=float(eps))

    def with_damping_scale(self, factor: float) -> "SPSModel":
        return replace(self, damping=self.damping * factor)

    def lossless(self) -> "SPSModel":
        """The same model with every network conductance (lines and loads) removed."""
        return replace(self, Y=1j * self.Y.imag)

    @property
    def is_lossless(self) -> bool:
        return bool(np.all(self.Y.real == 0.0))

    def rhs(self, x: np.ndarray) -> np.ndarray:
        return sps_rhs(self, x)

    def jac(self, x: np.ndarray) -> np.ndarray:
        return sps_jac(self, x)


# ------------------------------------------------------------------ transforms

def coi_transform(delta, omega, inertia):
    inertia = np.asarray(inertia, dtype=float)
    mt = inertia.sum()
    d0 = float(inertia @ delta / mt)
    w0 = float(inertia @ omega / mt)
    return np.asarray(delta) - d0, np.asarray(omega) - w0, d0, w0


def angle_shift_vector(inertia: np.ndarray, machine: int) -> np.ndarray:
    """COI-angle displacement produced by advancing one machine by 2*pi."""
    s = -2 * np.pi * inertia[machine] / inertia.sum() * np.ones(len(inertia))
    s[machine] += 2 * np.pi
    return s


# ---------------------------------------------------------------- model build

def init_dynamic_state(solution, net: NetworkModel) -> tuple[DynamicState, tuple[Generator, ...]]:
    """Internal EMFs, rotor angles and mechanical powers from a power-flow solution."""
    Y = build_ybus(net).matrix
    v = solution.voltage
    s_bus = v * np.conj(Y @ v)
    gens = []
    delta = np.zeros(net.n_gen)
    for i, g in enumerate(net.generators):
        k = g.bus - 1
        if abs(v[k]) < 1e-9:
            raise InitializationError(f"zero terminal voltage at generator bus {g.bus}")
        s_gen = s_bus[k] + complex(solution.p_load[k], solution.q_load[k])
        cur = np.conj(s_gen / v[k])
        d = np.angle(v[k] + 1j * g.xq_prime * cur)
        rot = np.exp(-1j * (d - np.pi / 2))
        idq, vdq = cur * rot, v[k] * rot
        e_q = vdq.imag + g.xd_prime * idq.real
        p_m = e_q * abs(v[k]) * np.sin(d - np.angle(v[k])) / g.xd_prime
        delta[i] = d
        gens.append(replace(g, e_q=float(e_q), p_m=float(p_m)))
    inertia = np.array([g.inertia for g in net.generators])
    dt, wt, d0, _ = coi_transform(delta, np.zeros(net.n_gen), inertia)
    state = DynamicState(dt, wt, solution.vm.copy(), solution.va - d0)
    return state, tuple(gens)


def build_sps_model(net: NetworkModel, gens, load_shunts: np.ndarray, eps: float = 1e-3) -> SPSModel:
    """SPS model on ``net``'s topology with the given constant-impedance loads folded in."""
    Y = build_ybus(net, include_loads=True, load_shunts=load_shunts).matrix.copy()
    if any(g.e_q is None or g.p_m is None for g in gens):
        raise InitializationError("generators must be initialized (e_q, p_m) first")
    return SPSModel(
        gen_bus=np.array([g.bus - 1 for g in gens], dtype=np.intp),
        inertia=np.array([g.inertia for g in gens]),
        damping=np.array([g.damping for g in gens]),
        p_m=np.array([g.p_m for g in gens]),
        e_q=np.array([g.e_q for g in gens]),
        xd=np.array([g.xd_prime for g in gens]),
        xq=np.array([g.xq_prime for g in gens]),
        Y=Y, eps=float(eps))


# -------------------------------------------------------------- vector field

def machine_currents(state: DynamicState, model: SPSModel) -> MachineCurrents:
    vb = state.vm[model.gen_bus]
    a = state.delta - state.theta[model.gen_bus]
    return MachineCurrents(i_d=(model.e_q - vb * np.cos(a)) / model.xd, i_q=vb * np.sin(a) / model.xq)


def electrical_power(model: SPSModel, x: np.ndarray) -> np.ndarray:
    sd, _, sv, st = model.slices()
    gb = model.gen_bus
    return model.e_q * x[sv][gb] * np.sin(x[sd] - x[st][gb]) / model.xd


def current_mismatch(model: SPSModel, x: np.ndarray) -> np.ndarray:
    """Machine current injection minus network current at every bus."""
    sd, _, sv, st = model.slices()
    d, V, th = x[sd], x[sv], x[st]
    gb = model.gen_bus
    a = d - th[gb]
    i_d = (model.e_q - V[gb] * np.cos(a)) / model.xd
    i_q = V[gb] * np.sin(a) / model.xq
    inj = np.zeros(model.m, dtype=complex)
    np.add.at(inj, gb, np.exp(1j * d) * (i_q - 1j * i_d))
    return inj - model.Y @ (V * np.exp(1j * th))


def sps_rhs(model: SPSModel, x: np.ndarray) -> np.ndarray:
    sd, sw, sv, st = model.slices()
    w, V, th = x[sw], x[sv], x[st]
    F = current_mismatch(model, x)
    R = np.exp(-1j * th) * F
    pe = electrical_power(model, x)
    p_coi = np.sum(model.p_m - pe)
    M = model.inertia
    dw = (-model.damping * w + model.p_m - pe - M / M.sum() * p_coi) / M
    return np.concatenate([w, dw, -R.imag / model.eps, R.real / (model.eps * V)])


def sps_vector_field(state: DynamicState, model: SPSModel, cfg: SPSConfig | None = None) -> np.ndarray:
    if cfg is not None and cfg.eps != model.eps:
        model = model.with_eps(cfg.eps)
    return sps_rhs(model, state.to_vector())


def sps_jac(model: SPSModel, x: np.ndarray) -> np.ndarray:
    n, m, N = model.n, model.m, model.size
    sd, sw, sv, st = model.slices()
    d, V, th = x[sd], x[sv], x[st]
    gb = model.gen_bus
    iv0, it0 = 2 * n, 2 * n + m
    eth = np.exp(1j * th)
    v = V * eth
    F = current_mismatch(model, x)
    R = np.conj(eth) * F

    dF = np.zeros((m, N), dtype=complex)
    dF[:, sv] = -model.Y * eth[None, :]
    dF[:, st] = -1j * model.Y * v[None, :]
    dpe = np.zeros((n, N))
    for i in range(n):
        k = gb[i]
        a = d[i] - th[k]
        ca, sa = np.cos(a), np.sin(a)
        i_d = (model.e_q[i] - V[k] * ca) / model.xd[i]
        i_q = V[k] * sa / model.xq[i]
        ed = np.exp(1j * d[i])
        inj = ed * (i_q - 1j * i_d)
        dd = 1j * inj + ed * (V[k] * ca / model.xq[i] - 1j * V[k] * sa / model.xd[i])
        dF[k, i] += dd
        dF[k, it0 + k] += -ed * (V[k] * ca / model.xq[i] - 1j * V[k] * sa / model.xd[i])
        dF[k, iv0 + k] += ed * (sa / model.xq[i] + 1j * ca / model.xd[i])
        c = model.e_q[i] / model.xd[i]
        dpe[i, i] = c * V[k] * ca
        dpe[i, it0 + k] = -c * V[k] * ca
        dpe[i, iv0 + k] = c * sa
    dR = np.conj(eth)[:, None] * dF
    dR[np.arange(m), it0 + np.arange(m)] += -1j * R

    J = np.zeros((N, N))
    J[sd, sw] = np.eye(n)
    M = model.inertia
    J[sw, :] = -dpe / M[:, None] + dpe.sum(axis=0)[None, :] / M.sum()
    J[np.arange(n, 2 * n), np.arange(n, 2 * n)] += -model.damping / M
    J[sv, :] = -dR.imag / model.eps
    J[st, :] = dR.real / (model.eps * V[:, None])
    J[it0 + np.arange(m), iv0 + np.arange(m)] += -R.real / (model.eps * V**2)
    return J


def sps_jacobian(state: DynamicState, model: SPSModel, cfg: SPSConfig | None = None) -> np.ndarray:
    if cfg is not None and cfg.eps != model.eps:
        model = model.with_eps(cfg.eps)
    return sps_jac(model, state.to_vector())


# ---------------------------------------------------------- algebraic solves

def _fast_residual(model: SPSModel, x: np.ndarray) -> np.ndarray:
    _, _, sv, st = model.slices()
    f = sps_rhs(model, x)
    return model.eps * np.r_[f[sv], f[st]]


def algebraic_jacobian(model: SPSModel, x: np.ndarray) -> np.ndarray:
    n = model.n
    J = sps_jac(model, x)
    fast = slice(2 * n, model.size)
    return model.eps * J[fast, fast]


def algebraic_sigma_min(model: SPSModel, x: np.ndarray) -> float:
    return float(np.linalg.svd(algebraic_jacobian(model, x), compute_uv=False)[-1])


def solve_algebraic(model: SPSModel, delta: np.ndarray, vm0: np.ndarray, th0: np.ndarray,
                    tol: float = 1e-12, max_iter: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Newton on the network equations for fixed machine angles."""
    from .integrate import vector_field  # deferred: integrate imports this module
    n, m = model.n, model.m
    rhs, jac = vector_field(model)
    x = np.concatenate([delta, np.zeros(n), vm0, th0])
    fast = slice(2 * n, model.size)
    for _ in range(max_iter):
        r = model.eps * rhs(x)[fast]
        if np.max(np.abs(r)) < tol:
            return x[2 * n:2 * n + m].copy(), x[2 * n + m:].copy()
        A = model.eps * jac(x)[fast, fast]
        try:
            step = np.linalg.solve(A, -r)
        except np.linalg.LinAlgError:
            break
        x[fast] += step
        if not np.all(np.isfinite(x)) or np.any(x[2 * n:2 * n + m] <= 0):
            break
    r = _fast_residual(model, x)
    if np.max(np.abs(r)) < 1e3 * tol:
        return x[2 * n:2 * n + m].copy(), x[2 * n + m:].copy()
    raise NoEquilibriumError("network equations did not converge")


def continue_algebraic(model: SPSModel, start: np.ndarray, delta: np.ndarray,
                       max_step: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Track the network solution from ``start`` to new machine angles.

    The path is the straight segment in machine-angle space, so bus angles
    keep the lift that is continuous along it.
    """
    n, m = model.n, model.m
    d0 = start[:n]
    vm, th = start[2 * n:2 * n + m].copy(), start[2 * n + m:].copy()
    span = float(np.max(np.abs(delta - d0)))
    k = max(1, int(np.ceil(span / max_step)))
    for j in range(1, k + 1):
        dj = d0 + (delta - d0) * (j / k)
        vm, th = solve_algebraic(model, dj, vm, th)
    return vm, th
