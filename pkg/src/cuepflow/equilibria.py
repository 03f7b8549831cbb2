"""Equilibria of the post-switching SPS model: Newton solve, classification,
neighborhood search and stability-boundary membership.

The COI-frame vector field is invariant under a common shift of every
machine and bus angle, so its Jacobian always has the zero eigenvalue with
eigenvector ``r = (1_n, 0_n, 0_m, 1_m)``. Equilibria are pinned by the COI
constraint ``sum M_i delta_i = 0`` and classification works on the
quotient by ``r``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import null_space

from .dynamics import SPSModel, continue_algebraic
from .errors import InputError, NearBifurcationError, NoEquilibriumError
from .integrate import IntegratorConfig, Termination, Trajectory, integrate, vector_field

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8
HYPERBOLIC_TOL = 1e-6
BOUNDARY_ETA = 1e-4


@dataclass(frozen=True)
class EquilibriumPoint:
    x: np.ndarray = field(repr=False)
    k: int
    eigenvalues: np.ndarray = field(repr=False)
    unstable_vectors: np.ndarray = field(repr=False)
    residual: float
    near_degenerate: bool = False
    label: str = ""
    energy: object | None = field(default=None, repr=False)
    on_boundary: bool | None = None
    iterations: int = 0

    @property
    def kind(self) -> str:
        return "SEP" if self.k == 0 else f"type-{self.k} UEP"

    @property
    def is_sep(self) -> bool:
        return self.k == 0

    def delta(self, n: int) -> np.ndarray:
        return self.x[:n]

    def with_label(self, label: str) -> "EquilibriumPoint":
        return replace(self, label=label)


@dataclass(frozen=True)
class SearchSpec:
    n_rays: int = 24
    radii: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    dedupe: float = 1e-4
    seed: int = 0
    max_distance: float = 4.0

    def __post_init__(self):
        if self.n_rays < 1:
            raise InputError("need at least one ray")
        r = np.asarray(self.radii, dtype=float)
        if len(r) == 0 or np.any(r <= 0) or np.any(np.diff(r) <= 0):
            raise InputError("radii must be positive and increasing")
        if not self.dedupe > 0:
            raise InputError("dedupe distance must be positive")

    def angles(self) -> np.ndarray:
        # seeded rotation of an equally spaced fan keeps runs reproducible
        off = np.random.default_rng(self.seed).uniform(0, 2 * np.pi / self.n_rays)
        return off + 2 * np.pi * np.arange(self.n_rays) / self.n_rays


@dataclass(frozen=True)
class BoundaryResult:
    verdict: bool | None
    witnesses: tuple[Trajectory, ...] = field(repr=False)
    reasons: tuple[str, ...] = ()

    @property
    def indeterminate(self) -> bool:
        return self.verdict is None


# ------------------------------------------------------------------ helpers

def rotation_vector(model: SPSModel) -> np.ndarray:
    r = np.zeros(model.size)
    sd, _, _, st = model.slices()
    r[sd] = 1.0
    r[st] = 1.0
    return r / np.linalg.norm(r)


def project_coi(model: SPSModel, x: np.ndarray) -> np.ndarray:
    """Shift all angles by a common amount so that sum M_i delta_i = 0."""
    sd, _, _, st = model.slices()
    M = model.inertia
    c = float(M @ x[sd]) / M.sum()
    y = np.array(x, dtype=float)
    y[sd] -= c
    y[st] -= c
    return y


def angle_distance(model: SPSModel, a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance over all machine angles."""
    n = model.n
    return float(np.linalg.norm(np.asarray(a)[:n] - np.asarray(b)[:n]))


def machine_distance(model: SPSModel, a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance over (delta, omega); the convergence metric."""
    n = model.n
    return float(np.linalg.norm(np.asarray(a)[:2 * n] - np.asarray(b)[:2 * n]))


def _residual_system(model: SPSModel, z: np.ndarray, fns=None):
    """Equilibrium equations over z = (delta, V, theta) with omega = 0."""
    n, m = model.n, model.m
    rhs, jac = fns or (model.rhs, model.jac)
    x = np.concatenate([z[:n], np.zeros(n), z[n:]])
    f = rhs(x)
    J = jac(x)
    M = model.inertia
    keep = np.r_[np.arange(n), np.arange(2 * n, 2 * n + 2 * m)]
    rows = np.r_[np.arange(n, 2 * n), np.arange(2 * n, 2 * n + 2 * m)]
    F = f[rows].copy()
    A = J[np.ix_(rows, keep)].copy()
    # swing rows in power units, fast rows in current units
    F[:n] *= M
    A[:n] *= M[:, None]
    F[n:] *= model.eps
    A[n:] *= model.eps
    # swing rows sum to zero identically; the last one becomes the COI constraint
    F[n - 1] = M @ z[:n]
    A[n - 1] = 0.0
    A[n - 1, :n] = M
    return F, A, x, f


def solve_equilibrium(seed, model: SPSModel, tol: float = 1e-12, max_iter: int = 50,
                      confirm: bool = True, cfg: IntegratorConfig | None = None,
                      label: str = "") -> EquilibriumPoint:
    """Damped Newton from ``seed`` followed by classification.

    A point classified as SEP is confirmed by integrating from a 1e-3
    perturbation of its angles; failure to return raises
    :class:`NoEquilibriumError`.
    """
    if hasattr(seed, "to_vector"):
        x0 = seed.to_vector()
    else:
        x0 = np.asarray(getattr(seed, "x", seed), dtype=float)
    if not np.all(np.isfinite(x0)):
        raise InputError("seed must be finite")
    n, m = model.n, model.m
    x0 = project_coi(model, x0)
    z = np.concatenate([x0[:n], x0[2 * n:]])
    fns = vector_field(model)
    F, A, x, f = _residual_system(model, z, fns)
    nrm = float(np.max(np.abs(F)))
    it = 0
    while nrm > tol:
        if it >= max_iter:
            raise NoEquilibriumError(f"Newton did not converge (residual {nrm:.3e})")
        try:
            dz = np.linalg.solve(A, -F)
            bad = not np.all(np.isfinite(dz)) or float(np.max(np.abs(dz))) > 1e8
        except np.linalg.LinAlgError:
            bad = True
        if bad:
            if not np.all(np.isfinite(A)):
                raise NoEquilibriumError("non-finite Jacobian")
            s = np.linalg.svd(A, compute_uv=False)
            raise NearBifurcationError("singular equilibrium Jacobian", sigma_min=float(s[-1]))
        t = 1.0
        while True:
            zt = z + t * dz
            if np.all(zt[n:n + m] > 0):
                Ft, At, xt, ft = _residual_system(model, zt, fns)
                nt = float(np.max(np.abs(Ft)))
                if np.isfinite(nt) and (nt < nrm or t < 1e-3):
                    break
            t *= 0.5
            if t < 1e-4:
                raise NoEquilibriumError("line search failed")
        z, F, A, x, f, nrm = zt, Ft, At, xt, ft, nt
        it += 1
        if np.any(np.abs(z[:n]) > 50):
            raise NoEquilibriumError("Newton iterate left the angle range")
    res = float(np.max(np.abs(f)))
    if res >= RESIDUAL_TOL:
        raise NoEquilibriumError(f"residual {res:.3e} above tolerance")
    eq = classify(x, model, residual=res, iterations=it, label=label)
    if confirm and eq.is_sep:
        confirm_sep(eq, model, cfg)
    return eq


def confirm_sep(eq: EquilibriumPoint, model: SPSModel, cfg: IntegratorConfig | None = None,
                size: float = 1e-3) -> Trajectory:
    n = model.n
    x = eq.x.copy()
    x[:n] += size * np.linspace(1.0, -1.0, n)
    x = project_coi(model, x)
    vm, th = continue_algebraic(model, eq.x, x[:n])
    x[2 * n:] = np.r_[vm, th]
    tr = integrate(x, cfg or IntegratorConfig(), model, target=eq.x, record=False)
    if tr.reason != Termination.CONVERGED:
        raise NoEquilibriumError(f"SEP confirmation run ended with {tr.reason.label}")
    return tr


def classify(x: np.ndarray, model: SPSModel, residual: float | None = None,
             iterations: int = 0, label: str = "") -> EquilibriumPoint:
    """Eigen-classification on the quotient by the common angle shift."""
    x = np.asarray(x, dtype=float)
    J = model.jac(x)
    r = rotation_vector(model)
    U = null_space(r[None, :])
    A = U.T @ J @ U
    lam, vec = np.linalg.eig(A)
    order = np.argsort(-lam.real)
    lam, vec = lam[order], vec[:, order]
    unstable = lam.real > HYPERBOLIC_TOL
    near = bool(np.any(np.abs(lam.real) <= HYPERBOLIC_TOL))
    k = int(unstable.sum())
    cols = []
    taken = 0
    for j in np.flatnonzero(unstable):
        if taken >= k:
            break
        v = U @ vec[:, j]
        if abs(lam[j].imag) > 1e-12:
            # complex pair: its real and imaginary parts span the real subspace
            if lam[j].imag > 0:
                cols += [v.real, v.imag]
                taken += 2
            continue
        cols.append(v.real)
        taken += 1
    V = np.array([project_coi(model, c) for c in cols]).T if cols else np.zeros((model.size, 0))
    if V.size:
        V = V / np.linalg.norm(V, axis=0)
    if residual is None:
        residual = float(np.max(np.abs(model.rhs(x))))
    if near:
        log.warning("near-degenerate equilibrium: eigenvalue real part within %.0e", HYPERBOLIC_TOL)
    return EquilibriumPoint(x=x, k=k, eigenvalues=lam, unstable_vectors=V, residual=residual,
                            near_degenerate=near, iterations=iterations, label=label)


# ------------------------------------------------------------------ search

def _seed_state(model: SPSModel, sep: EquilibriumPoint, d12: np.ndarray) -> np.ndarray | None:
    n = model.n
    M = model.inertia
    d = np.zeros(n)
    d[:2] = d12
    d[2:] = sep.x[2:n]
    if n > 2:
        # spread the COI remainder over machines 3..n in proportion to their offsets
        rest = -(M[:2] @ d[:2] + M[2:] @ d[2:]) / M[2:].sum()
        d[2:] += rest
    else:
        d[1] = -M[0] * d[0] / M[1]
    try:
        vm, th = continue_algebraic(model, sep.x, d)
    except NoEquilibriumError:
        return None
    return np.concatenate([d, np.zeros(n), vm, th])


def find_neighborhood_ueps(sep: EquilibriumPoint, spec: SearchSpec, model: SPSModel) -> list[EquilibriumPoint]:
    """Multi-start Newton from seeds on rays around the SEP in the (delta_1, delta_2) plane.

    Equilibria with k = 0 (the SEP and its 2*pi images) are dropped, as are
    UEPs farther than ``spec.max_distance`` in machine-angle space. The list
    is sorted by that distance and deduplicated.
    """
    if not sep.is_sep:
        raise InputError("search needs a SEP")
    found: list[EquilibriumPoint] = []
    s12 = sep.x[:2]
    for r in spec.radii:
        for a in spec.angles():
            seed = _seed_state(model, sep, s12 + r * np.array([np.cos(a), np.sin(a)]))
            if seed is None:
                continue
            try:
                eq = solve_equilibrium(seed, model, confirm=False)
            except (NoEquilibriumError, NearBifurcationError):
                continue
            if eq.is_sep:
                continue
            if angle_distance(model, eq.x, sep.x) > spec.max_distance:
                continue
            if any(np.linalg.norm(eq.x - f.x) < spec.dedupe for f in found):
                continue
            found.append(eq)
    found.sort(key=lambda e: angle_distance(model, e.x, sep.x))
    if not found:
        log.warning("no UEP found in the neighborhood")
    return [e.with_label(f"UEP{i + 1}") for i, e in enumerate(found)]


# ------------------------------------------------------------------ boundary

def _directions(uep: EquilibriumPoint, n_extra: int = 8, seed: int = 0) -> list[np.ndarray]:
    V = uep.unstable_vectors
    dirs = []
    for j in range(V.shape[1]):
        dirs += [V[:, j], -V[:, j]]
    if V.shape[1] > 1:
        rng = np.random.default_rng(seed)
        for _ in range(n_extra):
            c = rng.normal(size=V.shape[1])
            u = V @ (c / np.linalg.norm(c))
            dirs.append(u / np.linalg.norm(u))
    return dirs


def on_stability_boundary(uep: EquilibriumPoint, sep: EquilibriumPoint, model: SPSModel,
                          cfg: IntegratorConfig | None = None, eta: float = BOUNDARY_ETA,
                          seed: int = 0, record: bool = False) -> BoundaryResult:
    """Whether the unstable manifold of ``uep`` reaches ``sep``.

    ``True`` as soon as one trajectory from ``uep + eta*u`` converges to the
    SEP. ``False`` when every trajectory ends with a definite other outcome
    (blow-up, a 2*pi image of the SEP, or a solver breakdown at a singular
    surface). ``None`` when some run exhausted the horizon instead.
    """
    if uep.is_sep or np.linalg.norm(uep.x - sep.x) < 1e-9:
        raise InputError("boundary test needs a UEP distinct from the SEP")
    cfg = cfg or IntegratorConfig()
    trs, reasons = [], []
    for u in _directions(uep, seed=seed):
        tr = integrate(uep.x + eta * u, cfg, model, target=sep.x, record=record)
        trs.append(tr)
        reasons.append(tr.reason.label)
        if tr.reason == Termination.CONVERGED:
            return BoundaryResult(True, tuple(trs), tuple(reasons))
    definite = {Termination.DIVERGED, Termination.ELSEWHERE, Termination.SOLVER_FAILURE}
    verdict = False if all(t.reason in definite for t in trs) else None
    return BoundaryResult(verdict, tuple(trs), tuple(reasons))


def match_labels(previous: Sequence[EquilibriumPoint], current: Sequence[EquilibriumPoint],
                 model: SPSModel, max_distance: float = 1.0) -> list[EquilibriumPoint]:
    """Carry labels from ``previous`` onto ``current`` by greedy nearest-state pairing.

    Unmatched current points get fresh labels after the highest existing number.
    """
    pairs = sorted(((angle_distance(model, p.x, c.x), i, j)
                    for i, p in enumerate(previous) for j, c in enumerate(current)))
    used_p, used_c, lab = set(), set(), {}
    for d, i, j in pairs:
        if d > max_distance or i in used_p or j in used_c:
            continue
        used_p.add(i)
        used_c.add(j)
        lab[j] = previous[i].label
    nums = [int(p.label[3:]) for p in previous if p.label.startswith("UEP") and p.label[3:].isdigit()]
    nxt = max(nums, default=0) + 1
    out = []
    for j, c in enumerate(current):
        if j in lab:
            out.append(c.with_label(lab[j]))
        else:
            out.append(c.with_label(f"UEP{nxt}"))
            nxt += 1
    return out
