"""Pure-numpy integration kernel; reference and fallback for the compiled one.

Both kernels implement the same algorithm and return the same tuple layout,
see :func:`run`.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import lu_factor, lu_solve

CONVERGED, HORIZON, DIVERGED, SOLVER_FAILURE, ELSEWHERE = range(5)
TRAPEZOIDAL, IMPLICIT_EULER = 0, 1


def _newton(model, x0, f0, J, h, scheme, newton_tol, max_newton):
    c = 0.5 if scheme == TRAPEZOIDAL else 1.0
    N = len(x0)
    lu = lu_factor(np.eye(N) - h * c * J)
    x = x0.copy()
    base = x0 + h * (1.0 - c) * f0
    prev = np.inf
    refreshed = False
    for it in range(1, max_newton + 1):
        G = x - base - h * c * model.rhs(x)
        dx = lu_solve(lu, -G)
        x = x + dx
        nrm = np.max(np.abs(dx))
        if not np.isfinite(nrm):
            return x, False, it
        if nrm <= newton_tol:
            return x, True, it
        if it >= 2 and nrm > 0.5 * prev and not refreshed:
            lu = lu_factor(np.eye(N) - h * c * model.jac(x))
            refreshed = True
        prev = nrm
    return x, False, max_newton


def step(model, x0, h, scheme, newton_tol=1e-9, max_newton=10):
    x0 = np.asarray(x0, dtype=float)
    return _newton(model, x0, model.rhs(x0), model.jac(x0), h, scheme, newton_tol, max_newton)


def _image_distance(x, target, inertia, n):
    """Distance to the nearest 2*pi image of ``target`` and whether it is a true image."""
    rel = (x[1:n] - x[0]) - (target[1:n] - target[0])
    k = np.round(rel / (2 * np.pi))
    if not np.any(k):
        return np.inf, False
    shift = np.zeros(n)
    shift[1:] = 2 * np.pi * k
    shift -= inertia @ shift / inertia.sum()
    d = np.concatenate([x[:n] - target[:n] - shift, x[n:2 * n] - target[n:2 * n]])
    return float(np.sqrt(d @ d)), True


def run(model, x0, target, cfg, record):
    """Adaptive hybrid trapezoidal / implicit-Euler integration.

    ``cfg = (h0, hmin, hmax, newton_tol, loc_tol, horizon, exit_radius,
    blowup, grow_after, grow_factor, max_newton)``.

    Returns ``(t, x, reason, accepted, rejected, ie_steps, times, states)``;
    ``times`` and ``states`` are ``None`` unless ``record``.
    """
    h0, hmin, hmax, ntol, ltol, T, radius, blowup, grow_after, grow, max_newton = cfg
    grow_after, max_newton = int(grow_after), int(max_newton)
    n = model.n
    inertia = np.asarray(model.inertia)
    x = np.array(x0, dtype=float)
    has_target = target is not None
    if has_target:
        target = np.asarray(target, dtype=float)
    times = [0.0] if record else None
    states = [x.copy()] if record else None
    t, h = 0.0, h0
    accepted = rejected = ie_steps = 0
    succ = 0
    fallback = False

    def verdict(x):
        if not np.all(np.isfinite(x)):
            return SOLVER_FAILURE
        if np.max(np.abs(x[:n])) > blowup:
            return DIVERGED
        if has_target:
            d = np.concatenate([x[:2 * n] - target[:2 * n]])
            if np.sqrt(d @ d) < radius:
                return CONVERGED
            di, img = _image_distance(x, target, inertia, n)
            if img and di < radius:
                return ELSEWHERE
        return -1

    reason = verdict(x)
    while reason < 0:
        if T - t < hmin:
            reason = HORIZON
            break
        hh = min(h, T - t)
        f0 = model.rhs(x)
        J0 = model.jac(x)
        xT, okT, _ = _newton(model, x, f0, J0, hh, TRAPEZOIDAL, ntol, max_newton)
        xE, okE, _ = _newton(model, x, f0, J0, hh, IMPLICIT_EULER, ntol, max_newton)
        ok = False
        if okT and okE:
            scale = ltol * (1.0 + np.maximum(np.abs(x), np.abs(xT)))
            err = np.max(np.abs(xT - xE) / scale)
            if err <= 1.0:
                ok = True
                xn = xE if fallback else xT
        elif fallback and okE:
            ok = True
            xn = xE
        if not ok:
            rejected += 1
            succ = 0
            fallback = True
            h = 0.5 * hh
            if h < hmin:
                reason = SOLVER_FAILURE
                break
            continue
        if fallback:
            ie_steps += 1
        fallback = False
        t += hh
        x = xn
        accepted += 1
        if record:
            times.append(t)
            states.append(x.copy())
        succ += 1
        if succ >= grow_after:
            h = min(h * grow, hmax)
            succ = 0
        reason = verdict(x)
    if record:
        return t, x, reason, accepted, rejected, ie_steps, np.array(times), np.array(states)
    return t, x, reason, accepted, rejected, ie_steps, None, None
