"""Energy function of the structure-preserving model and closest-UEP selection.

With ``v = V e^{j theta}``, ``B~ = Im(Y) - diag(1/X'd at machine buses)``
and angles relative to the SEP ``s``::

    W(x) = 1/2 sum M w^2 - sum Pm (delta - delta_s)
           + Phi(x) - Phi(s) + W_G(s -> x)

    Phi  = -1/2 v^H B~ v - sum E V_g cos(delta - theta_g) / X'd
    W_G  = integral of Im((G v)^H dv) along the straight segment
           from s to x in (delta, V, theta)

For a lossless network ``W_G = 0`` and along any trajectory
``dW/dt = -sum D w^2 - |F|^2 / eps <= 0`` exactly, F being the nodal current
mismatch. Conductances make ``W_G`` path dependent; the straight segment is
the documented choice.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import SPSModel
from .errors import NoBoundaryUEPError

log = logging.getLogger(__name__)

SEGMENTS = 64
TIE_TOL = 1e-9


@dataclass(frozen=True)
class EnergyValue:
    total: float
    kinetic: float
    potential: float
    correction: float
    reference: str = "SEP"


def _unpack(model: SPSModel, x):
    x = x.to_vector() if hasattr(x, "to_vector") else np.asarray(getattr(x, "x", x), dtype=float)
    sd, sw, sv, st = model.slices()
    return x[sd], x[sw], x[sv], x[st]


def _phi(model: SPSModel, d, V, th) -> float:
    gb = model.gen_bus
    Bt = model.Y.imag.copy()
    np.subtract.at(Bt, (gb, gb), 1.0 / model.xd)
    v = V * np.exp(1j * th)
    net = -0.5 * float(np.real(np.conj(v) @ Bt @ v))
    mach = -float(np.sum(model.e_q * V[gb] * np.cos(d - th[gb]) / model.xd))
    return net + mach


def conductance_correction(model: SPSModel, x, sep, segments: int = SEGMENTS,
                           rule: str = "simpson") -> float:
    """Fixed-node quadrature of the conductance line integral from ``sep`` to ``x``.

    ``rule`` is ``"simpson"`` (composite Simpson, even ``segments``) or
    ``"trapezoid"``.
    """
    G = model.Y.real
    if not np.any(G):
        return 0.0
    _, _, V0, t0 = _unpack(model, sep)
    _, _, V1, t1 = _unpack(model, x)
    dV, dt = V1 - V0, t1 - t0
    s = np.linspace(0.0, 1.0, segments + 1)
    V = V0[None, :] + s[:, None] * dV[None, :]
    th = t0[None, :] + s[:, None] * dt[None, :]
    e = np.exp(1j * th)
    v = V * e
    dv = e * (dV[None, :] + 1j * V * dt[None, :])
    f = np.imag(np.einsum("sk,sk->s", np.conj(v @ G.T), dv))
    if rule == "trapezoid":
        return float(np.sum(0.5 * (f[1:] + f[:-1])) / segments)
    if rule != "simpson" or segments % 2:
        raise ValueError("simpson needs an even segment count")
    return float((f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum()) / (3 * segments))


def energy(state, sep, model: SPSModel, segments: int = SEGMENTS, reference: str = "SEP") -> EnergyValue:
    """Energy of ``state`` relative to ``sep`` (both state vectors or objects carrying one)."""
    d, w, V, th = _unpack(model, state)
    ds, _, Vs, ts = _unpack(model, sep)
    kin = 0.5 * float(np.sum(model.inertia * w**2))
    pot = -float(model.p_m @ (d - ds)) + _phi(model, d, V, th) - _phi(model, ds, Vs, ts)
    cor = conductance_correction(model, state, sep, segments)
    return EnergyValue(total=kin + pot + cor, kinetic=kin, potential=pot, correction=cor,
                       reference=reference)


def energy_along(states: np.ndarray, sep, model: SPSModel, segments: int = SEGMENTS) -> np.ndarray:
    return np.array([energy(x, sep, model, segments).total for x in states])


def closest_uep(boundary_ueps: Sequence, sep, model: SPSModel, offset: float = 0.0,
                return_ties: bool = False):
    """Minimum-energy UEP among those on the boundary.

    ``offset`` shifts every energy by a constant, which leaves the choice
    unchanged. Energies within ``TIE_TOL`` of the minimum are reported as
    ties when ``return_ties`` is set.
    """
    if not boundary_ueps:
        raise NoBoundaryUEPError("no UEP on the stability boundary")
    vals = []
    for u in boundary_ueps:
        e = u.energy if isinstance(u.energy, EnergyValue) else energy(u, sep, model)
        vals.append(e.total + offset)
    vals = np.array(vals)
    j = int(np.argmin(vals))
    ties = tuple(u for i, u in enumerate(boundary_ueps) if i != j and abs(vals[i] - vals[j]) < TIE_TOL)
    if ties:
        log.warning("closest-UEP tie between %s", [boundary_ueps[j].label] + [t.label for t in ties])
    return (boundary_ueps[j], ties) if return_ties else boundary_ueps[j]
