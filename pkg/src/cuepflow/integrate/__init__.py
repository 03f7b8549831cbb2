"""Adaptive implicit integration of the SPS model.

Trapezoidal steps are primary. The implicit-Euler solution over the same
step serves as the local error estimate, and after a rejection the halved
step is taken with implicit Euler (L-stable) before returning to
trapezoidal.

Two kernels implement the stepping loop: a compiled one (``_ckernel``)
used when it imports and the model is an :class:`~cuepflow.dynamics.SPSModel`,
and the pure-numpy ``_pykernel``. Set ``CUEPFLOW_BACKEND=python`` to force
the fallback.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field

import numpy as np

from ..dynamics import DynamicState, SPSModel
from ..errors import InputError
from . import _pykernel

try:
    from . import _ckernel
except ImportError:  # extension not built
    _ckernel = None

__all__ = ["BACKEND", "IntegratorConfig", "Scheme", "Termination", "Trajectory",
           "available_backends", "integrate", "step_implicit", "vector_field"]


def _select_backend() -> str:
    want = os.environ.get("CUEPFLOW_BACKEND", "").strip().lower()
    if want == "python" or _ckernel is None:
        return "python"
    return "compiled"


BACKEND = _select_backend()


def available_backends() -> tuple[str, ...]:
    return ("python",) if _ckernel is None else ("python", "compiled")


def _kernel(model, backend: str | None):
    name = backend or BACKEND
    if name == "compiled":
        if _ckernel is None:
            raise InputError("compiled kernel is not available")
        if isinstance(model, SPSModel):
            return _ckernel
    elif name != "python":
        raise InputError(f"unknown backend {name!r}")
    return _pykernel


def vector_field(model, backend: str | None = None):
    """``(rhs, jac)`` callables for ``model`` on the selected backend."""
    k = _kernel(model, backend)
    if k is _ckernel:
        return (lambda x: _ckernel.rhs(model, x)), (lambda x: _ckernel.jac(model, x))
    return model.rhs, model.jac


class Scheme(enum.IntEnum):
    TRAPEZOIDAL = _pykernel.TRAPEZOIDAL
    IMPLICIT_EULER = _pykernel.IMPLICIT_EULER


class Termination(enum.IntEnum):
    CONVERGED = _pykernel.CONVERGED
    HORIZON = _pykernel.HORIZON
    DIVERGED = _pykernel.DIVERGED
    SOLVER_FAILURE = _pykernel.SOLVER_FAILURE
    # reached a 2*pi image of the target: the same physical point, another basin copy
    ELSEWHERE = _pykernel.ELSEWHERE

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


@dataclass(frozen=True)
class IntegratorConfig:
    h0: float = 1e-3
    hmin: float = 1e-6
    hmax: float = 0.05
    newton_tol: float = 1e-9
    local_tol: float = 5e-3
    horizon: float = 60.0
    exit_radius: float = 0.01
    blowup: float = 100.0
    grow_after: int = 5
    grow_factor: float = 1.5
    max_newton: int = 10

    def __post_init__(self):
        if not (0 < self.hmin <= self.h0 <= self.hmax):
            raise InputError("need 0 < hmin <= h0 <= hmax")
        if not (self.newton_tol > 0 and self.local_tol > 0):
            raise InputError("tolerances must be positive")
        if not (self.horizon > 0 and self.exit_radius > 0 and self.blowup > 0):
            raise InputError("horizon, exit radius and blow-up bound must be positive")
        if self.grow_after < 1 or self.grow_factor < 1 or self.max_newton < 1:
            raise InputError("invalid step-growth or Newton settings")

    def as_tuple(self) -> tuple:
        return (float(self.h0), float(self.hmin), float(self.hmax), float(self.newton_tol),
                float(self.local_tol), float(self.horizon), float(self.exit_radius),
                float(self.blowup), int(self.grow_after), float(self.grow_factor),
                int(self.max_newton))


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray = field(repr=False)
    reason: Termination
    final: np.ndarray = field(repr=False)
    t_final: float
    accepted: int
    rejected: int
    implicit_euler_steps: int

    @property
    def converged(self) -> bool:
        return self.reason == Termination.CONVERGED

    def state(self, j: int, n: int, m: int) -> DynamicState:
        return DynamicState.from_vector(self.states[j], n, m)

    def to_csv_rows(self):
        for t, x in zip(self.times, self.states):
            yield [float(t), *map(float, x)]


def _as_vector(state) -> np.ndarray:
    if isinstance(state, DynamicState):
        return state.to_vector()
    return np.asarray(state, dtype=float)


def step_implicit(state, h: float, scheme: Scheme | int, model, newton_tol: float = 1e-9,
                  max_newton: int = 10, backend: str | None = None):
    """One implicit step. Returns ``(x_next, converged, newton_iterations)``.

    ``model`` needs ``rhs(x)`` and ``jac(x)``; anything other than an
    :class:`SPSModel` runs on the numpy kernel.
    """
    if not h > 0:
        raise InputError("step must be positive")
    x0 = _as_vector(state)
    return _kernel(model, backend).step(model, x0, float(h), int(scheme), newton_tol, max_newton)


def integrate(initial, cfg: IntegratorConfig, model, target=None, record: bool = True,
              backend: str | None = None) -> Trajectory:
    """Integrate until the target is reached, the horizon ends, or the run fails.

    Convergence is judged on the machine coordinates (delta, omega) against
    ``target`` with ``cfg.exit_radius``. Without a target only the horizon,
    blow-up and solver-failure exits apply.
    """
    x0 = _as_vector(initial)
    if not np.all(np.isfinite(x0)):
        raise InputError("initial state must be finite")
    tg = None if target is None else _as_vector(getattr(target, "x", target))
    k = _kernel(model, backend)
    t, x, reason, acc, rej, ie, times, states = k.run(model, x0, tg, cfg.as_tuple(), bool(record))
    if not record:
        times = np.array([0.0, t]) if t > 0 else np.array([0.0])
        states = np.vstack([x0, x]) if t > 0 else x0[None, :]
    return Trajectory(times=np.asarray(times), states=np.asarray(states), reason=Termination(reason),
                      final=np.asarray(x), t_final=float(t), accepted=int(acc), rejected=int(rej),
                      implicit_euler_steps=int(ie))
