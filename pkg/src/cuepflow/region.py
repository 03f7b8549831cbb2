"""Grid-sampled stability region in the (delta_1, delta_2) plane.

Each cell centre becomes an initial state with zero speeds, the remaining
machine angles fixed by the COI constraint and the network voltages solved
by continuation from a neighbouring cell (breadth-first from the SEP cell),
which keeps one consistent branch and angle lift across the grid.
"""
from __future__ import annotations

import logging
import warnings
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .dynamics import SPSModel, solve_algebraic
from .energy import energy
from .errors import ConsistencyError, InputError, NoEquilibriumError
from .integrate import IntegratorConfig, Termination, integrate, vector_field

log = logging.getLogger(__name__)

OUT, IN, INFEASIBLE, INDETERMINATE = 0, 1, 2, 3
VERDICT_NAMES = {OUT: "out", IN: "in", INFEASIBLE: "infeasible", INDETERMINATE: "indeterminate"}

REGION_RADIUS = 0.1
PRUNE_FRACTION = 0.05
EQUILIBRIUM_TOL = 1e-8


class DetachedRegionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GridSpec:
    resolution: int = 50
    margin: float = 0.3
    radius: float = REGION_RADIUS
    # fixed (lo1, hi1, lo2, hi2) window; None means bounding box of SEP and UEPs plus margin
    window: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.resolution < 1:
            raise InputError("resolution must be positive")
        if not self.margin > 0:
            raise InputError("margin must be positive")
        if self.window is not None:
            a, b, c, d = self.window
            if not (b > a and d > c):
                raise InputError("window bounds must be increasing")


@dataclass(frozen=True)
class RegionGrid:
    center: tuple[float, float]
    half_widths: tuple[float, float]
    resolution: int
    d1: np.ndarray = field(repr=False)
    d2: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)
    verdict: np.ndarray = field(repr=False)
    pruned: np.ndarray = field(repr=False)
    sep_cell: tuple[int, int]
    detached: bool = False

    @property
    def cell_area(self) -> float:
        return (2 * self.half_widths[0] / self.resolution) * (2 * self.half_widths[1] / self.resolution)

    @property
    def count(self) -> int:
        return int(np.sum((self.verdict == IN) & ~self.pruned))

    @property
    def window(self) -> tuple[float, float, float, float]:
        (c1, c2), (h1, h2) = self.center, self.half_widths
        return c1 - h1, c1 + h1, c2 - h2, c2 + h2

    def feasible(self) -> np.ndarray:
        return self.verdict != INFEASIBLE


def _window(sep, ueps, margin: float) -> tuple[float, float, float, float]:
    pts = np.array([np.asarray(sep.x)[:2]] + [np.asarray(u.x)[:2] for u in ueps])
    lo, hi = pts.min(axis=0) - margin, pts.max(axis=0) + margin
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def cell_delta(model: SPSModel, d1: float, d2: float) -> np.ndarray:
    """Machine angles for a cell: delta_1, delta_2 given, the rest COI-consistent.

    For n > 3 the remaining machines share one common angle.
    """
    M = model.inertia
    n = model.n
    d = np.empty(n)
    d[0], d[1] = d1, d2
    if n > 2:
        d[2:] = -(M[0] * d1 + M[1] * d2) / M[2:].sum()
    return d


def build_grid(sep, ueps: Sequence, model: SPSModel, spec: GridSpec | None = None) -> RegionGrid:
    """Initial states on the cell centres; cells without a network solution are infeasible."""
    spec = spec or GridSpec()
    N = spec.resolution
    lo1, hi1, lo2, hi2 = spec.window or _window(sep, ueps, spec.margin)
    h1, h2 = (hi1 - lo1) / N, (hi2 - lo2) / N
    d1 = lo1 + h1 * (np.arange(N) + 0.5)
    d2 = lo2 + h2 * (np.arange(N) + 0.5)
    n, m = model.n, model.m
    sx = np.asarray(sep.x)
    i0 = int(np.clip(np.floor((sx[0] - lo1) / h1), 0, N - 1))
    j0 = int(np.clip(np.floor((sx[1] - lo2) / h2), 0, N - 1))
    states = np.full((N, N, model.size), np.nan)
    verdict = np.full((N, N), INDETERMINATE, dtype=np.int8)

    def solve_cell(i, j, parent):
        d = cell_delta(model, d1[i], d2[j])
        vm, th = solve_algebraic(model, d, parent[2 * n:2 * n + m], parent[2 * n + m:])
        return np.concatenate([d, np.zeros(n), vm, th])

    # SEP cell: continue from the SEP itself
    try:
        start = solve_cell(i0, j0, sx)
    except NoEquilibriumError:
        raise ConsistencyError("network has no solution at the SEP cell") from None
    states[i0, j0] = start
    seen = np.zeros((N, N), dtype=bool)
    seen[i0, j0] = True
    queue = deque([(i0, j0)])
    while queue:
        i, j = queue.popleft()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if not (0 <= a < N and 0 <= b < N) or seen[a, b]:
                continue
            seen[a, b] = True
            try:
                states[a, b] = solve_cell(a, b, states[i, j])
            except NoEquilibriumError:
                verdict[a, b] = INFEASIBLE
                continue
            queue.append((a, b))
    # cells only reachable through infeasible ones stay unsolved
    verdict[np.isnan(states[:, :, 0]) & (verdict != INFEASIBLE)] = INFEASIBLE
    return RegionGrid(center=((lo1 + hi1) / 2, (lo2 + hi2) / 2), half_widths=((hi1 - lo1) / 2, (hi2 - lo2) / 2),
                      resolution=N, d1=d1, d2=d2, states=states, verdict=verdict,
                      pruned=np.zeros((N, N), dtype=bool), sep_cell=(i0, j0))


def classify_point(initial, sep, model: SPSModel, cfg: IntegratorConfig | None = None,
                   radius: float = REGION_RADIUS) -> int:
    """IN when the trajectory comes within ``radius`` of the SEP in (delta, omega).

    A start that is itself an equilibrium away from the SEP is OUT without
    integrating: the exact trajectory never moves, and rounding would only
    push it along whichever unstable manifold happens to win.
    """
    cfg = replace(cfg or IntegratorConfig(), exit_radius=radius)
    target = np.asarray(getattr(sep, "x", sep))
    x0 = initial.to_vector() if hasattr(initial, "to_vector") else np.asarray(initial, dtype=float)
    n = model.n
    if (np.linalg.norm(x0[:2 * n] - target[:2 * n]) >= radius
            and np.max(np.abs(vector_field(model)[0](x0))) < EQUILIBRIUM_TOL):
        return OUT
    tr = integrate(x0, cfg, model, target=target, record=False)
    if tr.reason == Termination.CONVERGED:
        return IN
    if tr.reason == Termination.HORIZON:
        return INDETERMINATE
    return OUT


def classify_grid(grid: RegionGrid, sep, model: SPSModel, cfg: IntegratorConfig | None = None,
                  radius: float = REGION_RADIUS, threads: int = 1) -> RegionGrid:
    cells = [(i, j) for i in range(grid.resolution) for j in range(grid.resolution)
             if grid.verdict[i, j] != INFEASIBLE]
    run = lambda c: classify_point(grid.states[c], sep, model, cfg, radius)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            res = list(ex.map(run, cells))
    else:
        res = [run(c) for c in cells]
    verdict = grid.verdict.copy()
    for c, v in zip(cells, res):
        verdict[c] = v
    return replace(grid, verdict=verdict)


def prune_disconnected(grid: RegionGrid, fraction: float = PRUNE_FRACTION) -> RegionGrid:
    """Keep the SEP's 8-connected component and any component of at least
    ``fraction`` of its size (those raise a warning)."""
    inside = grid.verdict == IN
    if not inside[grid.sep_cell]:
        raise ConsistencyError("SEP cell is not in the region")
    lab, k = ndimage.label(inside, structure=np.ones((3, 3), dtype=int))
    sizes = np.bincount(lab.ravel(), minlength=k + 1)
    main = lab[grid.sep_cell]
    pruned = np.zeros_like(inside)
    detached = False
    for c in range(1, k + 1):
        if c == main:
            continue
        if sizes[c] < fraction * sizes[main]:
            pruned |= lab == c
        else:
            detached = True
    if detached:
        msg = "large detached in-region component; consider a different integrator setting"
        warnings.warn(msg, DetachedRegionWarning, stacklevel=2)
        log.warning(msg)
    return replace(grid, pruned=pruned, detached=detached)


def region_size(grid: RegionGrid) -> tuple[int, float]:
    c = grid.count
    return c, c * grid.cell_area


def compute_region(sep, ueps, model: SPSModel, spec: GridSpec | None = None,
                   cfg: IntegratorConfig | None = None, threads: int = 1) -> RegionGrid:
    spec = spec or GridSpec()
    g = build_grid(sep, ueps, model, spec)
    g = classify_grid(g, sep, model, cfg, spec.radius, threads)
    return prune_disconnected(g)


def sep_component(grid: RegionGrid, mask: np.ndarray) -> np.ndarray:
    """8-connected component of ``mask`` containing the SEP cell."""
    lab, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    c = lab[grid.sep_cell]
    return lab == c if c else np.zeros_like(mask)


@dataclass(frozen=True)
class InnerEstimate:
    level: float
    energies: np.ndarray = field(repr=False)  # NaN on infeasible cells
    sublevel: np.ndarray = field(repr=False)  # feasible cells with W < level
    component: np.ndarray = field(repr=False)  # 4-connected part of ``sublevel`` holding the SEP cell
    violations: np.ndarray = field(repr=False)  # ``component`` cells not in-region
    sublevel_outside: int = 0  # ``sublevel`` cells not in-region, anywhere in the window


def energy_inner_estimate(grid: RegionGrid, sep, level: float, model: SPSModel) -> InnerEstimate:
    """Energy sublevel set ``W < level`` on the grid and its SEP component.

    Four-connectivity is used on purpose: next to a saddle at exactly
    ``level`` the cells just below it on either side touch diagonally, and
    eight-connectivity would join sublevel pieces that the saddle separates.
    """
    E = np.full(grid.verdict.shape, np.nan)
    feas = grid.verdict != INFEASIBLE
    for i, j in zip(*np.nonzero(feas)):
        E[i, j] = energy(grid.states[i, j], sep, model).total
    sub = feas & (np.nan_to_num(E, nan=np.inf) < level)
    lab, _ = ndimage.label(sub)
    c = lab[grid.sep_cell]
    comp = lab == c if c else np.zeros_like(sub)
    inside = grid.verdict == IN
    return InnerEstimate(level=float(level), energies=E, sublevel=sub, component=comp,
                         violations=comp & ~inside, sublevel_outside=int(np.sum(sub & ~inside)))


# ------------------------------------------------------------------ output

def region_rows(grid: RegionGrid):
    for i in range(grid.resolution):
        for j in range(grid.resolution):
            yield [i, j, float(grid.d1[i]), float(grid.d2[j]), VERDICT_NAMES[int(grid.verdict[i, j])],
                   int(bool(grid.pruned[i, j]))]


def region_svg(grid: RegionGrid, sep, ueps: Sequence = (), closest: str | None = None,
               size: int = 500, title: str = "") -> str:
    """SVG 1.1 rendering: in-region cells filled, SEP star-free dot, UEP markers."""
    lo1, hi1, lo2, hi2 = grid.window
    pad = 40
    W = size + 2 * pad

    def px(a, b):
        return pad + (a - lo1) / (hi1 - lo1) * size, pad + (hi2 - b) / (hi2 - lo2) * size

    cw, ch = size / grid.resolution, size / grid.resolution
    colours = {IN: "#3a9a3a", INFEASIBLE: "#bbbbbb", INDETERMINATE: "#e0c040"}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{W}" '
           f'viewBox="0 0 {W} {W}">',
           f'<rect x="0" y="0" width="{W}" height="{W}" fill="#ffffff"/>',
           f'<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="#000000"/>']
    for i in range(grid.resolution):
        for j in range(grid.resolution):
            v = int(grid.verdict[i, j])
            if v == OUT or (v == IN and grid.pruned[i, j]):
                continue
            x, y = px(grid.d1[i], grid.d2[j])
            out.append(f'<rect x="{x - cw / 2:.3f}" y="{y - ch / 2:.3f}" width="{cw:.3f}" '
                       f'height="{ch:.3f}" fill="{colours[v]}"/>')
    x, y = px(*np.asarray(sep.x)[:2])
    out.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="5" fill="#1f4fbf"/>')
    out.append(f'<text x="{x + 7:.3f}" y="{y - 7:.3f}" font-family="monospace" font-size="12">SEP</text>')
    for u in ueps:
        ux, uy = px(*np.asarray(u.x)[:2])
        if not (pad <= ux <= pad + size and pad <= uy <= pad + size):
            continue
        style = 'fill="#d62020"' if u.label == closest else 'fill="none" stroke="#d62020" stroke-width="2"'
        out.append(f'<rect x="{ux - 5:.3f}" y="{uy - 5:.3f}" width="10" height="10" {style}/>')
        out.append(f'<text x="{ux + 7:.3f}" y="{uy - 7:.3f}" font-family="monospace" font-size="12">'
                   f'{u.label}</text>')
    out.append(f'<text x="{pad}" y="{pad - 12}" font-family="monospace" font-size="13">{title}</text>')
    out.append(f'<text x="{pad + size / 2 - 20:.1f}" y="{W - 10}" font-family="monospace" '
               f'font-size="12">delta1 (rad)</text>')
    out.append(f'<text x="8" y="{pad + size / 2:.1f}" font-family="monospace" font-size="12" '
               f'transform="rotate(-90 8 {pad + size / 2:.1f})">delta2 (rad)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
