"""Per-loading pipeline, lambda sweeps, event detection and refinement.

One snapshot runs, in order: pre-switching power flow, load conversion to
constant impedance at the solved voltages, dynamic initialization, line
switching, post-switching SEP, neighborhood UEP search, boundary tests,
energies, closest UEP and (optionally) the region grid.

UEP labels are anchored at the base case (nearest first) and carried to any
other loading by Newton continuation in lambda, so a snapshot computed on
its own gets the same labels it gets inside a sweep.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import powerflow as pf
from .dynamics import SPSModel, algebraic_sigma_min, build_sps_model, init_dynamic_state
from .energy import EnergyValue, closest_uep, energy
from .equilibria import (EquilibriumPoint, SearchSpec, angle_distance, find_neighborhood_ueps,
                         on_stability_boundary, solve_equilibrium)
from .errors import (BracketingError, ConfigError, CuepError, DivergenceError, InputError,
                     NearBifurcationError, NoEquilibriumError, ScenarioError)
from .integrate import IntegratorConfig
from .region import GridSpec, RegionGrid, compute_region
from .sysmodel import NetworkModel, apply_switching, fixture_path, load_network, loads_to_admittance

log = logging.getLogger(__name__)

TRACK_STEP = 0.05
MATCH_RADIUS = 0.05
REFINE_WIDTH = 0.01
SIGMA_TOL = 1e-6
SADDLE_DIST = 1e-3

STAGES = ("power-flow", "load-conversion", "initialization", "switching", "sep", "search",
          "boundary", "energy", "closest", "region")


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    switching: tuple[int, int]
    network: str = "wscc9.json"
    stress: str = "proportional_load"
    lambdas: tuple[float, ...] = ()
    lambda_step: float = 0.1
    lambda_max: float = 3.0
    grid: GridSpec = GridSpec()
    region: bool = True
    integrator: IntegratorConfig = IntegratorConfig()
    search: SearchSpec = SearchSpec()
    eps: float = 1e-3
    damping_scale: float = 1.0
    lossless: bool = False
    refine: bool = True
    seed: int = 0
    output_dir: str = ""
    threads: int = 1
    base_dir: str = ""

    def __post_init__(self):
        if len(self.switching) != 2 or self.switching[0] == self.switching[1]:
            raise ConfigError("switching: need two distinct bus ids")
        if self.stress != "proportional_load":
            raise ConfigError(f"stress: unsupported pattern {self.stress!r}")
        if not self.eps > 0:
            raise ConfigError("eps: must be positive")
        if not self.damping_scale >= 0:
            raise ConfigError("damping_scale: must be non-negative")
        if self.lambdas:
            lam = np.asarray(self.lambdas, dtype=float)
            if lam[0] != 0.0 or np.any(np.diff(lam) <= 0):
                raise ConfigError("lambdas: schedule must start at 0 and increase strictly")
        elif not (self.lambda_step > 0 and self.lambda_max >= 0):
            raise ConfigError("lambda_step/lambda_max: invalid range")
        if self.threads < 1:
            raise ConfigError("threads: must be >= 1")

    def schedule(self) -> np.ndarray:
        if self.lambdas:
            return np.asarray(self.lambdas, dtype=float)
        k = int(np.floor(self.lambda_max / self.lambda_step + 1e-9))
        return np.round(np.arange(k + 1) * self.lambda_step, 12)

    def load_network(self, validate: bool = True) -> NetworkModel:
        p = Path(self.network)
        if not p.is_absolute():
            cand = Path(self.base_dir) / p if self.base_dir else p
            p = cand if cand.exists() else fixture_path(self.network)
        return load_network(p, validate=validate)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "base_dir":
                continue
            if isinstance(v, (GridSpec, IntegratorConfig, SearchSpec)):
                v = {g.name: (list(getattr(v, g.name)) if isinstance(getattr(v, g.name), tuple)
                              else getattr(v, g.name)) for g in fields(v)}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


_SECTIONS = {"grid": GridSpec, "integrator": IntegratorConfig, "search": SearchSpec}


def _section(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name for f in fields(cls)}
    for k in data:
        if k not in allowed:
            raise ConfigError(f"{where}: unknown key '{k}'")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError, CuepError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def scenario_from_dict(data: dict, base_dir: str | Path = "") -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("scenario: expected an object")
    allowed = {f.name for f in fields(ScenarioConfig)} - {"base_dir"}
    for k in data:
        if k not in allowed:
            raise ConfigError(f"scenario: unknown key '{k}'")
    for k in ("name", "switching"):
        if k not in data:
            raise ConfigError(f"scenario: missing key '{k}'")
    kw = {}
    for k, v in data.items():
        if k in _SECTIONS:
            kw[k] = _section(_SECTIONS[k], v, k)
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    try:
        kw["switching"] = tuple(int(b) for b in kw["switching"])
        if "lambdas" in kw:
            kw["lambdas"] = tuple(float(x) for x in kw["lambdas"])
        return ScenarioConfig(base_dir=str(base_dir), **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_dict(data, base_dir=path.parent)


def scenario_fixture(name: str) -> Path:
    """Path of a bundled scenario, e.g. ``line_4_5``."""
    return fixture_path(f"scenarios/{name}.json")


# ------------------------------------------------------------------ results

@dataclass(frozen=True)
class StudySnapshot:
    lam: float
    power_flow: pf.PowerFlowSolution | None = field(default=None, repr=False)
    sep: EquilibriumPoint | None = field(default=None, repr=False)
    ueps: tuple[EquilibriumPoint, ...] = field(default=(), repr=False)
    closest: str = ""
    no_boundary_uep: bool = False
    ties: tuple[str, ...] = ()
    region: RegionGrid | None = field(default=None, repr=False)
    region_count: int | None = None
    region_area: float | None = None
    distances: dict = field(default_factory=dict)
    failed_stage: str | None = None
    error: str = ""
    sep_sigma_min: float | None = None
    sep_max_real: float | None = None
    timings: dict = field(default_factory=dict, repr=False)
    model: SPSModel | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    def uep(self, label: str) -> EquilibriumPoint | None:
        for u in self.ueps:
            if u.label == label:
                return u
        return None

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(u.label for u in self.ueps)

    @property
    def boundary_labels(self) -> tuple[str, ...]:
        return tuple(u.label for u in self.ueps if u.on_boundary)


@dataclass(frozen=True)
class BifurcationEvent:
    kind: str
    lo: float
    hi: float
    diagnostics: dict = field(default_factory=dict)
    labels: tuple[str, ...] = ()
    terminal: bool = False

    @property
    def width(self) -> float:
        return self.hi - self.lo


# ------------------------------------------------------------------ model build

@dataclass(frozen=True)
class PostModel:
    net: NetworkModel
    solution: pf.PowerFlowSolution
    model: SPSModel
    x0: np.ndarray


def _network(scenario: ScenarioConfig) -> NetworkModel:
    return _cached_network(scenario.network, scenario.base_dir)


@lru_cache(maxsize=16)
def _cached_network(network: str, base_dir: str) -> NetworkModel:
    return ScenarioConfig(name="_", switching=(1, 2), network=network, base_dir=base_dir).load_network()


def build_post_model(scenario: ScenarioConfig, lam: float, init: pf.PowerFlowSolution | None = None,
                     timings: dict | None = None) -> PostModel:
    """Stages power-flow .. switching. Raises with ``.stage`` set on failure."""
    timings = {} if timings is None else timings
    net = _network(scenario)
    pattern = pf.StressPattern.proportional_load(net)

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except CuepError as exc:
            exc.stage = name
            raise
        finally:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0

    def solve():
        if init is not None:
            try:
                return pf.solve_at(net, pattern, lam, init=init)
            except DivergenceError:
                pass
        return pf.solve_at(net, pattern, lam)

    sol = stage("power-flow", solve)
    shunts = stage("load-conversion", lambda: loads_to_admittance(sol, net))
    st, gens = stage("initialization", lambda: init_dynamic_state(sol, net))

    def switch():
        post = apply_switching(net, scenario.switching)
        m = build_sps_model(post, gens, shunts, eps=scenario.eps)
        if scenario.damping_scale != 1.0:
            m = m.with_damping_scale(scenario.damping_scale)
        return m.lossless() if scenario.lossless else m

    model = stage("switching", switch)
    return PostModel(net=net, solution=sol, model=model, x0=st.to_vector())


def _solve_sep(scenario: ScenarioConfig, pm: PostModel) -> EquilibriumPoint:
    return solve_equilibrium(pm.x0, pm.model, cfg=scenario.integrator, label="SEP")


# ------------------------------------------------------------------ label tracking

_BASE_CACHE: dict = {}
_TRACK_CACHE: dict = {}


def _cache_key(scenario: ScenarioConfig):
    return replace(scenario, lambdas=(), output_dir="", threads=1, refine=True, region=True,
                   grid=GridSpec())


def base_reference(scenario: ScenarioConfig) -> tuple[EquilibriumPoint, ...]:
    """Labeled neighborhood UEPs at lambda = 0."""
    key = _cache_key(scenario)
    if key not in _BASE_CACHE:
        pm = build_post_model(scenario, 0.0)
        sep = _solve_sep(scenario, pm)
        spec = replace(scenario.search, seed=scenario.seed)
        _BASE_CACHE[key] = tuple(find_neighborhood_ueps(sep, spec, pm.model))
    return _BASE_CACHE[key]


def _track_to(scenario: ScenarioConfig, lam: float) -> dict[str, np.ndarray]:
    """Base-case UEP positions continued to ``lam``; lost labels are omitted."""
    key = _cache_key(scenario)
    memo = _TRACK_CACHE.setdefault(key, {0: {u.label: u.x for u in base_reference(scenario)}})
    j = int(np.floor(lam / TRACK_STEP + 1e-9))
    have = max(i for i in memo if i <= j)
    cur = memo[have]
    for i in range(have + 1, j + 1):
        cur = _track_step(scenario, cur, i * TRACK_STEP)
        memo[i] = cur
    if abs(lam - j * TRACK_STEP) > 1e-12:
        cur = _track_step(scenario, cur, lam)
    return cur


def _track_step(scenario: ScenarioConfig, prev: dict, lam: float) -> dict:
    if not prev:
        return {}
    try:
        pm = build_post_model(scenario, lam)
    except CuepError:
        return {}
    out = {}
    for label, x in prev.items():
        try:
            eq = solve_equilibrium(x, pm.model, confirm=False)
        except (NoEquilibriumError, NearBifurcationError):
            continue
        if eq.is_sep or angle_distance(pm.model, eq.x, x) > 0.5:
            continue
        out[label] = eq.x
    return out


def assign_labels(found: Sequence[EquilibriumPoint], tracked: dict[str, np.ndarray], model: SPSModel,
                  base_labels: Sequence[str] = ()) -> list[EquilibriumPoint]:
    """Tracked labels by proximity; the rest numbered after the base labels in distance order."""
    taken, out, rest = set(), [], []
    for e in found:
        best = None
        for label, x in tracked.items():
            d = angle_distance(model, e.x, x)
            if d < MATCH_RADIUS and label not in taken and (best is None or d < best[0]):
                best = (d, label)
        if best is None:
            rest.append(e)
        else:
            taken.add(best[1])
            out.append(e.with_label(best[1]))
    nums = [int(s[3:]) for s in list(base_labels) + list(tracked) if s[3:].isdigit()]
    nxt = max(nums, default=0) + 1
    for e in rest:
        out.append(e.with_label(f"UEP{nxt}"))
        nxt += 1
    return sorted(out, key=lambda e: int(e.label[3:]))


# ------------------------------------------------------------------ snapshot

def run_snapshot(scenario: ScenarioConfig, lam: float, with_region: bool | None = None,
                 init: pf.PowerFlowSolution | None = None, record_witnesses: bool = False) -> StudySnapshot:
    """Run the full per-loading pipeline. Failures give a partial snapshot with ``failed_stage``."""
    if lam < 0:
        raise InputError("lambda must be non-negative")
    with_region = scenario.region if with_region is None else with_region
    timings: dict = {}
    snap = dict(lam=float(lam), timings=timings)

    def fail(stage, exc):
        log.info("lambda=%g: stage %s failed: %s", lam, stage, exc)
        return StudySnapshot(failed_stage=stage, error=str(exc), **snap)

    try:
        pm = build_post_model(scenario, lam, init=init, timings=timings)
    except CuepError as exc:
        return fail(getattr(exc, "stage", "power-flow"), exc)
    snap["power_flow"] = pm.solution
    snap["model"] = pm.model
    model = pm.model

    t0 = time.perf_counter()
    try:
        sep = _solve_sep(scenario, pm)
    except CuepError as exc:
        timings["sep"] = time.perf_counter() - t0
        return fail("sep", exc)
    timings["sep"] = time.perf_counter() - t0
    snap["sep"] = sep
    snap["sep_sigma_min"] = algebraic_sigma_min(model, sep.x)
    snap["sep_max_real"] = float(np.max(sep.eigenvalues.real))

    t0 = time.perf_counter()
    try:
        spec = replace(scenario.search, seed=scenario.seed)
        found = find_neighborhood_ueps(sep, spec, model)
        base = base_reference(scenario)
        tracked = _track_to(scenario, lam) if lam > 0 else {u.label: u.x for u in base}
        ueps = assign_labels(found, tracked, model, [u.label for u in base])
    except CuepError as exc:
        timings["search"] = time.perf_counter() - t0
        return fail("search", exc)
    timings["search"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    witnesses = {}
    try:
        tested = []
        for u in ueps:
            b = on_stability_boundary(u, sep, model, scenario.integrator, seed=scenario.seed,
                                      record=record_witnesses)
            witnesses[u.label] = b
            tested.append(replace(u, on_boundary=b.verdict))
    except CuepError as exc:
        timings["boundary"] = time.perf_counter() - t0
        return fail("boundary", exc)
    timings["boundary"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ueps = tuple(replace(u, energy=energy(u, sep, model)) for u in tested)
    timings["energy"] = time.perf_counter() - t0
    snap["ueps"] = ueps
    snap["distances"] = {u.label: angle_distance(model, u.x, sep.x) for u in ueps}

    on = [u for u in ueps if u.on_boundary]
    if on:
        best, ties = closest_uep(on, sep, model, return_ties=True)
        snap["closest"] = best.label
        snap["ties"] = tuple(t.label for t in ties)
    else:
        snap["no_boundary_uep"] = True
        log.warning("lambda=%g: no UEP certified on the stability boundary", lam)

    if with_region:
        t0 = time.perf_counter()
        try:
            grid = compute_region(sep, ueps, model, scenario.grid, scenario.integrator, scenario.threads)
        except CuepError as exc:
            timings["region"] = time.perf_counter() - t0
            return fail("region", exc)
        timings["region"] = time.perf_counter() - t0
        snap["region"] = grid
        snap["region_count"] = grid.count
        snap["region_area"] = grid.count * grid.cell_area
    out = StudySnapshot(**snap)
    if record_witnesses:
        object.__setattr__(out, "_witnesses", witnesses)
    return out


# ------------------------------------------------------------------ events

def detect_events(prev: StudySnapshot, cur: StudySnapshot) -> list[BifurcationEvent]:
    if not cur.lam > prev.lam:
        raise InputError("snapshots must be in increasing lambda order")
    if prev.model is not None and cur.model is not None and prev.model.size != cur.model.size:
        raise InputError("snapshots come from different systems")
    lo, hi = prev.lam, cur.lam
    ev: list[BifurcationEvent] = []
    if not cur.ok:
        if cur.failed_stage in ("power-flow",):
            ev.append(BifurcationEvent("structure-induced", lo, hi, {
                "detector": "pre-switching power-flow nose", "error": cur.error}, terminal=True))
        elif cur.failed_stage in ("load-conversion", "initialization", "switching", "sep"):
            ev.append(BifurcationEvent("structure-induced", lo, hi, {
                "detector": "post-switching SEP solve failed with convergent pre-switching flow",
                "stage": cur.failed_stage, "error": cur.error}, terminal=True))
        return ev
    if prev.closest and cur.closest and prev.closest != cur.closest:
        ev.append(BifurcationEvent("closest-uep-switch", lo, hi,
                                   {"from": prev.closest, "to": cur.closest},
                                   labels=(prev.closest, cur.closest)))
    gone = [l for l in prev.labels if l not in cur.labels]
    if gone:
        ev.append(BifurcationEvent("uep-disappearance", lo, hi, {
            "labels": gone, "positions": {l: prev.uep(l).x for l in gone}}, labels=tuple(gone)))
    if cur.sep_max_real is not None and -SIGMA_TOL < cur.sep_max_real <= 0:
        ev.append(BifurcationEvent("saddle-node", lo, hi, {"detector": "SEP eigenvalue",
                                                           "max_real": cur.sep_max_real}, terminal=True))
    elif cur.closest and cur.distances.get(cur.closest, np.inf) < SADDLE_DIST:
        ev.append(BifurcationEvent("saddle-node", lo, hi, {"detector": "SEP-UEP distance",
                                                           "distance": cur.distances[cur.closest]},
                                   labels=(cur.closest,), terminal=True))
    if cur.sep_sigma_min is not None and cur.sep_sigma_min < SIGMA_TOL:
        ev.append(BifurcationEvent("structure-induced", lo, hi, {
            "detector": "post-switching algebraic Jacobian", "sigma_min": cur.sep_sigma_min}, terminal=True))
    return ev


def _closest_minimal(scenario: ScenarioConfig, lam: float, labels: Sequence[str]) -> str:
    """Closest label among ``labels`` only, from tracked positions (no search, no region)."""
    pm = build_post_model(scenario, lam)
    sep = _solve_sep(scenario, pm)
    tracked = _track_to(scenario, lam)
    on = []
    for label in labels:
        if label not in tracked:
            continue
        u = solve_equilibrium(tracked[label], pm.model, confirm=False, label=label)
        if on_stability_boundary(u, sep, pm.model, scenario.integrator, seed=scenario.seed).verdict:
            on.append(replace(u, energy=energy(u, sep, pm.model)))
    return closest_uep(on, sep, pm.model).label if on else ""


def _sep_healthy(scenario: ScenarioConfig, lam: float) -> bool:
    try:
        pm = build_post_model(scenario, lam)
        sep = _solve_sep(scenario, pm)
    except CuepError as exc:
        if getattr(exc, "stage", "sep") == "power-flow":
            return True  # not this detector's business
        return False
    return algebraic_sigma_min(pm.model, sep.x) >= SIGMA_TOL and float(np.max(sep.eigenvalues.real)) <= -SIGMA_TOL


def _persists(scenario: ScenarioConfig, start: dict, lam0: float, lam: float) -> bool:
    """Every UEP in ``start`` (positions at ``lam0``) continues to ``lam`` inside the neighborhood."""
    steps = max(1, int(np.ceil((lam - lam0) / TRACK_STEP - 1e-9)))
    cur = dict(start)
    for j in range(1, steps + 1):
        cur = _track_step(scenario, cur, lam0 + (lam - lam0) * j / steps)
    if set(cur) != set(start):
        return False
    pm = build_post_model(scenario, lam)
    sep = _solve_sep(scenario, pm)
    cap = scenario.search.max_distance
    return all(angle_distance(pm.model, x, sep.x) <= cap for x in cur.values())


def _bisect(pred: Callable[[float], bool], lo: float, hi: float, width: float):
    """``pred(lo)`` is True, ``pred(hi)`` is False; shrink to ``width``."""
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo, hi


def refine_event(scenario: ScenarioConfig, event: BifurcationEvent, width: float = REFINE_WIDTH) -> BifurcationEvent:
    """Bisection in lambda re-running only the stages the event's predicate needs."""
    if event.width <= width:
        return event
    lo, hi = event.lo, event.hi
    diag = dict(event.diagnostics)
    if event.kind == "closest-uep-switch":
        # bracket the departure of the old closest UEP; loadings where neither
        # label is certified lie on the far side and are reported as gaps
        a, b = diag["from"], diag["to"]
        gaps = []

        def still_from(lam):
            c = _closest_minimal(scenario, lam, (a, b))
            if c not in (a, b):
                gaps.append(float(lam))
            return c == a

        lo, hi = _bisect(still_from, lo, hi, width)
        if gaps:
            diag["gaps"] = gaps
    elif event.kind == "structure-induced" and diag.get("detector", "").startswith("pre-switching"):
        net = _network(scenario)
        pattern = pf.StressPattern.proportional_load(net)
        try:
            br = pf.nose_bracket(net, pattern, lo, hi, width=min(1e-3, width))
            lo, hi = br.lo, br.hi
            diag["sigma_min"] = br.sigma_min
        except BracketingError as exc:
            diag["warning"] = str(exc)
    elif event.kind in ("structure-induced", "saddle-node"):
        lo, hi = _bisect(lambda l: _sep_healthy(scenario, l), lo, hi, width)
    elif event.kind == "uep-disappearance":
        start = {k: np.asarray(v) for k, v in diag.pop("positions", {}).items()}
        if start:
            lo, hi = _bisect(lambda l: _persists(scenario, start, event.lo, l), lo, hi, width)
    diag["refined"] = True
    return replace(event, lo=float(lo), hi=float(hi), diagnostics=diag)


# ------------------------------------------------------------------ sweep

@dataclass
class SweepResult:
    snapshots: list[StudySnapshot]
    events: list[BifurcationEvent]

    def __iter__(self):
        return iter((self.snapshots, self.events))

    @property
    def terminal(self) -> BifurcationEvent | None:
        for e in self.events:
            if e.terminal:
                return e
        return None


def run_sweep(scenario: ScenarioConfig, with_region: bool | None = None,
              progress: Callable[[StudySnapshot], None] | None = None) -> SweepResult:
    """Snapshots over the schedule, stopping at the first terminal event."""
    snaps: list[StudySnapshot] = []
    events: list[BifurcationEvent] = []
    init = None
    for lam in scenario.schedule():
        s = run_snapshot(scenario, float(lam), with_region=with_region, init=init)
        if not snaps and not s.ok:
            raise ScenarioError(f"base case failed at stage {s.failed_stage}: {s.error}")
        if s.power_flow is not None:
            init = s.power_flow
        if progress:
            progress(s)
        if snaps:
            new = detect_events(snaps[-1], s)
            if scenario.refine:
                new = [refine_event(scenario, e) for e in new]
            events.extend(new)
            if any(e.terminal for e in new):
                if s.ok:
                    snaps.append(s)
                break
        snaps.append(s)
    return SweepResult(snaps, events)
