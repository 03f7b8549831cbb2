"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 pipeline failure,
3 validation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, checks
from .errors import ConfigError, CuepError, InputError, ScenarioError
from .io import OutputDir
from .region import GridSpec, region_rows, region_svg
from .study import (STAGES, ScenarioConfig, StudySnapshot, load_scenario,
                    run_snapshot, run_sweep, scenario_fixture)

log = logging.getLogger("cuepflow")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_VALIDATION = 0, 1, 2, 3


# ------------------------------------------------------------------ arguments

def _lambda_range(text: str) -> tuple[float, ...]:
    """``start:stop:step`` inclusive of ``stop`` (``start:stop`` uses step 0.1)."""
    parts = text.split(":")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad lambda range {text!r}") from None
    if len(vals) == 2:
        vals.append(0.1)
    if len(vals) != 3 or vals[2] <= 0 or vals[1] < vals[0]:
        raise argparse.ArgumentTypeError(f"bad lambda range {text!r}")
    a, b, h = vals
    k = int(np.floor((b - a) / h + 1e-9))
    return tuple(float(round(a + i * h, 12)) for i in range(k + 1))


class _Parser(argparse.ArgumentParser):
    # bad flags are configuration errors; argparse's own status 2 would read as a pipeline failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cuepflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--scenario", help="scenario file (JSON) or bundled name such as line_4_5")
        sp.add_argument("--grid-res", type=int, help="region grid resolution per axis")
        sp.add_argument("--horizon", type=float, help="integration horizon in seconds")
        sp.add_argument("--epsilon", type=float, help="singular-perturbation parameter")
        sp.add_argument("--seed", type=int, help="seed for every randomized step")
        sp.add_argument("--threads", type=int, help="worker threads for region classification")
        if out:
            sp.add_argument("--out-dir", default="cuepflow-out", help="run directory")
            sp.add_argument("--no-region", action="store_true", help="skip the region grid")

    s = sub.add_parser("snapshot", help="full pipeline at one loading")
    common(s)
    s.add_argument("--lambda", dest="lam", type=float, required=True, help="load scaling")
    s.add_argument("--dump-trajectories", action="store_true",
                   help="write the boundary-test trajectories as CSV")

    w = sub.add_parser("sweep", help="snapshots over a lambda schedule with event detection")
    common(w)
    w.add_argument("--lambda-range", type=_lambda_range, help="start:stop[:step]")
    w.add_argument("--no-refine", action="store_true", help="keep events at schedule resolution")

    v = sub.add_parser("validate", help="numerical property suites")
    common(v, out=False)
    v.add_argument("--suite", action="append", choices=sorted(checks.SUITES) + ["all"],
                   help="suite to run (repeatable; default all)")
    return p


def _resolve_scenario(args, validate_network: bool = True) -> tuple[ScenarioConfig, str]:
    src = args.scenario or "line_4_5"
    path = Path(src)
    if not path.exists() and not src.endswith(".json"):
        path = scenario_fixture(src)
        if not path.exists():
            raise ConfigError(f"scenario: no file or bundled scenario named {src!r}")
    sc = load_scenario(path)
    upd = {}
    if args.grid_res is not None:
        upd["grid"] = _checked(GridSpec, sc.grid, resolution=args.grid_res)
    if args.horizon is not None:
        upd["integrator"] = _checked(type(sc.integrator), sc.integrator, horizon=args.horizon)
    if args.epsilon is not None:
        upd["eps"] = args.epsilon
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.threads is not None:
        upd["threads"] = args.threads
    if getattr(args, "lambda_range", None):
        upd["lambdas"] = args.lambda_range
    if getattr(args, "no_region", False):
        upd["region"] = False
    if getattr(args, "no_refine", False):
        upd["refine"] = False
    if getattr(args, "out_dir", None):
        upd["output_dir"] = str(args.out_dir)
    try:
        sc = replace(sc, **upd)
    except (CuepError, TypeError, ValueError) as exc:
        raise ConfigError(f"command line: {exc}") from exc
    try:
        net = sc.load_network(validate=validate_network)
        net.find_branch(sc.switching)
    except (ConfigError, InputError):
        raise
    except CuepError as exc:
        raise ConfigError(f"network: {exc}") from exc
    return sc, str(path)


def _checked(cls, obj, **kw):
    try:
        return replace(obj, **kw)
    except (CuepError, TypeError, ValueError) as exc:
        raise ConfigError(f"command line: {exc}") from exc


# ------------------------------------------------------------------ rows

def _point_row(snap: StudySnapshot, eq, point: str, n: int, m: int):
    x = eq.x
    e = eq.energy
    return [snap.lam, point, eq.kind, eq.k, "" if eq.on_boundary is None else eq.on_boundary,
            "" if e is None else e.total, snap.distances.get(point, 0.0 if point == "SEP" else ""),
            int(point == snap.closest), snap.closest, snap.region_count, eq.residual,
            *x[:n], *x[2 * n:2 * n + m], *x[2 * n + m:]]


def _point_header(n: int, m: int):
    return (["lambda", "point", "kind", "unstable_dim", "on_boundary", "energy", "distance",
             "is_closest", "closest", "region_count", "residual"]
            + [f"delta_{i + 1}" for i in range(n)] + [f"V_{k + 1}" for k in range(m)]
            + [f"theta_{k + 1}" for k in range(m)])


def _points(snap: StudySnapshot):
    if snap.sep is not None:
        yield "SEP", snap.sep
    for u in snap.ueps:
        yield u.label, u


SNAPSHOT_HEADER = ["lambda", "ok", "failed_stage", "error", "closest", "no_boundary_uep", "ties",
                   "boundary_labels", "labels", "region_count", "region_area", "sep_sigma_min",
                   "sep_max_real"]


def _snapshot_row(s: StudySnapshot):
    return [s.lam, s.ok, s.failed_stage or "", s.error, s.closest, s.no_boundary_uep, " ".join(s.ties),
            " ".join(s.boundary_labels), " ".join(s.labels), s.region_count, s.region_area,
            s.sep_sigma_min, s.sep_max_real]


def _event_rows(events):
    for e in events:
        diag = {k: v for k, v in e.diagnostics.items() if k != "positions"}
        yield [e.kind, e.lo, e.hi, e.width, e.terminal, " ".join(e.labels),
               json.dumps(diag, sort_keys=True, default=str)]


EVENT_HEADER = ["kind", "lambda_lo", "lambda_hi", "width", "terminal", "labels", "diagnostics"]


def _lam_tag(lam: float) -> str:
    return f"{lam:.6f}".rstrip("0").rstrip(".").replace(".", "p") or "0"


def _write_region(out: OutputDir, snap: StudySnapshot, prefix: str = ""):
    if snap.region is None:
        return
    out.write_csv(f"{prefix}region.csv", ["i", "j", "delta_1", "delta_2", "verdict", "pruned"],
                  region_rows(snap.region))
    svg = region_svg(snap.region, snap.sep, snap.ueps, closest=snap.closest or None,
                     title=f"lambda = {snap.lam:g}")
    out.write_text(f"{prefix}region.svg", svg)


def _stage_totals(snaps) -> dict:
    tot = {}
    for s in snaps:
        for k, v in s.timings.items():
            tot[k] = tot.get(k, 0.0) + float(v)
    return {k: tot[k] for k in STAGES if k in tot}


def _manifest(command: str, scenario: ScenarioConfig, path: str, snaps, started: float, **extra) -> dict:
    return {"command": command, "tool": "cuepflow", "version": __version__, "scenario_path": path,
            "config": scenario.to_dict(), "stage_seconds": _stage_totals(snaps),
            "wall_seconds": time.perf_counter() - started, **extra}


# ------------------------------------------------------------------ commands

def cmd_snapshot(args) -> int:
    started = time.perf_counter()
    sc, path = _resolve_scenario(args)
    if args.lam < 0:
        raise ConfigError("--lambda must be non-negative")
    snap = run_snapshot(sc, args.lam, record_witnesses=args.dump_trajectories)
    out = OutputDir(sc.output_dir)
    out.write_csv("snapshot.csv", SNAPSHOT_HEADER, [_snapshot_row(snap)])
    if snap.model is not None and snap.sep is not None:
        n, m = snap.model.n, snap.model.m
        out.write_csv("equilibria.csv", _point_header(n, m), (_point_row(snap, e, p, n, m)
                                                              for p, e in _points(snap)))
    _write_region(out, snap)
    if args.dump_trajectories:
        _dump_witnesses(out, snap)
    out.write_manifest(_manifest("snapshot", sc, path, [snap], started, lam=args.lam,
                                 failed_stage=snap.failed_stage))
    if not snap.ok:
        print(f"lambda={args.lam:g}: stage {snap.failed_stage} failed: {snap.error}", file=sys.stderr)
        return EXIT_PIPELINE
    print(f"lambda={args.lam:g}: closest UEP {snap.closest or '(none on boundary)'}; "
          f"region count {snap.region_count}; outputs in {out.root}")
    return EXIT_OK


def _dump_witnesses(out: OutputDir, snap: StudySnapshot):
    wit = getattr(snap, "_witnesses", {})
    if snap.model is None:
        return
    n, m = snap.model.n, snap.model.m
    header = (["t"] + [f"delta_{i + 1}" for i in range(n)] + [f"omega_{i + 1}" for i in range(n)]
              + [f"V_{k + 1}" for k in range(m)] + [f"theta_{k + 1}" for k in range(m)])
    for label, b in wit.items():
        for j, tr in enumerate(b.witnesses):
            out.write_csv(f"trajectories/{label}_{j}_{tr.reason.label}.csv", header, tr.to_csv_rows())


def _summary(sc: ScenarioConfig, snaps, events, terminal) -> str:
    lines = [f"scenario {sc.name}: line {sc.switching[0]}-{sc.switching[1]} opened", ""]
    lines.append("lambda    closest   boundary UEPs            region count")
    for s in snaps:
        if s.ok:
            lines.append(f"{s.lam:<9.4g} {s.closest or '-':<9} {' '.join(s.boundary_labels) or '-':<24} "
                         f"{'' if s.region_count is None else s.region_count}")
        else:
            lines.append(f"{s.lam:<9.4g} failed at stage {s.failed_stage}")
    lines.append("")
    counts = {}
    for e in events:
        counts[e.kind] = counts.get(e.kind, 0) + 1
    lines.append("events: " + (", ".join(f"{k} x{v}" for k, v in sorted(counts.items())) or "none"))
    for e in events:
        tag = " (terminal)" if e.terminal else ""
        who = f" [{' -> '.join(e.labels)}]" if e.kind == "closest-uep-switch" else (
            f" [{' '.join(e.labels)}]" if e.labels else "")
        det = e.diagnostics.get("detector")
        lines.append(f"  {e.kind}{tag}: lambda in [{e.lo:.6g}, {e.hi:.6g}]{who}" + (f" via {det}" if det else ""))
    if terminal is None:
        lines.append("sweep ended at the end of the schedule without a terminal event")
    else:
        lines.append(f"sweep terminated by {terminal.kind} near lambda {0.5 * (terminal.lo + terminal.hi):.6g}")
    no_b = [s.lam for s in snaps if s.ok and s.no_boundary_uep]
    if no_b:
        lines.append("no UEP certified on the boundary at lambda " + ", ".join(f"{x:g}" for x in no_b))
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    sc, path = _resolve_scenario(args)

    def progress(s):
        log.info("lambda=%g done: %s", s.lam, "ok" if s.ok else f"failed at {s.failed_stage}")

    try:
        res = run_sweep(sc, progress=progress)
    except ScenarioError as exc:
        print(f"sweep aborted: {exc}", file=sys.stderr)
        out = OutputDir(sc.output_dir)
        out.write_text("summary.txt", f"base case failed: {exc}\n")
        out.write_manifest(_manifest("sweep", sc, path, [], started, failed="base case"))
        return EXIT_PIPELINE
    snaps, events = res.snapshots, res.events
    out = OutputDir(sc.output_dir)
    good = [s for s in snaps if s.ok]
    n, m = (good[0].model.n, good[0].model.m) if good else (0, 0)
    out.write_csv("snapshots.csv", _point_header(n, m),
                  (_point_row(s, e, p, n, m) for s in good for p, e in _points(s)))
    out.write_csv("snapshot_summary.csv", SNAPSHOT_HEADER, (_snapshot_row(s) for s in snaps))
    out.write_csv("pv_pre.csv", ["lambda"] + [f"V_{k + 1}" for k in range(m)] + [f"theta_{k + 1}" for k in range(m)],
                  ([s.lam, *s.power_flow.vm, *s.power_flow.va] for s in snaps if s.power_flow is not None))
    out.write_csv("pv_post.csv", ["lambda", "point"] + [f"V_{k + 1}" for k in range(m)],
                  ([s.lam, p, *e.x[2 * n:2 * n + m]] for s in good for p, e in _points(s)))
    out.write_csv("events.csv", EVENT_HEADER, _event_rows(events))
    for s in good:
        _write_region(out, s, prefix=f"regions/lambda_{_lam_tag(s.lam)}_")
    text = _summary(sc, snaps, events, res.terminal)
    out.write_text("summary.txt", text)
    out.write_manifest(_manifest("sweep", sc, path, snaps, started,
                                 lambdas=[s.lam for s in snaps],
                                 events=[{"kind": e.kind, "lo": e.lo, "hi": e.hi} for e in events]))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    sc, _ = _resolve_scenario(args, validate_network=False)
    names = args.suite or ["all"]
    if "all" in names:
        names = list(checks.SUITES)
    results = [checks.run_suite(name, sc, seed=sc.seed) for name in dict.fromkeys(names)]
    width = max(len(c.name) for r in results for c in r.checks) if any(r.checks for r in results) else 20
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name} ({r.seconds:.2f} s)")
        for c in r.checks:
            note = f"  {c.note}" if c.note else ""
            print(f"    {'ok ' if c.passed else 'BAD'} {c.name:<{width}} {c.value:.3e} (limit {c.limit:.1e}){note}")
        if r.error:
            print(f"    BAD error: {r.error}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


COMMANDS = {"snapshot": cmd_snapshot, "sweep": cmd_sweep, "validate": cmd_validate}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CuepError as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
