"""Shared fixtures. The expensive pipeline runs are session-scoped and shared
between the module tests and the acceptance suite."""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cuepflow import powerflow as pf
from cuepflow import study
from cuepflow.sysmodel import network_from_dict, wscc9

DATA = Path(__file__).parent / "data"
KEY_LAMBDAS = (0.0, 0.4, 0.6)


def two_bus(x=0.1, p=0.1, q=0.0, r=0.0, v=1.0):
    """Slack at bus 1, one line, a PQ load at bus 2."""
    return network_from_dict({
        "buses": [{"id": 1, "kind": "slack", "v_set": v},
                  {"id": 2, "kind": "load", "p_load": p, "q_load": q}],
        "branches": [{"from": 1, "to": 2, "r": r, "x": x}],
        "generators": [{"bus": 1, "inertia": 0.1, "damping": 0.03, "p_set": 0.0,
                        "xd_prime": 0.1, "xq_prime": 0.1}],
    })


@pytest.fixture(scope="session")
def net9():
    return wscc9()


@pytest.fixture(scope="session")
def scenario45():
    return study.load_scenario(study.scenario_fixture("line_4_5"))


@pytest.fixture(scope="session")
def pattern9(net9):
    return pf.StressPattern.proportional_load(net9)


@pytest.fixture(scope="session")
def base_pf(net9, pattern9):
    return pf.solve_at(net9, pattern9, 0.0)


@pytest.fixture(scope="session")
def snap0(scenario45):
    """Line 4-5 at the base case, without the region grid."""
    return study.run_snapshot(scenario45, 0.0, with_region=False)


@pytest.fixture(scope="session")
def model0(snap0):
    return snap0.model


@pytest.fixture(scope="session")
def sweep45(scenario45):
    """Full line 4-5 sweep with event refinement, no region grids."""
    return study.run_sweep(scenario45, with_region=False)


@pytest.fixture(scope="session")
def region_snaps(scenario45):
    """Default 50x50 region snapshots at the three key loadings."""
    return {lam: study.run_snapshot(scenario45, lam, with_region=True) for lam in KEY_LAMBDAS}


@pytest.fixture(scope="session")
def lossless_region(scenario45):
    """Base-case snapshot of the lossless fixture with its region grid."""
    return study.run_snapshot(replace(scenario45, lossless=True), 0.0, with_region=True)


@pytest.fixture(scope="session")
def doubled_damping(scenario45):
    sc = replace(scenario45, damping_scale=2.0)
    return {lam: study.run_snapshot(sc, lam, with_region=False) for lam in KEY_LAMBDAS}


@pytest.fixture(scope="session")
def sweep46():
    sc = study.load_scenario(study.scenario_fixture("line_4_6"))
    return study.run_sweep(sc, with_region=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def snap_at(sweep, lam):
    for s in sweep.snapshots:
        if abs(s.lam - lam) < 1e-9:
            return s
    raise KeyError(lam)


# ------------------------------------------------------------------ acceptance report

_REPORT: list[str] = []


@pytest.fixture
def acceptance():
    """``acceptance(criterion, passed, detail)`` records one report line."""
    def record(criterion: str, passed, detail: str):
        tag = {True: "PASS", False: "FAIL"}.get(passed, passed)
        _REPORT.append(f"[{tag}] {criterion}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
