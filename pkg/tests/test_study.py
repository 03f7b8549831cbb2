from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from cuepflow import study
from cuepflow.errors import ConfigError, InputError, ScenarioError

from conftest import DATA, snap_at


def snap(lam, closest="UEP1", labels=("UEP1", "UEP2"), **kw):
    ueps = tuple(SimpleNamespace(label=l, x=np.zeros(3), on_boundary=(l == closest)) for l in labels)
    return study.StudySnapshot(lam=lam, closest=closest, ueps=ueps, sep_max_real=-0.1, sep_sigma_min=1.0,
                               distances={l: 1.0 for l in labels}, **kw)


# ------------------------------------------------------------------ config

def test_bundled_scenarios_load():
    for name in ("line_4_5", "line_4_6", "line_7_5"):
        sc = study.load_scenario(study.scenario_fixture(name))
        sc.load_network().find_branch(sc.switching)
        assert sc.schedule()[0] == 0.0


def test_default_schedule_step():
    sc = study.ScenarioConfig(name="x", switching=(4, 5), lambda_step=0.1, lambda_max=0.5)
    np.testing.assert_allclose(sc.schedule(), [0, 0.1, 0.2, 0.3, 0.4, 0.5])


@pytest.mark.parametrize("lams", [(0.1, 0.2), (0.0, 0.2, 0.2), (0.0, 0.3, 0.1)])
def test_schedule_must_start_at_zero_and_increase(lams):
    with pytest.raises(ConfigError):
        study.ScenarioConfig(name="x", switching=(4, 5), lambdas=lams)


def test_unknown_scenario_key():
    with pytest.raises(ConfigError, match="lambda_stepp"):
        study.load_scenario(DATA / "bad_key.json")


def test_unknown_section_key():
    with pytest.raises(ConfigError, match="resolutoin"):
        study.scenario_from_dict({"name": "x", "switching": [4, 5], "grid": {"resolutoin": 3}})


def test_config_round_trip(scenario45):
    again = study.scenario_from_dict(scenario45.to_dict())
    assert replace(again, base_dir=scenario45.base_dir) == scenario45


# ------------------------------------------------------------------ events

def test_no_events_when_nothing_changes():
    assert study.detect_events(snap(0.0), snap(0.1)) == []


def test_switch_event_detected():
    (e,) = study.detect_events(snap(0.0, "UEP1"), snap(0.4, "UEP2"))
    assert e.kind == "closest-uep-switch" and (e.lo, e.hi) == (0.0, 0.4)
    assert e.labels == ("UEP1", "UEP2") and not e.terminal


def test_disappearance_detected():
    (e,) = study.detect_events(snap(0.0), snap(0.1, labels=("UEP2",), closest=""))
    assert e.kind == "uep-disappearance" and e.labels == ("UEP1",)


def test_failed_power_flow_is_terminal():
    (e,) = study.detect_events(snap(1.3), study.StudySnapshot(lam=1.4, failed_stage="power-flow"))
    assert e.kind == "structure-induced" and e.terminal


def test_failed_sep_is_structure_induced():
    (e,) = study.detect_events(snap(1.3), study.StudySnapshot(lam=1.4, failed_stage="sep"))
    assert e.kind == "structure-induced" and "SEP solve" in e.diagnostics["detector"]


def test_singular_algebraic_jacobian_flagged():
    cur = replace(snap(0.5), sep_sigma_min=1e-8)
    kinds = [e.kind for e in study.detect_events(snap(0.4), cur)]
    assert kinds == ["structure-induced"]


def test_saddle_node_by_distance():
    cur = replace(snap(0.5), distances={"UEP1": 1e-4, "UEP2": 1.0})
    (e,) = study.detect_events(snap(0.4), cur)
    assert e.kind == "saddle-node" and e.terminal


def test_unordered_snapshots_rejected():
    with pytest.raises(InputError):
        study.detect_events(snap(0.4), snap(0.0))


def test_mismatched_systems_rejected():
    a = replace(snap(0.0), model=SimpleNamespace(size=24))
    b = replace(snap(0.1), model=SimpleNamespace(size=10))
    with pytest.raises(InputError):
        study.detect_events(a, b)


def test_narrow_bracket_returned_unchanged(scenario45):
    e = study.BifurcationEvent("closest-uep-switch", 0.381, 0.385, {"from": "UEP1", "to": "UEP2"})
    assert study.refine_event(scenario45, e) is e


# ------------------------------------------------------------------ pipeline

def test_single_point_schedule(scenario45):
    res = study.run_sweep(replace(scenario45, lambdas=(0.0,)), with_region=False)
    assert len(res.snapshots) == 1 and res.events == [] and res.terminal is None
    assert res.snapshots[0].closest == "UEP1"


def test_base_case_failure_is_scenario_error():
    sc = study.load_scenario(DATA / "two_bus_scenario.json")
    with pytest.raises(ScenarioError):
        study.run_sweep(replace(sc, lambdas=(0.0,), network=str(DATA / "two_bus_overloaded.json")))


def test_power_flow_failure_gives_partial_snapshot():
    sc = study.load_scenario(DATA / "two_bus_scenario.json")
    s = study.run_snapshot(sc, 5.0)
    assert not s.ok and s.failed_stage == "power-flow" and s.sep is None
    assert "power-flow" in s.timings


def test_negative_lambda(scenario45):
    with pytest.raises(InputError):
        study.run_snapshot(scenario45, -0.1)


def test_base_snapshot(snap0):
    assert snap0.ok and snap0.closest == "UEP1"
    assert snap0.boundary_labels == ("UEP1",)
    assert snap0.sep_max_real < 0 and snap0.sep_sigma_min > 1e-6


def test_snapshot_040(sweep45):
    s = snap_at(sweep45, 0.4)
    assert s.closest == "UEP2" and s.boundary_labels == ("UEP2",)


def test_sweep_switch_event(sweep45):
    sw = [e for e in sweep45.events if e.kind == "closest-uep-switch"]
    assert len(sw) == 1
    e = sw[0]
    assert 0.0 < e.lo < e.hi <= 0.4 and e.width <= 0.01
    assert e.labels == ("UEP1", "UEP2")


def test_switch_bracket_predicate_flips(sweep45, scenario45):
    (e,) = [e for e in sweep45.events if e.kind == "closest-uep-switch"]
    assert study._closest_minimal(scenario45, e.lo, ("UEP1", "UEP2")) == "UEP1"
    assert study._closest_minimal(scenario45, e.hi, ("UEP1", "UEP2")) != "UEP1"


def test_sweep_terminal_event(sweep45):
    t = sweep45.terminal
    assert t is not None and t.kind == "structure-induced"
    assert t is sweep45.events[-1]
    assert t.width <= 0.01
    assert 1.3 < t.lo < t.hi < 1.45


def test_closest_exists_or_is_recorded_missing(sweep45):
    for s in sweep45.snapshots:
        assert s.ok
        if s.closest:
            assert s.closest in s.boundary_labels
        else:
            assert s.no_boundary_uep and not s.boundary_labels


def test_pre_switching_voltages_fall_along_sweep(sweep45, net9):
    load = [i for i, b in enumerate(net9.buses) if b.kind == "load"]
    vm = np.array([s.power_flow.vm[load] for s in sweep45.snapshots])
    assert np.all(np.diff(vm, axis=0) <= 1e-12)


def test_standalone_snapshot_reproduces_sweep(sweep45, scenario45):
    ref = snap_at(sweep45, 0.4)
    s = study.run_snapshot(scenario45, 0.4, with_region=False)
    assert s.labels == ref.labels and s.closest == ref.closest
    assert s.boundary_labels == ref.boundary_labels
    assert np.max(np.abs(s.sep.x - ref.sep.x)) < 1e-9
    for u in s.ueps:
        assert np.max(np.abs(u.x - ref.uep(u.label).x)) < 1e-9
        assert u.energy.total == pytest.approx(ref.uep(u.label).energy.total, abs=1e-9)


def test_line_4_6_has_a_switch(sweep46):
    kinds = [e.kind for e in sweep46.events]
    assert "closest-uep-switch" in kinds
    assert sweep46.terminal is not None
