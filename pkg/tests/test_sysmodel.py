import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cuepflow.errors import ConfigError, DataError, DegeneracyError, InputError, TopologyError
from cuepflow.sysmodel import (apply_switching, branch_stamp, build_ybus, fixture_path, load_admittances,
                               loads_to_admittance, network_from_dict)

from conftest import two_bus


def reference_ybus(raw: dict, skip=()):
    """Textbook nodal assembly straight from the fixture JSON."""
    m = len(raw["buses"])
    Y = [[0j] * m for _ in range(m)]
    for br in raw["branches"]:
        f, t = br["from"], br["to"]
        if (f, t) in skip or (t, f) in skip or not br.get("in_service", True):
            continue
        y = 1 / complex(br.get("r", 0.0), br["x"])
        a = br.get("ratio", 1.0)
        bc = br.get("b", 0.0)
        Y[f - 1][f - 1] += y / (a * a) + 1j * bc / 2
        Y[t - 1][t - 1] += y + 1j * bc / 2
        Y[f - 1][t - 1] -= y / a
        Y[t - 1][f - 1] -= y / a
    for i, b in enumerate(raw["buses"]):
        Y[i][i] += complex(b.get("g_shunt", 0.0), b.get("b_shunt", 0.0))
    return np.array(Y)


@pytest.fixture(scope="module")
def raw9():
    return json.loads(fixture_path("wscc9.json").read_text())


def test_two_bus_single_line():
    Y = build_ybus(two_bus(x=0.1)).matrix
    np.testing.assert_allclose(Y, [[-10j, 10j], [10j, -10j]], atol=1e-14)


def test_load_folding_adds_admittance_on_diagonal():
    net = two_bus(x=0.1)
    shunts = np.array([1.25 - 0.5j, 0.0])
    Y = build_ybus(net, include_loads=True, load_shunts=shunts)
    assert Y.loads_folded
    assert Y.matrix[0, 0] - build_ybus(net).matrix[0, 0] == pytest.approx(1.25 - 0.5j, abs=1e-15)
    np.testing.assert_allclose(load_admittances(np.array([1.25]), np.array([0.5]), np.array([1.0])),
                               [1.25 - 0.5j])


def test_include_loads_needs_voltages():
    with pytest.raises(InputError):
        build_ybus(two_bus(), include_loads=True)


def test_wscc_matches_reference_assembly(net9, raw9):
    np.testing.assert_allclose(build_ybus(net9).matrix, reference_ybus(raw9), atol=1e-12)


def test_outage_4_5_matches_reference_assembly(net9, raw9):
    full = build_ybus(net9).matrix
    post = build_ybus(apply_switching(net9, (4, 5))).matrix
    np.testing.assert_allclose(post, reference_ybus(raw9, skip=[(4, 5)]), atol=1e-12)
    assert post[3, 4] == 0 and post[4, 3] == 0
    stamp = branch_stamp(net9.branches[net9.find_branch((4, 5))], 9)
    np.testing.assert_allclose(full[3, 3] - post[3, 3], stamp[3, 3], atol=1e-12)
    np.testing.assert_allclose(full[4, 4] - post[4, 4], stamp[4, 4], atol=1e-12)


def test_switching_4_5(net9):
    post = apply_switching(net9, (4, 5))
    assert sum(b.in_service for b in post.branches) == 8
    assert all(b.in_service for b in net9.branches)
    post.validate()


def test_switching_4_6_valid(net9):
    post = apply_switching(net9, (6, 4))
    assert sum(b.in_service for b in post.branches) == 8


def test_switching_missing_branch(net9):
    with pytest.raises(InputError):
        apply_switching(net9, (1, 9))


def test_switching_twice_is_an_error(net9):
    with pytest.raises(InputError):
        apply_switching(apply_switching(net9, (4, 5)), (4, 5))


def test_switching_that_islands_a_bus(net9):
    # bus 1 hangs off the 1-4 transformer only
    with pytest.raises(TopologyError):
        apply_switching(net9, (1, 4))


def test_load_conversion_trivial_cases():
    np.testing.assert_allclose(load_admittances(np.array([1.0, 0.0]), np.array([0.0, 0.0]), np.ones(2)),
                               [1.0, 0.0])


def test_load_conversion_degenerate_voltage():
    with pytest.raises(DegeneracyError):
        load_admittances(np.array([1.0]), np.array([0.2]), np.array([0.05]))


def test_bus5_load_conversion(net9, base_pf):
    y = loads_to_admittance(base_pf, net9)
    v5 = abs(base_pf.voltage[4])
    assert y[4] == pytest.approx((1.25 - 0.5j) / v5**2, rel=1e-14)


def test_zero_impedance_branch_rejected():
    with pytest.raises(DataError):
        network_from_dict({
            "buses": [{"id": 1, "kind": "slack"}, {"id": 2, "kind": "load"}],
            "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 0.0}],
            "generators": [{"bus": 1, "inertia": 1, "damping": 0, "p_set": 0, "xd_prime": 0.1}],
        })


def test_unknown_key_rejected(raw9):
    bad = json.loads(json.dumps(raw9))
    bad["buses"][0]["voltage"] = 1.0
    with pytest.raises(ConfigError, match="voltage"):
        network_from_dict(bad)


def test_two_slack_buses_rejected(raw9):
    bad = json.loads(json.dumps(raw9))
    bad["buses"][1]["kind"] = "slack"
    with pytest.raises(DataError):
        network_from_dict(bad)


def test_negative_inertia_rejected_unless_unvalidated(raw9):
    bad = json.loads(json.dumps(raw9))
    bad["generators"][0]["inertia"] = -1.0
    with pytest.raises(DataError):
        network_from_dict(bad)
    assert network_from_dict(bad, validate=False).generators[0].inertia == -1.0


def test_xq_defaults_to_xd(net9):
    assert all(g.xq_prime == g.xd_prime for g in net9.generators)


# ---------------------------------------------------------------- properties

volt = st.floats(0.5, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(volt, min_size=9, max_size=9))
def test_ybus_symmetric(net9, vs):
    Y = build_ybus(net9, include_loads=True, load_voltages=np.array(vs)).matrix
    assert np.max(np.abs(Y - Y.T)) < 1e-12


def test_assembly_is_linear_over_branches(net9):
    total = sum(branch_stamp(b, 9) for b in net9.branches)
    np.testing.assert_allclose(build_ybus(net9).matrix, total, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([(4, 5), (4, 6), (5, 7), (6, 9), (7, 8), (8, 9)]),
       st.lists(volt, min_size=9, max_size=9))
def test_switch_and_restore_is_bitwise_identity(net9, pair, vs):
    post = apply_switching(net9, pair)
    k = post.find_branch(pair)
    restored = replace(post, branches=tuple(replace(b, in_service=True) if i == k else b
                                            for i, b in enumerate(post.branches)))
    v = np.array(vs)
    a = build_ybus(net9, include_loads=True, load_voltages=v).matrix
    b = build_ybus(restored, include_loads=True, load_voltages=v).matrix
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.lists(volt, min_size=9, max_size=9))
def test_folded_equals_unfolded_plus_shunts(net9, vs):
    v = np.array(vs)
    folded = build_ybus(net9, include_loads=True, load_voltages=v).matrix
    plain = build_ybus(net9).matrix
    shunts = load_admittances(net9.p_load, net9.q_load, v)
    assert np.array_equal(folded, plain + np.diag(shunts))
