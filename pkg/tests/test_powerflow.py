import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cuepflow import powerflow as pf
from cuepflow.errors import BracketingError, DivergenceError, InputError
from cuepflow.sysmodel import build_ybus

from conftest import two_bus


def two_bus_closed_form(x, p):
    """Slack 1.0 at angle 0, lossless line jx, unity-power-factor load p."""
    half = 0.5 * np.arcsin(2 * x * p)
    return np.sqrt((1 + np.sqrt(1 - 4 * x * x * p * p)) / 2), -half


def test_scale_identity_at_zero(net9, pattern9):
    inj = pf.scale_injections(net9, pattern9, 0.0)
    np.testing.assert_array_equal(inj.p_load, net9.p_load)
    np.testing.assert_array_equal(inj.q_load, net9.q_load)


def test_scale_lambda_04(net9, pattern9):
    inj = pf.scale_injections(net9, pattern9, 0.4)
    assert inj.p_load[4] == pytest.approx(1.75)
    assert inj.q_load[4] == pytest.approx(0.7)
    assert inj.q_load[4] / inj.p_load[4] == pytest.approx(0.4)


def test_scale_lambda_139(net9, pattern9):
    inj = pf.scale_injections(net9, pattern9, 1.39)
    np.testing.assert_allclose(inj.p_load, 2.39 * net9.p_load, rtol=1e-14)
    np.testing.assert_allclose(inj.q_load, 2.39 * net9.q_load, rtol=1e-14)


def test_scale_keeps_generator_setpoints(net9, pattern9):
    a = pf.scale_injections(net9, pattern9, 0.0)
    b = pf.scale_injections(net9, pattern9, 0.9)
    np.testing.assert_array_equal(a.p_gen, b.p_gen)
    np.testing.assert_array_equal(a.v_set, b.v_set)


def test_negative_lambda_rejected(net9, pattern9):
    with pytest.raises(InputError):
        pf.scale_injections(net9, pattern9, -0.1)


def test_two_bus_closed_form():
    net = two_bus(x=0.1, p=0.1)
    sol = pf.solve_at(net, pf.StressPattern.proportional_load(net), 0.0)
    v, th = two_bus_closed_form(0.1, 0.1)
    assert abs(sol.vm[1] - v) < 1e-10
    assert abs(sol.va[1] - th) < 1e-10


def test_flat_network_without_load():
    net = two_bus(x=0.1, p=0.0)
    sol = pf.solve_at(net, pf.StressPattern.proportional_load(net), 0.0)
    assert sol.iterations == 0
    np.testing.assert_array_equal(sol.vm, [1.0, 1.0])
    np.testing.assert_array_equal(sol.va, [0.0, 0.0])


def test_two_bus_beyond_nose_diverges():
    x = 0.1
    net = two_bus(x=x, p=1.05 / (2 * x))
    with pytest.raises(DivergenceError) as info:
        pf.solve_at(net, pf.StressPattern.proportional_load(net), 0.0)
    assert info.value.last_iterate is not None


def test_two_bus_nose_bracket():
    x, p0 = 0.1, 1.0
    net = two_bus(x=x, p=p0)
    nb = pf.nose_bracket(net, pf.StressPattern.proportional_load(net), 0.0, 10.0)
    lam_star = 1 / (2 * x) / p0 - 1
    assert nb.hi - nb.lo <= 1e-3
    assert nb.lo - 1e-3 <= lam_star <= nb.hi + 1e-3
    assert np.isfinite(nb.sigma_min)


def test_nose_bracket_degenerate_interval():
    net = two_bus()
    with pytest.raises(BracketingError):
        pf.nose_bracket(net, pf.StressPattern.proportional_load(net), 1.0, 1.0)


def test_nose_bracket_both_convergent():
    net = two_bus(x=0.1, p=0.1)
    with pytest.raises(BracketingError):
        pf.nose_bracket(net, pf.StressPattern.proportional_load(net), 0.0, 1.0)


def test_wscc_nose_bracket_is_finite(net9, pattern9):
    nb = pf.nose_bracket(net9, pattern9, 1.0, 2.0)
    assert 1.0 < nb.lo < nb.hi < 2.0 and nb.hi - nb.lo <= 1e-3
    assert 0 < nb.sigma_min < pf.jacobian_sigma_min(net9, pf.solve_at(net9, pattern9, 0.0))


def test_wscc_base_case(net9, pattern9):
    t0 = time.perf_counter()
    sol = pf.solve_at(net9, pattern9, 0.0)
    assert time.perf_counter() - t0 < 1.0
    assert sol.max_mismatch < 1e-8
    np.testing.assert_allclose(sol.vm[[0, 1, 2]], [1.04, 1.025, 1.025])


def _independent_mismatch(net, sol):
    """Mismatch by explicit per-bus sums over the polar Y entries."""
    Y = build_ybus(net).matrix
    G, B = Y.real, Y.imag
    out = []
    for i in range(net.n_bus):
        p = q = 0.0
        for k in range(net.n_bus):
            a = sol.va[i] - sol.va[k]
            p += sol.vm[i] * sol.vm[k] * (G[i, k] * np.cos(a) + B[i, k] * np.sin(a))
            q += sol.vm[i] * sol.vm[k] * (G[i, k] * np.sin(a) - B[i, k] * np.cos(a))
        out.append(complex(sol.p_gen[i] - sol.p_load[i] - p, -sol.q_load[i] - q))
    return np.array(out)


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 1.3])
def test_recomputed_mismatch_agrees(net9, pattern9, lam):
    sol = pf.solve_at(net9, pattern9, lam)
    mine = pf.mismatch(build_ybus(net9).matrix, sol.vm, sol.va, pf.scale_injections(net9, pattern9, lam))
    other = _independent_mismatch(net9, sol)
    keep = [i for i, b in enumerate(net9.buses) if b.kind != "slack"]
    assert np.max(np.abs(mine.real[keep] - other.real[keep])) < 1e-12
    load = [i for i, b in enumerate(net9.buses) if b.kind == "load"]
    assert np.max(np.abs(mine.imag[load] - other.imag[load])) < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 1.3))
def test_warm_and_cold_start_agree(net9, pattern9, lam):
    cold = pf.solve_at(net9, pattern9, lam)
    warm = pf.solve_at(net9, pattern9, lam, init=pf.solve_at(net9, pattern9, max(0.0, lam - 0.05)))
    assert np.max(np.abs(cold.vm - warm.vm)) < 1e-8
    assert np.max(np.abs(cold.va - warm.va)) < 1e-8


def test_load_voltages_fall_along_upper_branch(net9, pattern9):
    curve = pf.trace_pv_curve(net9, pattern9, step=0.05, lam_max=1.3)
    assert curve.failed_at is None and curve.lams[-1] == pytest.approx(1.3)
    assert curve.load_bus_monotonicity_violations(net9) == []


def test_pv_curve_stops_at_nose(net9, pattern9):
    curve = pf.trace_pv_curve(net9, pattern9, step=0.05, lam_max=3.0)
    assert curve.failed_at is not None
    assert 1.3 < curve.lams[-1] < 1.4
