from dataclasses import replace

import numpy as np
import pytest

from cuepflow.equilibria import (SearchSpec, classify, confirm_sep, find_neighborhood_ueps, match_labels,
                                 on_stability_boundary, solve_equilibrium)
from cuepflow.errors import InputError, NoEquilibriumError

from conftest import snap_at


def test_seed_at_sep_returns_it(snap0):
    eq = solve_equilibrium(snap0.sep.x, snap0.model)
    assert eq.iterations <= 2
    assert np.max(np.abs(eq.x - snap0.sep.x)) < 1e-10


def test_dynamic_state_seed_accepted(snap0):
    from cuepflow.dynamics import DynamicState
    st = DynamicState.from_vector(snap0.sep.x, snap0.model.n, snap0.model.m)
    assert solve_equilibrium(st, snap0.model, confirm=False).is_sep


def test_base_sep_confirmed(snap0):
    assert snap0.sep.is_sep
    tr = confirm_sep(snap0.sep, snap0.model)
    assert tr.converged


def test_non_finite_seed(snap0):
    x = snap0.sep.x.copy()
    x[0] = np.nan
    with pytest.raises(InputError):
        solve_equilibrium(x, snap0.model)


def test_hopeless_seed_reports_no_equilibrium(snap0):
    x = snap0.sep.x.copy()
    x[2 * snap0.model.n:2 * snap0.model.n + snap0.model.m] = 0.01
    with pytest.raises((NoEquilibriumError, InputError)):
        solve_equilibrium(x, snap0.model, max_iter=3)


def test_two_ueps_at_base_case(snap0):
    assert snap0.labels == ("UEP1", "UEP2")
    for u in snap0.ueps:
        assert u.k >= 1
        assert u.residual < 1e-8


def test_base_case_boundary_verdicts(snap0):
    assert snap0.uep("UEP1").on_boundary is True
    assert snap0.uep("UEP2").on_boundary is False


def test_boundary_verdicts_at_04(sweep45):
    s = snap_at(sweep45, 0.4)
    assert s.uep("UEP1").on_boundary is False
    assert s.uep("UEP2").on_boundary is True


def test_boundary_with_sep_as_uep(snap0):
    with pytest.raises(InputError):
        on_stability_boundary(snap0.sep, snap0.sep, snap0.model)


def test_boundary_witness_converges(snap0):
    b = on_stability_boundary(snap0.uep("UEP1"), snap0.sep, snap0.model, record=True)
    assert b.verdict is True
    assert b.witnesses[-1].converged


def test_search_is_deterministic_and_deduped(snap0):
    spec = SearchSpec()
    a = find_neighborhood_ueps(snap0.sep, spec, snap0.model)
    b = find_neighborhood_ueps(snap0.sep, spec, snap0.model)
    assert [u.label for u in a] == [u.label for u in b]
    assert all(np.array_equal(p.x, q.x) for p, q in zip(a, b))
    for i, p in enumerate(a):
        for q in a[i + 1:]:
            assert np.linalg.norm(p.x - q.x) > spec.dedupe


def test_search_needs_a_sep(snap0):
    with pytest.raises(InputError):
        find_neighborhood_ueps(snap0.uep("UEP1"), SearchSpec(), snap0.model)


def test_search_spec_validation():
    with pytest.raises(InputError):
        SearchSpec(radii=(1.0, 0.5))
    with pytest.raises(InputError):
        SearchSpec(dedupe=0.0)


def test_classification_consistent_with_eigenvalues(snap0):
    for e in (snap0.sep, *snap0.ueps):
        c = classify(e.x, snap0.model)
        assert c.k == int(np.sum(c.eigenvalues.real > 1e-6))
        assert c.kind == ("SEP" if c.k == 0 else f"type-{c.k} UEP")
        assert not c.near_degenerate


def test_line_4_6_pair(sweep46):
    base = sweep46.snapshots[0]
    assert {"UEP1", "UEP2"} <= set(base.labels)
    assert base.closest == "UEP1"


def test_equilibria_invariant_under_doubled_damping(snap0):
    doubled = snap0.model.with_damping_scale(2.0)
    for e in (snap0.sep, *snap0.ueps):
        p = solve_equilibrium(e.x, doubled, confirm=False)
        assert np.max(np.abs(p.x - e.x)) < 1e-10


def test_match_labels_by_nearest_state(snap0):
    ueps = list(snap0.ueps)
    moved = [replace(u, x=u.x + 1e-3, label="") for u in reversed(ueps)]
    out = match_labels(ueps, moved, snap0.model)
    for u in out:
        ref = snap0.uep(u.label)
        assert np.linalg.norm(ref.x - u.x) < 1e-2
    far = [replace(ueps[0], x=ueps[0].x + 5.0, label="")]
    assert match_labels(ueps, far, snap0.model)[0].label == "UEP3"
