import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mocop.core import EthicalWeightVector, EvaluationRecord, ScoreTuple
from mocop.meta import (
    CONVERGED,
    RUNNING,
    CycleSummary,
    EmptyCycle,
    NoPairs,
    SeriesTooShort,
    check_convergence,
    coherence_ratio,
    eci,
    mean_features,
    moral_divergence,
    msi,
    project_floored_simplex,
    summarize_cycle,
    temporal_stability,
    update_theta,
    utility,
)

THETA0 = EthicalWeightVector(0.3, 0.35, 0.35)
unit = st.floats(0, 1, allow_nan=False)


def project_by_enumeration(x, floor):
    """Exact projection oracle: try every set of coordinates pinned at the floor."""
    x = np.asarray(x, float)
    best, best_dist = None, np.inf
    for k in range(x.size):
        for pinned in itertools.combinations(range(x.size), k):
            free = [i for i in range(x.size) if i not in pinned]
            shift = (x[free].sum() + floor * len(pinned) - 1.0) / len(free)
            y = np.full(x.size, floor)
            y[free] = x[free] - shift
            if y.min() < floor - 1e-12:
                continue
            dist = float(((y - x) ** 2).sum())
            if dist < best_dist:
                best, best_dist = y, dist
    return best


def _record(model, pid, composite, domain="fairness", lex=0.8, rea=0.6, tox=0.1):
    return EvaluationRecord("r", 0, pid, domain, model, "p", "x", 0.7,
                            ScoreTuple(lex, 0.45, rea, tox), composite, "Borderline", "t")


# -- indices ------------------------------------------------------------------------------

def test_eci_examples():
    assert eci([0.6, 0.6, 0.6]) == pytest.approx(0.6)
    assert eci([0.6, 0.8]) == pytest.approx(0.7)
    with pytest.raises(EmptyCycle):
        eci([])


def test_divergence_examples():
    a = {"p1": 0.8, "p2": 0.9}
    b = {"p1": 0.7, "p2": 0.8}
    assert moral_divergence(a, a).d_moral == 0.0
    assert moral_divergence(a, b).d_moral == pytest.approx(0.1)
    assert moral_divergence(a, b).d_moral == moral_divergence(b, a).d_moral
    with pytest.raises(NoPairs):
        moral_divergence({"p1": 0.1}, {"p2": 0.2})


def test_divergence_counts_unpaired_and_splits_by_domain():
    d = moral_divergence({"p1": 0.8, "p2": 0.5, "p3": 0.1}, {"p1": 0.6, "p2": 0.5},
                         {"p1": "fairness", "p2": "privacy", "p3": "privacy"})
    assert d.unpaired == 1 and d.n_pairs == 2
    assert d.per_domain == {"fairness": pytest.approx(0.2), "privacy": 0.0}


@given(st.dictionaries(st.text(min_size=1, max_size=4), st.tuples(unit, unit), min_size=1))
def test_divergence_zero_iff_identical(pairs):
    a = {k: v[0] for k, v in pairs.items()}
    b = {k: v[1] for k, v in pairs.items()}
    d = moral_divergence(a, b).d_moral
    assert 0.0 <= d <= 1.0
    assert (d == 0.0) == (a == b)


def test_temporal_stability_examples():
    assert temporal_stability([0.7] * 4) == 1.0
    assert temporal_stability([0.5, 0.7, 0.5]) == pytest.approx(0.8)
    assert temporal_stability([0, 1, 0, 1, 0]) == 0.0
    with pytest.raises(SeriesTooShort):
        temporal_stability([0.5])


@given(st.lists(st.integers(0, 100).map(lambda k: k / 100), min_size=2, max_size=20))
def test_temporal_stability_one_iff_constant(series):
    s = temporal_stability(series)
    assert 0.0 <= s <= 1.0
    assert (s == 1.0) == (len(set(series)) == 1)


def test_msi_and_coherence_examples():
    assert round(msi(0.81, 0.083), 3) == 0.748
    assert round(msi(0.79, 0.067), 3) == 0.740
    assert msi(0.6, 0.0) == 0.6
    assert round(coherence_ratio(0.067), 3) == 0.933
    assert round(coherence_ratio(0.072), 3) == 0.928
    assert coherence_ratio(0.0) == 1.0


def test_utility_examples():
    assert utility((1, 1, 0), THETA0) == pytest.approx(0.65)
    assert utility((0, 0, 1), THETA0) == pytest.approx(-0.35)
    assert utility((0, 0, 0), EthicalWeightVector(0.1, 0.1, 0.8)) == 0.0


def test_utility_is_linear_in_records():
    rng = np.random.default_rng(0)
    recs = [_record("m", f"p{i}", 0.5, lex=float(a), rea=float(b), tox=float(c))
            for i, (a, b, c) in enumerate(rng.uniform(size=(200, 3)))]
    per_record = np.mean([utility((r.scores.s_lex, r.scores.s_rea, r.scores.tox), THETA0)
                          for r in recs])
    assert utility(mean_features(recs), THETA0) == pytest.approx(per_record, abs=1e-12)


# -- theta adaptation ------------------------------------------------------------------------

def test_zero_gradient_keeps_theta():
    assert update_theta(THETA0, (0, 0, 0), 0.01) == THETA0


def test_projection_example():
    third = EthicalWeightVector(1 / 3, 1 / 3, 1 - 2 / 3)
    new = update_theta(third, (1, 1, 1), 0.01)
    raw = np.array([1 / 3 + 0.01, 1 / 3 + 0.01, 1 / 3 - 0.01])
    assert np.allclose(new.as_tuple(), project_by_enumeration(raw, 0.05), atol=1e-12)
    assert new.alpha == pytest.approx(new.beta)
    assert new.lam < 1 / 3
    assert sum(new.as_tuple()) == pytest.approx(1.0, abs=1e-12)


@given(st.lists(st.floats(-2, 2), min_size=3, max_size=6), st.floats(0.0, 0.15))
def test_projection_matches_enumeration(x, floor):
    if floor * len(x) > 1:
        return
    y = project_floored_simplex(x, floor)
    assert np.allclose(y, project_by_enumeration(x, floor), atol=1e-9)
    assert abs(y.sum() - 1.0) <= 1e-12 and y.min() >= floor - 1e-12


@given(st.tuples(unit, unit, unit), st.floats(1e-4, 1.0), st.booleans(), st.integers(1, 40))
def test_theta_stays_on_floored_simplex(features, eta, descent, steps):
    theta = THETA0
    for _ in range(steps):
        theta = update_theta(theta, features, eta, 0.05, descent=descent)
        t = np.array(theta.as_tuple())
        assert abs(t.sum() - 1.0) <= 1e-9 and t.min() >= 0.05 - 1e-12


@given(st.tuples(st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0.01, 1)))
def test_doubling_eta_doubles_the_step(features):
    # small steps stay interior and unclamped, so the move is exactly the gradient step
    eta = 1e-4
    one = np.array(update_theta(THETA0, features, eta).as_tuple()) - THETA0.as_tuple()
    two = np.array(update_theta(THETA0, features, 2 * eta).as_tuple()) - THETA0.as_tuple()
    assert np.allclose(two, 2 * one, atol=1e-12)


def test_step_is_clamped():
    moved = update_theta(THETA0, (1, 0, 0), eta=10.0, gamma_max=0.05)
    assert np.abs(np.array(moved.as_tuple()) - THETA0.as_tuple()).max() <= 0.05 + 1e-12


def test_literal_descent_reverses_direction():
    up = update_theta(THETA0, (0.8, 0.6, 0.1), 0.01)
    down = update_theta(THETA0, (0.8, 0.6, 0.1), 0.01, descent=True)
    assert up.alpha > THETA0.alpha > down.alpha
    assert up.lam < THETA0.lam < down.lam
    assert utility((0.8, 0.6, 0.1), up) > utility((0.8, 0.6, 0.1), down)


# -- convergence ----------------------------------------------------------------------------

def test_constant_series_converge():
    assert check_convergence([0.4] * 4, [0.7] * 4) == CONVERGED


def test_alternating_j_keeps_running():
    assert check_convergence([0.1, -0.1] * 5, [0.7] * 10) == RUNNING


def test_short_series_keep_running():
    assert check_convergence([0.4] * 3, [0.7] * 3) == RUNNING


def test_delta_example_read_as_series():
    j = [0.01, 0.0005, 0.0004, 0.0003]
    drift = [0.5, 0.51, 0.52, 0.53]
    assert check_convergence(j, drift) == RUNNING
    assert check_convergence(j + [0.0003], drift + [0.54]) == CONVERGED


def test_delta_example_read_as_deltas():
    deltas = [0.01, 0.0005, 0.0004, 0.0003]
    j = list(np.cumsum([0.3] + deltas))
    drift = [0.5 + 0.01 * i for i in range(len(j))]
    assert check_convergence(j, drift) == CONVERGED
    curved = drift[:-1] + [drift[-1] + 0.01]
    assert check_convergence(j, curved) == RUNNING


def test_every_model_must_settle():
    j = [0.4] * 5
    assert check_convergence(j, {"a": [0.7] * 5, "b": [0.7] * 5}) == CONVERGED
    assert check_convergence(j, {"a": [0.7] * 5, "b": [0.7, 0.7, 0.7, 0.7, 0.75]}) == RUNNING


# -- cycle summary ------------------------------------------------------------------------------

def test_summarize_cycle_and_round_trip():
    recs = [_record("a", "p1", 0.8), _record("a", "p2", 0.9, "privacy"),
            _record("b", "p1", 0.7), _record("b", "p2", 0.8, "privacy")]
    s = summarize_cycle(0, recs, THETA0)
    assert s.eci == {"a": pytest.approx(0.85), "b": pytest.approx(0.75)}
    assert s.d_moral == pytest.approx(0.1)
    assert s.domain_divergence == {"fairness": pytest.approx(0.1), "privacy": pytest.approx(0.1)}
    assert s.utility == pytest.approx(utility((0.8, 0.6, 0.1), THETA0))
    assert CycleSummary.from_dict(s.to_dict()) == s


def test_single_model_cycle_has_no_divergence():
    s = summarize_cycle(0, [_record("a", "p1", 0.8)], THETA0)
    assert s.d_moral is None and s.domain_divergence == {}
    with pytest.raises(EmptyCycle):
        summarize_cycle(1, [], THETA0)
