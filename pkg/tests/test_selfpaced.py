"""Self-paced core. The closed-form weight rule is audited against a brute
grid search over the scalar objective (the oracle the implementation must
match), and the soundness conditions run on dense numeric grids."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wclab.selfpaced import (CheckReport, MuPolicy, default_topk, difficulty,
                             proposed_weight, regularizer_check, regularizer_value,
                             resolve_mu, variant_weight, weight_objective, weight_vector,
                             _scalar_f)


def grid_argmin(eta, mu, step=1e-4, hi=1.0):
    vs = np.arange(0.0, hi + step, step)
    return float(vs[np.argmin(weight_objective(vs, eta, mu))])


def test_difficulty_known_values_and_clamp():
    assert difficulty(0.9) == pytest.approx(-0.9 * np.log(0.1), abs=1e-12)
    assert difficulty(0.0) == 0.0
    eta_top = difficulty(1.0)
    assert np.isfinite(eta_top)
    assert eta_top == pytest.approx(-np.log(1e-12), rel=1e-4)


def test_difficulty_rejects_out_of_range():
    with pytest.raises(ValueError):
        difficulty(-0.1)
    with pytest.raises(ValueError):
        difficulty(1.1)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_difficulty_monotone_in_psi(a, b):
    lo, hi = min(a, b), max(a, b)
    assert difficulty(lo) <= difficulty(hi) + 1e-15


def test_proposed_weight_endpoints_and_cutoff():
    assert proposed_weight(0.0, 2.5) == 1.0
    assert proposed_weight(2.5, 2.5) == 0.0
    assert proposed_weight(3.0, 2.5) == 0.0
    # continuous approach to the cutoff from below
    assert proposed_weight(2.5 - 1e-9, 2.5) == pytest.approx(0.0, abs=1e-4)
    with pytest.raises(ValueError):
        proposed_weight(1.0, 0.0)
    with pytest.raises(ValueError):
        proposed_weight(-1.0, 1.0)


def test_closed_form_matches_grid_argmin():
    rng = np.random.default_rng(77)
    for _ in range(100):
        eta = float(rng.uniform(1e-9, 5.0))
        mu = float(rng.uniform(1e-9, 5.0))
        assert abs(proposed_weight(eta, mu) - grid_argmin(eta, mu)) <= 1e-3


@given(st.floats(1e-9, 10.0), st.floats(1e-9, 10.0), st.floats(0.0, 2.0))
@settings(max_examples=200)
def test_closed_form_is_global_minimizer(eta, mu, v):
    vstar = proposed_weight(eta, mu)
    assert 0.0 <= vstar <= 1.0
    assert weight_objective(vstar, eta, mu) <= weight_objective(v, eta, mu) + 1e-12


def test_regularizer_values_hand_checked():
    ones = np.ones(3)
    assert regularizer_value(ones, "hard") == -3.0
    assert regularizer_value(ones, "linear") == pytest.approx(-1.5)
    v = np.ones(2)
    assert regularizer_value(v, "proposed") == pytest.approx(2.0 ** 1.5 / 3.0 - 2.0)
    # logarithmic f at mu = 0.5: zeta = 0.5, f(v) = 0.5v - 0.5**v/ln(0.5)
    got = regularizer_value(np.array([1.0]), "logarithmic", mu=0.5)
    assert got == pytest.approx(0.5 - 0.5 / np.log(0.5))
    with pytest.raises(ValueError):
        regularizer_value(ones, "logarithmic", mu=2.0)
    with pytest.raises(ValueError):
        regularizer_value(ones, "nonsense")


def test_scalar_f_agrees_with_vector_f():
    for kind in ("proposed", "hard", "linear", "logarithmic"):
        for v in (0.0, 0.3, 1.0):
            assert _scalar_f(np.array([v]), 0.5, kind)[0] == pytest.approx(
                regularizer_value(np.array([v]), kind, mu=0.5), abs=1e-15)


def test_variant_weights_hand_checked():
    assert variant_weight(0.3, 0.5, "hard") == 1.0
    assert variant_weight(0.7, 0.5, "hard") == 0.0
    assert variant_weight(0.25, 0.5, "linear") == pytest.approx(0.5)
    assert variant_weight(0.25, 0.5, "logarithmic") == pytest.approx(
        np.log(0.75) / np.log(0.5))
    assert variant_weight(0.9, 0.5, "logarithmic") == 0.0


def test_logarithmic_falls_back_to_linear_outside_unit_mu():
    with pytest.warns(UserWarning, match="falling back"):
        got = variant_weight(1.0, 2.0, "logarithmic")
    assert got == pytest.approx(0.5)


@given(st.floats(0.0, 10.0), st.floats(1e-6, 0.999),
       st.sampled_from(["proposed", "hard", "linear", "logarithmic"]))
def test_variant_weights_stay_in_unit_interval(eta, mu, kind):
    assert 0.0 <= variant_weight(eta, mu, kind) <= 1.0


def test_resolve_mu_topk_selects_exactly_k():
    etas = np.array([0.3, 0.1, 0.4, 0.2])
    mu = resolve_mu(etas, MuPolicy(kind="topk", k=2))
    assert mu == pytest.approx(0.2 * (1 + 1e-9))
    v = np.array([variant_weight(float(e), mu, "proposed") for e in etas])
    assert (v > 0).sum() == 2
    assert v[1] > 0 and v[3] > 0


def test_resolve_mu_topk_handles_zero_difficulties():
    mu = resolve_mu(np.array([0.0, 0.0, 0.5]), MuPolicy(kind="topk", k=2))
    assert 0.0 < mu < 0.5
    mu_all_zero = resolve_mu(np.zeros(3), MuPolicy(kind="topk", k=2))
    assert mu_all_zero > 0.0


def test_resolve_mu_policies_and_errors():
    etas = np.array([1.0, 2.0, 3.0, 4.0])
    assert resolve_mu(etas, MuPolicy(kind="fixed", value=7.0)) == 7.0
    q = resolve_mu(etas, MuPolicy(kind="quantile", rho=0.5))
    assert q == pytest.approx(2.5 * (1 + 1e-9))
    with pytest.raises(ValueError):
        resolve_mu(np.array([]), MuPolicy(kind="fixed", value=1.0))
    with pytest.raises(ValueError):
        MuPolicy(kind="fixed", value=0.0)
    with pytest.raises(ValueError):
        MuPolicy(kind="bogus")


def test_default_topk_keeps_half_rounded_up():
    assert [default_topk(n) for n in (1, 2, 3, 4, 5)] == [1, 1, 2, 2, 3]


def test_weight_vector_forgotten_tasks_get_full_weight():
    v, mu = weight_vector(np.zeros(4), MuPolicy(kind="fixed", value=1.0))
    assert np.array_equal(v, np.ones(4))
    assert mu == 1.0
    v2, _ = weight_vector(np.zeros(4), MuPolicy(kind="topk", k=2))
    assert np.array_equal(v2, np.ones(4))


def test_weight_vector_fixed_mu_below_all_difficulties_zeroes_everything():
    psis = np.array([0.8, 0.9, 0.7])
    etas = difficulty(psis)
    v, _ = weight_vector(psis, MuPolicy(kind="fixed", value=float(etas.min()) / 2))
    assert np.array_equal(v, np.zeros(3))


def test_weight_vector_prefers_forgotten_tasks():
    # low accuracy -> low difficulty -> high priority under topk
    v, mu = weight_vector(np.array([0.2, 0.95, 0.3, 0.9]), MuPolicy(kind="topk", k=2))
    assert v[0] > 0 and v[2] > 0
    assert v[1] == 0 and v[3] == 0


def test_regularizer_check_passes_for_proposed_and_simple_variants():
    for kind in ("proposed", "hard", "linear"):
        report = regularizer_check(kind, trials=20, grid=200)
        assert isinstance(report, CheckReport)
        assert report.passed, report.failures


def test_regularizer_check_reports_logarithmic_mu_inversion():
    report = regularizer_check("logarithmic", trials=20, grid=200)
    assert not report.passed
    assert any("mu-monotonicity" in f for f in report.failures)
