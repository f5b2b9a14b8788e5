import json
import math

import numpy as np
import pytest

from mfg_forecast.carleman import ConvexParams, EstimateCheckReport, alpha_min, \
    check_carleman_estimate, check_quasi_carleman, cwf, cwf_field, \
    first_passing_lambda, lambda_sweep, log_cwf, min_c, q_factor, \
    sample_neumann_field
from mfg_forecast.grid import Field, make_grid


def test_min_c_values():
    assert min_c(1.0) == pytest.approx(1 + math.sqrt(3), abs=1e-12)
    assert min_c(4.0) == pytest.approx(4.0, abs=1e-12)
    assert 3.0 >= min_c(1.0)  # the working c=3 is admissible at t_max=1
    with pytest.raises(ValueError):
        min_c(0.0)


def test_cwf_pointwise_values():
    assert cwf(1.0, 2.0, 3.0, 1.0) == pytest.approx(math.exp(9.0), rel=1e-12)
    assert cwf(0.0, 2.0, 3.0, 1.0) == pytest.approx(math.exp(16.0), rel=1e-12)


def test_cwf_monotone_decreasing_in_time():
    vals = [cwf(t, 2.0, 3.0, 1.0) for t in (0.0, 0.2, 0.8, 1.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_cwf_monotone_increasing_in_exponent():
    # holds wherever the base T - t + c exceeds 1, i.e. t < T + c - 1
    for t in (0.0, 0.5, 1.0):
        vals = [cwf(t, lam, 3.0, 1.0) for lam in (1.0, 2.0, 3.0)]
        assert all(a < b for a, b in zip(vals, vals[1:]))


def test_cwf_peak_at_initial_time():
    g = make_grid(-1, 1, 1, 0.1, 0.1, 0.6)
    f = cwf_field(g, 2.0, 3.0)
    assert np.all(f.values[:, 0] == f.values.max())
    assert np.allclose(f.values[0, :], f.values[5, :])  # t-dependent only


def test_cwf_overflow_reported_not_fatal():
    with pytest.warns(RuntimeWarning, match="log space"):
        assert cwf(0.0, 50.0, 3.0, 1.0) == math.inf
    assert log_cwf(0.0, 50.0, 3.0, 1.0) == 4.0**50


def test_q_factor_values():
    assert q_factor(2.0, 3.0, 1.0) == pytest.approx(0.125, abs=1e-15)
    assert q_factor(1.0, 3.0, 1.0) == pytest.approx(1.0, abs=1e-15)
    assert q_factor(1.0, 7.3, 9.1) == pytest.approx(1.0, abs=1e-15)
    assert q_factor(2.0, 3.0, 2.0) == pytest.approx(0.1, abs=1e-15)


def test_alpha_min_values():
    assert alpha_min(2.0, 3.0, 1.1) == pytest.approx(2 * math.exp(-0.9), rel=1e-12)
    assert alpha_min(2.0, 3.0, 2.0) == pytest.approx(2 * math.exp(-9.0), rel=1e-12)
    with pytest.raises(ValueError):
        alpha_min(2.0, 3.0, 1.0)
    # the shipped working value 1e-5 sits far below the floor; only a report
    params = ConvexParams(lam=2, c=3, a=1.1, d=1, alpha=1e-5, gamma=0.6, t_max=1)
    assert not params.alpha_respects_floor()


def test_convex_params_validation():
    with pytest.raises(ValueError, match="floor"):
        ConvexParams(lam=2, c=2.0, a=1.1, d=1, alpha=0.5, gamma=0.6, t_max=1)
    with pytest.raises(ValueError, match="alpha"):
        ConvexParams(lam=2, c=3, a=1.1, d=1, alpha=1.5, gamma=0.6, t_max=1)
    with pytest.raises(ValueError, match="a must"):
        ConvexParams(lam=2, c=3, a=0.9, d=1, alpha=0.5, gamma=0.6, t_max=1)


def test_derived_quantities_recomputed():
    p = ConvexParams(lam=2, c=3, a=1.1, d=1, alpha=1e-5, gamma=0.6, t_max=1)
    assert p.q == pytest.approx(0.125)
    assert p.balance == pytest.approx(math.exp(-2 * 1.1 * 9), rel=1e-12)
    assert p.sobolev_index == 5


def test_weight_profile_dynamic_range_bound():
    p = ConvexParams(lam=2, c=3, a=1.1, d=1, alpha=1e-5, gamma=0.6, t_max=1)
    ts = np.linspace(0, 1, 11)
    prof = p.weight_profile(ts)
    cap = math.exp(2 * 4.0**2 - 2 * 1.1 * 9.0)
    assert np.all(prof <= cap * (1 + 1e-12))
    assert prof[0] == pytest.approx(cap, rel=1e-12)


def test_weight_ratio_between_endpoints_exact_in_log():
    p = ConvexParams(lam=2, c=3, a=1.1, d=1, alpha=1e-5, gamma=0.6, t_max=1)
    ts = np.array([0.0, 1.0])
    prof = p.weight_profile(ts)
    assert math.log(prof[0] / prof[1]) == pytest.approx(2 * (16.0 - 9.0), rel=1e-12)


def test_weight_profile_overflow_rejected():
    p = ConvexParams(lam=6, c=3, a=1.1, d=1, alpha=1e-5, gamma=0.6, t_max=1)
    with pytest.raises(ValueError, match="exponent"):
        p.weight_profile(np.array([0.0, 1.0]))


def test_sampled_fields_have_vanishing_boundary_slope():
    # the cosine series is flat at both endpoints; a one-sided slope
    # estimate must shrink at second order under refinement
    def boundary_slope(g):
        rng = np.random.default_rng(2)  # same coefficient draw on both grids
        vals = sample_neumann_field(g, rng)
        left = (-3 * vals[0] + 4 * vals[1] - vals[2]) / (2 * g.dx)
        right = (3 * vals[-1] - 4 * vals[-2] + vals[-3]) / (2 * g.dx)
        return max(np.abs(left).max(), np.abs(right).max())

    coarse = boundary_slope(make_grid(-1, 1, 1, 0.1, 0.1, 0.6))
    fine = boundary_slope(make_grid(-1, 1, 1, 0.05, 0.05, 0.6))
    # third order: the odd derivatives of every cosine mode vanish at the
    # endpoints, so the stencil's leading dx^2 term drops out too
    assert 6.0 <= coarse / fine <= 10.0


def test_carleman_checker_zero_field_trivial():
    # the checker redraws degenerate samples, so feed the terms directly:
    # a zero field makes both sides vanish and the inequality holds.
    g = make_grid(-1, 1, 1, 0.1, 0.1, 0.6)
    rep = check_carleman_estimate(5, 2.0, 3.0, g, seed=0)
    assert isinstance(rep, EstimateCheckReport)
    assert rep.passed


def test_carleman_checker_large_lambda_passes():
    g = make_grid(-1, 1, 1, 0.1, 0.1, 0.6)
    rep = check_carleman_estimate(100, 20.0, 3.0, g, seed=0)
    assert rep.passed
    assert rep.min_gap >= 0.0


def test_carleman_checker_reproducible():
    g = make_grid(-1, 1, 1, 0.1, 0.1, 0.6)
    a = check_carleman_estimate(50, 2.0, 3.0, g, seed=123)
    b = check_carleman_estimate(50, 2.0, 3.0, g, seed=123)
    assert a == b
    c = check_carleman_estimate(50, 2.0, 3.0, g, seed=124)
    assert c.min_gap != a.min_gap


def test_carleman_fitted_constant_stabilizes_under_refinement():
    coarse = make_grid(-1, 1, 1, 0.1, 0.1, 0.6)
    fine = make_grid(-1, 1, 1, 0.05, 0.05, 0.6)
    ca = check_carleman_estimate(60, 1.0, 3.0, coarse, seed=7)
    cb = check_carleman_estimate(60, 1.0, 3.0, fine, seed=7)
    assert ca.fitted_c is not None and cb.fitted_c is not None
    assert cb.fitted_c <= ca.fitted_c * 1.05


def test_quasi_checker_zero_coupling_reduces_to_heat_check():
    g = make_grid(-1, 1, 1, 0.1, 0.1, 0.6)
    zero_g = Field(g, np.zeros((g.nx, g.nt)))
    rep = check_quasi_carleman(60, zero_g, 10.0, 3.0, g, seed=1)
    assert rep.passed


def test_quasi_checker_reports_positive_constant_with_coupling(t11_case):
    g = t11_case.spec.grid
    coupling = Field(g, t11_case.spec.r_field.values * t11_case.m_true.values)
    rep = check_quasi_carleman(100, coupling, 2.0, 3.0, g, seed=0)
    assert rep.passed
    assert rep.fitted_c > 0
    assert rep.min_gap >= 0


def test_lambda_sweep_and_threshold():
    g = make_grid(-1, 1, 1, 0.1, 0.1, 0.6)
    reports = lambda_sweep(g, 3.0, [1, 2, 3], samples=40, seed=0)
    assert first_passing_lambda(reports) == 1
    assert first_passing_lambda(reports, require_positive=True) == 1


def test_report_json_roundtrip():
    g = make_grid(-1, 1, 1, 0.1, 0.1, 0.6)
    rep = check_carleman_estimate(20, 2.0, 3.0, g, seed=5)
    payload = json.loads(rep.to_json())
    assert payload["lambda"] == 2.0
    assert payload["samples"] == 20
    assert payload["pass"] is True
    assert payload["seed"] == 5
