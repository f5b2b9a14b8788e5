import numpy as np
import pytest

from mfg_forecast import calculus
from mfg_forecast.carleman import ConvexParams
from mfg_forecast.grid import Field, constant_field, make_grid
from mfg_forecast.model import KernelSpec, make_problem_spec
from mfg_forecast.objective import Objective, StatePair
from mfg_forecast.optimizer import BUDGET, CONVERGED, STALLED, OptimizerConfig, \
    make_start, minimize, project
import mfg_forecast.experiments as experiments


@pytest.fixture()
def grid():
    return make_grid(-1, 1, 1, 0.1, 0.1, 0.6)


@pytest.fixture()
def params():
    return ConvexParams(lam=2, c=3, a=1.1, d=1, alpha=1e-5, gamma=0.6, t_max=1)


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(step0=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(armijo_c=1.5)
    with pytest.raises(ValueError):
        OptimizerConfig(method="newton")


def test_make_start_constant_extension(grid):
    u0 = grid.x_nodes() ** 2
    m0 = np.full(grid.nx, 0.5)
    spec = make_problem_spec(grid, u0, m0, KernelSpec(constant=1.0))
    start = make_start(spec)
    for j in range(grid.nt):
        assert np.array_equal(start.u.values[:, j], u0)
        assert np.array_equal(start.m.values[:, j], m0)
    assert np.all(start.constraint_mask[:, 0])
    assert not start.constraint_mask[:, 1:].any()


def test_project_restores_only_pinned_slice(grid):
    u0 = np.zeros(grid.nx)
    m0 = np.full(grid.nx, 0.5)
    spec = make_problem_spec(grid, u0, m0, KernelSpec(constant=1.0))
    rng = np.random.default_rng(0)
    vals_u = rng.standard_normal((grid.nx, grid.nt))
    vals_m = rng.standard_normal((grid.nx, grid.nt))
    state = StatePair(Field(grid, vals_u), Field(grid, vals_m))
    fixed = project(state, spec)
    assert np.array_equal(fixed.u.values[:, 0], u0)
    assert np.array_equal(fixed.m.values[:, 0], m0)
    assert np.array_equal(fixed.u.values[:, 1:], vals_u[:, 1:])
    assert np.array_equal(fixed.m.values[:, 1:], vals_m[:, 1:])


def test_project_idempotent_and_identity_on_feasible(grid):
    spec = make_problem_spec(grid, np.zeros(grid.nx), np.full(grid.nx, 0.5),
                             KernelSpec(constant=1.0))
    rng = np.random.default_rng(1)
    state = StatePair(Field(grid, rng.standard_normal((grid.nx, grid.nt))),
                      Field(grid, rng.standard_normal((grid.nx, grid.nt))))
    once = project(state, spec)
    twice = project(once, spec)
    assert twice is once  # already feasible, returned unchanged


def test_project_rejects_foreign_grid(grid):
    other = make_grid(-1, 1, 1, 0.2, 0.2, 0.6)
    spec = make_problem_spec(grid, np.zeros(grid.nx), np.full(grid.nx, 0.5),
                             KernelSpec(constant=1.0))
    state = StatePair(constant_field(other, 0.0), constant_field(other, 0.5))
    with pytest.raises(ValueError, match="grid"):
        project(state, spec)


def test_stationary_start_converges_immediately(grid, params):
    # zero data with zero source: the start state is a stationary point
    spec = make_problem_spec(grid, np.zeros(grid.nx), np.zeros(grid.nx),
                             KernelSpec(constant=1.0))
    result = minimize(spec, params, OptimizerConfig())
    assert result.status == CONVERGED
    assert len(result.trace.rows) == 1


def _h2_gram_matrix(grid, mask_free):
    """H^2 quadratic-form matrix by polarization of the calculus norm."""
    n = grid.nx * grid.nt

    def q(vec):
        return calculus.h2_norm_discrete(Field(grid, vec.reshape(grid.nx, grid.nt))) ** 2

    basis = np.eye(n)
    diag = np.array([q(basis[k]) for k in range(n)])
    a = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            if i == j:
                a[i, j] = diag[i]
            else:
                a[i, j] = a[j, i] = 0.5 * (q(basis[i] + basis[j]) - diag[i] - diag[j])
    return a[np.ix_(mask_free, mask_free)]


def test_quadratic_case_contracts_at_predicted_rate():
    # With the residual terms off, the objective is alpha*|(u,m)|_H2^2 and
    # descent along an eigenvector contracts by exactly 1 - 2*alpha*xi*mu.
    grid = make_grid(-1, 1, 1, 0.5, 0.25, 0.6)
    alpha = 0.02
    params = ConvexParams(lam=2, c=3, a=1.1, d=1, alpha=alpha, gamma=0.6, t_max=1)
    spec = make_problem_spec(grid, np.zeros(grid.nx), np.zeros(grid.nx),
                             KernelSpec(constant=1.0))
    n = grid.nx * grid.nt
    free = [k for k in range(n) if k % grid.nt != 0]  # drop the t=0 plane
    gram = _h2_gram_matrix(grid, free)
    eigvals, eigvecs = np.linalg.eigh(gram)
    mu = eigvals[-1]
    vec = np.zeros(n)
    vec[free] = eigvecs[:, -1]
    u_start = vec.reshape(grid.nx, grid.nt)
    start = StatePair(Field(grid, u_start), constant_field(grid, 0.0))

    config = OptimizerConfig(tol=1e-30, max_iters=25, method="gd")
    result = minimize(spec, params, config, start=start, residual_weight=0.0)
    assert result.status == BUDGET
    norms = [row.state_norm for row in result.trace.rows]
    steps = [row.step for row in result.trace.rows]
    ratios = [b / a for a, b in zip(norms[2:-1], norms[3:])]
    # constant contraction after burn-in
    assert max(ratios) - min(ratios) < 0.01 * ratios[0]
    predicted = abs(1.0 - 2.0 * alpha * steps[-1] * mu)
    assert ratios[-1] == pytest.approx(predicted, rel=0.1)


def test_gd_monotone_descent_and_feasibility(grid, params):
    cfg = experiments.resolve_config("T1_2", {})
    _, spec, _ = experiments._build_problem("T1_2", cfg)
    config = OptimizerConfig(tol=1e-30, max_iters=40, method="gd")
    result = minimize(spec, params, config)
    totals = [row.total for row in result.trace.rows]
    assert all(b < a for a, b in zip(totals, totals[1:]))
    assert np.array_equal(result.state.u.values[:, 0], spec.u0)
    assert np.array_equal(result.state.m.values[:, 0], spec.m0)


def test_lbfgs_converges_on_manufactured_test(params):
    cfg = experiments.resolve_config("T1_1", {})
    _, spec, _ = experiments._build_problem("T1_1", cfg)
    result = minimize(spec, params, OptimizerConfig(method="lbfgs"))
    assert result.status == CONVERGED
    assert result.trace.rows[-1].foo_ratio < 1e-5
    assert np.array_equal(result.state.u.values[:, 0], spec.u0)


def test_lbfgs_handles_tabulated_kernel(grid, params):
    # exercises the preconditioner's table branch
    rng = np.random.default_rng(13)
    table = rng.uniform(0.5, 1.0, (grid.nx, grid.nx))
    spec = make_problem_spec(grid, grid.x_nodes() ** 2 - 1.0,
                             np.full(grid.nx, 0.5), KernelSpec(table=table))
    result = minimize(spec, params, OptimizerConfig(method="lbfgs", tol=1e-2,
                                                    max_iters=2000))
    assert result.status == CONVERGED


def test_minimize_deterministic(params):
    cfg = experiments.resolve_config("T1_2", {})
    _, spec, _ = experiments._build_problem("T1_2", cfg)
    config = OptimizerConfig(max_iters=60, tol=1e-30, method="lbfgs")
    r1 = minimize(spec, params, config)
    r2 = minimize(spec, params, config)
    assert r1.trace.rows == r2.trace.rows
    assert np.array_equal(r1.state.u.values, r2.state.u.values)
    totals = [row.total for row in r1.trace.rows]
    assert all(b < a for a, b in zip(totals, totals[1:]))  # monotone descent


def test_inconsistent_gradient_surfaces_as_stall(grid, params, monkeypatch):
    spec = make_problem_spec(grid, grid.x_nodes() ** 2 - 1.0,
                             np.full(grid.nx, 0.5), KernelSpec(constant=1.0))

    original = Objective.value_and_gradient_arrays

    def wrong_gradient(self, u, m, masked=True):
        bd, gu, gm = original(self, u, m, masked)
        return bd, -gu, -gm  # ascent direction disguised as the gradient

    monkeypatch.setattr(Objective, "value_and_gradient_arrays", wrong_gradient)
    result = minimize(spec, params, OptimizerConfig(method="gd", max_iters=5))
    assert result.status == STALLED
    assert "backtrack" in result.message


def test_trace_csv_layout(tmp_path, params):
    cfg = experiments.resolve_config("T1_2", {})
    _, spec, _ = experiments._build_problem("T1_2", cfg)
    result = minimize(spec, params, OptimizerConfig(max_iters=5, tol=1e-30))
    path = tmp_path / "trace.csv"
    result.trace.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,j1,j2,j3,total,grad_norm,foo_ratio,step"
    assert len(lines) == 1 + len(result.trace.rows)
    summary = result.trace.summary_dict()
    assert summary["iterations"] == len(result.trace.rows)
