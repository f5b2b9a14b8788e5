"""Carleman weight function, its derived parameters, and estimate checkers.

The weight exp[(t_max - t + c)^lam] decays in time, so the weighted
least-squares functional concentrates its attention near t=0 where the
data live.  For large exponents the raw weight overflows double precision;
every consumer in this package therefore works with ratios: either the
weight relative to the balancing multiplier exp(-2*a*c^lam) (the
objective) or relative to the peak weight at t=0 (the estimate checkers,
where the rescaling divides both sides of the inequality and leaves the
fitted constants unchanged).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from mfg_forecast import calculus
from mfg_forecast.grid import Field, Grid

# exp() overflows just above 709; route through ratios beyond this.
_EXP_LIMIT = 700.0


def min_c(t_max: float) -> float:
    """Smallest admissible shift constant, 1 + sqrt(1 + 2*t_max)."""
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    return 1.0 + math.sqrt(1.0 + 2.0 * t_max)


def log_cwf(t, lam: float, c: float, t_max: float):
    """log of the weight: (t_max - t + c)^lam.  Always finite."""
    return (t_max - t + c) ** lam


def cwf(t: float, lam: float, c: float, t_max: float) -> float:
    """The weight exp[(t_max - t + c)^lam].

    Beyond double range the overflow is reported (a warning) and inf is
    returned; ratio-based consumers should evaluate in log space instead
    (log_cwf, or ConvexParams.weight_profile for the balanced weight).
    """
    e = log_cwf(t, lam, c, t_max)
    if e > _EXP_LIMIT:
        warnings.warn(
            f"weight exponent {e:.3g} exceeds double range; evaluate in "
            "log space (log_cwf) or as a ratio (ConvexParams.weight_profile)",
            RuntimeWarning, stacklevel=2)
        return math.inf
    return math.exp(e)


def cwf_field(grid: Grid, lam: float, c: float) -> Field:
    """The weight sampled on the grid; constant across x."""
    row = np.array([cwf(t, lam, c, grid.t_max) for t in grid.t_nodes()])
    return Field(grid, np.tile(row, (grid.nx, 1)))


def q_factor(lam: float, c: float, t_max: float) -> float:
    """Balancing factor 1 / (lam * (t_max + c)^(lam - 1)) for the density term."""
    return 1.0 / (lam * (t_max + c) ** (lam - 1.0))


def alpha_min(lam: float, c: float, a: float) -> float:
    """Theoretical floor 2*exp(-(a-1)*c^lam) for the regularization weight.

    The working numerics run far below this floor (alpha = 1e-5 at lam=2);
    callers may override, this only reports the bound.
    """
    if a <= 1:
        raise ValueError(f"balancing exponent a must exceed 1, got {a}")
    return 2.0 * math.exp(-(a - 1.0) * c**lam)


@dataclass(frozen=True)
class ConvexParams:
    """Parameters of the weighted convex functional.

    Derived quantities (q, balance, the Sobolev index diagnostic) are
    recomputed on access, never stored.  ``radius`` is the optional search
    ball diagnostic; it is monitored, not enforced.
    """

    lam: float
    c: float
    a: float
    d: float
    alpha: float
    gamma: float
    t_max: float
    radius: float | None = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.c < min_c(self.t_max) - 1e-12:
            raise ValueError(
                f"c={self.c} is below the admissible floor "
                f"{min_c(self.t_max):.6f} for t_max={self.t_max}")
        if self.a <= 1:
            raise ValueError(f"a must exceed 1, got {self.a}")
        if self.d <= 0:
            raise ValueError(f"d must be positive, got {self.d}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def q(self) -> float:
        return q_factor(self.lam, self.c, self.t_max)

    @property
    def balance(self) -> float:
        return math.exp(-2.0 * self.a * self.c**self.lam)

    @property
    def log_balance(self) -> float:
        return -2.0 * self.a * self.c**self.lam

    @property
    def sobolev_index(self) -> int:
        # Diagnostic only: the regularity index the 1-D theory asks for.
        return int(math.floor((1 + 1) / 2)) + 4

    @property
    def alpha_floor(self) -> float:
        return alpha_min(self.lam, self.c, self.a)

    def alpha_respects_floor(self) -> bool:
        return self.alpha >= self.alpha_floor

    def weight_profile(self, t_nodes: np.ndarray) -> np.ndarray:
        """balance * cwf(t)^2 over the given times, formed in log space.

        This is the only weight combination the objective needs; it stays
        finite whenever the functional itself is representable.
        """
        exponent = 2.0 * log_cwf(np.asarray(t_nodes, float), self.lam, self.c,
                                 self.t_max) + self.log_balance
        if np.any(exponent > _EXP_LIMIT):
            raise ValueError(
                f"combined weight exponent reaches {exponent.max():.3g}; the "
                f"functional is not representable at lam={self.lam}")
        return np.exp(exponent)

    def to_dict(self) -> dict:
        return {"lam": self.lam, "c": self.c, "a": self.a, "d": self.d,
                "alpha": self.alpha, "gamma": self.gamma, "t_max": self.t_max,
                "radius": self.radius}


@dataclass(frozen=True)
class EstimateCheckReport:
    """Outcome of a randomized weighted-inequality check.

    ``fitted_c`` is the best uniform constant over the sample set (None
    when no sample constrains it, i.e. the inequality held with room for
    any constant).  ``min_gap`` is the worst left-minus-right gap at the
    fitted constant, in peak-weight-rescaled units.
    """

    lambda_tested: float
    samples: int
    min_gap: float
    fitted_c: float | None
    passed: bool
    kind: str
    seed: int

    def to_dict(self) -> dict:
        return {"lambda": self.lambda_tested, "samples": self.samples,
                "min_gap": self.min_gap, "fitted_c": self.fitted_c,
                "pass": self.passed, "kind": self.kind, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def sample_neumann_field(grid: Grid, rng: np.random.Generator,
                         n_modes: int = 4, t_degree: int = 3,
                         amplitude: float = 1.0) -> np.ndarray:
    """Random smooth field with exact zero-slope spatial boundaries.

    A truncated cosine series in x (automatically Neumann on the grid)
    times polynomials in t, coefficients uniform in [-amplitude, amplitude].
    """
    xs = grid.x_nodes()
    ts = grid.t_nodes()
    length = grid.x_max - grid.x_min
    coeffs = rng.uniform(-amplitude, amplitude, size=(n_modes + 1, t_degree + 1))
    tpow = np.vstack([ts**p for p in range(t_degree + 1)])  # (deg+1, nt)
    vals = np.zeros((grid.nx, grid.nt))
    for k in range(n_modes + 1):
        mode = np.cos(k * math.pi * (xs - grid.x_min) / length)
        vals += np.outer(mode, coeffs[k] @ tpow)
    return vals


def _rescaled_weight_sq(grid: Grid, lam: float, c: float) -> np.ndarray:
    """cwf(t)^2 divided by its peak value at t=0; in (0, 1], never overflows."""
    logw = log_cwf(grid.t_nodes(), lam, c, grid.t_max)
    return np.exp(2.0 * (logw - logw[0]))


def _weighted_qt(grid: Grid, dens: np.ndarray, wsq: np.ndarray) -> float:
    return float(calculus.weights_x(grid) @ dens @ (calculus.weights_t(grid) * wsq))


def check_carleman_estimate(samples: int, lam: float, c: float, grid: Grid,
                            seed: int = 0, tol: float = 1e-9) -> EstimateCheckReport:
    """Randomized check of the weighted heat-operator energy inequality.

    For each random Neumann field u both sides of the estimate are formed
    with trapezoid quadrature (rescaled by the peak weight, which divides
    the inequality through and leaves constants unchanged):

        LHS  = int (u_t + u_xx)^2 w
        RHS  = C1 * [ sqrt(lam) int u_x^2 w + lam^2 c^lam int u^2 w
                      - boundary terms at t=t_max and t=0 ]

    The report carries the largest C1 for which LHS >= RHS across all
    samples and the residual gap at that constant.
    """
    if lam < 1:
        raise ValueError(f"checker expects lam >= 1, got {lam}")
    rng = np.random.default_rng(seed)
    dtm, dxm, dxxm = calculus.diff_matrices(grid)
    wx = calculus.weights_x(grid)
    wsq = _rescaled_weight_sq(grid, lam, c)
    t_max = grid.t_max
    # Boundary-term prefactors after rescaling by exp(2*(T+c)^lam).
    log_peak = log_cwf(0.0, lam, c, t_max)
    end_factor = math.exp(2.0 * (c**lam - log_peak))
    init_factor = lam * (t_max + c) ** lam

    lhs_list, s_list = [], []
    for _ in range(samples):
        u = sample_neumann_field(grid, rng)
        while np.abs(u).max() < 1e-12:
            u = sample_neumann_field(grid, rng)
        ut = u @ dtm.T
        ux = dxm @ u
        uxx = dxxm @ u
        lhs = _weighted_qt(grid, (ut + uxx) ** 2, wsq)
        s = math.sqrt(lam) * _weighted_qt(grid, ux**2, wsq)
        s += lam**2 * c**lam * _weighted_qt(grid, u**2, wsq)
        s -= end_factor * float(wx @ (ux[:, -1] ** 2 + u[:, -1] ** 2))
        s -= init_factor * float(wx @ (u[:, 0] ** 2))
        lhs_list.append(lhs)
        s_list.append(s)

    return _fit_lower_constant(lhs_list, s_list, lam, samples, seed, tol,
                               kind="carleman")


def check_quasi_carleman(samples: int, g: Field, lam: float, c: float,
                         grid: Grid, seed: int = 0,
                         tol: float = 1e-9) -> EstimateCheckReport:
    """Randomized check of the two-test-function (quasi) estimate.

    Random pairs (u, v); the left side couples them through the bounded
    multiplier g:

        LHS = int (u_t - u_xx + g * v_xx)^2 w

    The two positive right-hand terms carry explicit constants
    (lam*c^(lam-1) and lam^2 c^(2lam-2)/4); only the negative v-gradient
    and initial-data terms carry the fitted constant C2, here the smallest
    C2 >= 0 restoring the inequality across all samples.
    """
    if lam < 1:
        raise ValueError(f"checker expects lam >= 1, got {lam}")
    if g.grid != grid:
        raise ValueError("g must live on the checker grid")
    rng = np.random.default_rng(seed)
    dtm, dxm, dxxm = calculus.diff_matrices(grid)
    wx = calculus.weights_x(grid)
    wsq = _rescaled_weight_sq(grid, lam, c)
    t_max = grid.t_max
    init_factor = lam * (t_max + c) ** lam
    vgrad_factor = lam * (t_max + c) ** lam

    deficits = []
    records = []
    for _ in range(samples):
        u = sample_neumann_field(grid, rng)
        v = sample_neumann_field(grid, rng)
        while np.abs(u).max() < 1e-12 or np.abs(v).max() < 1e-12:
            u = sample_neumann_field(grid, rng)
            v = sample_neumann_field(grid, rng)
        ut = u @ dtm.T
        ux = dxm @ u
        uxx = dxxm @ u
        vx = dxm @ v
        vxx = dxxm @ v
        lhs = _weighted_qt(grid, (ut - uxx + g.values * vxx) ** 2, wsq)
        explicit = lam * c ** (lam - 1.0) * _weighted_qt(grid, ux**2, wsq)
        explicit += 0.25 * lam**2 * c ** (2.0 * lam - 2.0) * _weighted_qt(grid, u**2, wsq)
        d_term = vgrad_factor * _weighted_qt(grid, vx**2, wsq)
        d_term += init_factor * float(wx @ (u[:, 0] ** 2))
        records.append((lhs, explicit, d_term))
        if d_term > 0:
            deficits.append((explicit - lhs) / d_term)

    # Back off the tight constant by a hair so the reported gap is
    # nonnegative despite rounding (a larger rescue constant only helps).
    fitted = max(0.0, max(deficits)) * (1.0 + 1e-9) if deficits else 0.0
    gaps = [lhs - explicit + fitted * d for lhs, explicit, d in records]
    scale = max(1.0, max(abs(lhs) for lhs, _, _ in records))
    min_gap = min(gaps)
    passed = min_gap >= -tol * scale
    return EstimateCheckReport(lam, samples, float(min_gap), float(fitted),
                               passed, "quasi_carleman", seed)


def _fit_lower_constant(lhs_list, s_list, lam, samples, seed, tol, kind):
    ratios = [lhs / s for lhs, s in zip(lhs_list, s_list) if s > 0]
    scale = max(1.0, max(abs(v) for v in lhs_list))
    if ratios:
        # Back off the tight constant by a hair so the reported gap is
        # nonnegative despite rounding.
        fitted = min(ratios) * (1.0 - 1e-9)
        min_gap = min(lhs - fitted * s for lhs, s in zip(lhs_list, s_list))
        passed = fitted > 0 and min_gap >= -tol * scale
        return EstimateCheckReport(lam, samples, float(min_gap), float(fitted),
                                   passed, kind, seed)
    # No sample constrains the constant: the negative terms dominate and
    # the inequality holds with room for any C > 0.
    min_gap = min(lhs - s for lhs, s in zip(lhs_list, s_list))
    return EstimateCheckReport(lam, samples, float(min_gap), None,
                               min_gap >= -tol * scale, kind, seed)


def lambda_sweep(grid: Grid, c: float, lambdas, samples: int = 100,
                 seed: int = 0, quasi_g: Field | None = None) -> list[EstimateCheckReport]:
    """Run the estimate checker over a list of weight exponents."""
    reports = []
    for lam in lambdas:
        if quasi_g is None:
            reports.append(check_carleman_estimate(samples, lam, c, grid, seed))
        else:
            reports.append(check_quasi_carleman(samples, quasi_g, lam, c, grid, seed))
    return reports


def first_passing_lambda(reports: list[EstimateCheckReport],
                         require_positive: bool = False) -> float | None:
    """Smallest tested exponent whose report passed.

    With ``require_positive`` the fitted constant must be strictly
    positive; an unbounded fit (None) counts, since the inequality then
    holds with room for every positive constant.
    """
    for rep in reports:
        if rep.passed and (not require_positive or rep.fitted_c is None
                           or rep.fitted_c > 0):
            return rep.lambda_tested
    return None
