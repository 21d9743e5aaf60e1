"""Backward equations: least-squares Monte Carlo and the explicit linear route.

Conditional expectations ``E[. | F_{s_i}]`` are replaced by projections on a
polynomial basis in the standardised regression state at knot ``i``.  At the
initial knot the state is constant, so the projection is a plain mean.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .model import ProblemError, ProblemInstance
from .sde import BrownianEnsemble, StatePaths

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e10
PICARD_SWEEPS = 2
COMPARISON_TOL = -1e-8


class RegressionWarning(UserWarning):
    pass


class Projector:
    """Least-squares projection on polynomials of total degree ``<= degree``.

    Feature columns with (numerically) zero spread are dropped; with no
    columns left the projection is the sample mean.  If the Gram matrix has
    condition number above ``1e10`` the degree is lowered with a warning.

    ``fit`` optionally clips to a priori ``bounds`` on the conditional
    expectation.  A global polynomial can overshoot on sparse tail paths, but
    clipping breaks the mean preservation of least squares, so it is only
    safe where fitted values are not fed back into later targets.
    """

    def __init__(self, features: NDArray[np.float64], degree: int):
        feats = np.asarray(features, dtype=float)
        if feats.ndim == 1:
            feats = feats[:, None]
        self.n = feats.shape[0]
        cols = []
        for j in range(feats.shape[1]):
            c = feats[:, j]
            mu = c.mean()
            sd = c.std()
            if sd > 1e-12 * max(1.0, abs(mu)):
                cols.append((c - mu) / sd)
        self.degree = degree if cols else 0
        self._z = np.stack(cols) if cols else np.empty((0, self.n))
        while True:
            self._build()
            if self.degree == 0 or self.condition <= MAX_CONDITION:
                break
            warnings.warn(
                f"regression Gram condition {self.condition:.2e} > {MAX_CONDITION:g}; "
                f"reducing degree to {self.degree - 1}",
                RegressionWarning,
                stacklevel=3,
            )
            self.degree -= 1

    def _build(self):
        if self.degree == 0:
            self.basis = None
            self.condition = 1.0
            return
        d = self._z.shape[0]
        exps = [e for e in itertools.product(range(self.degree + 1), repeat=d)
                if 0 < sum(e) <= self.degree]
        exps.sort(key=lambda e: (sum(e), e))
        # rows are basis functions; row-major keeps the Gram product fast
        B = np.empty((len(exps) + 1, self.n))
        B[0] = 1.0
        # integer powers by repeated products; float pow is much slower
        powers = [[None, z] for z in self._z]
        for pw in powers:
            for _ in range(2, self.degree + 1):
                pw.append(pw[-1] * pw[1])
        for k, e in enumerate(exps, start=1):
            col = None
            for j, p in enumerate(e):
                if p:
                    col = powers[j][p] if col is None else col * powers[j][p]
            B[k] = col
        self.basis = B
        gram = B @ B.T / self.n
        self.condition = float(np.linalg.cond(gram))
        self._gram = gram

    def coef(self, y: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.linalg.solve(self._gram, self.basis @ y / self.n)

    def fit(self, y: NDArray[np.float64], bounds: tuple[float, float] | None = None
            ) -> NDArray[np.float64]:
        y = np.asarray(y, dtype=float)
        if y.ndim == 1 and np.all(y == y[0]):
            return np.full(self.n, y[0])
        if self.basis is None:
            return np.broadcast_to(y.mean(axis=0), y.shape).copy()
        if y.ndim > 1:
            return self.coef(y).T @ self.basis
        out = self.coef(y) @ self.basis
        return out if bounds is None else np.clip(out, *bounds)


class RegressionBasis:
    """Lazily built projectors, one per knot, for a fixed feature array.

    ``transform="log"`` regresses on ``log`` of the features.
    """

    def __init__(self, features: NDArray[np.float64], degree: int = 3,
                 transform: str | None = None):
        if not 1 <= degree <= 5:
            raise ValueError("basis degree must lie in [1, 5]")
        feats = np.asarray(features, dtype=float)
        if transform == "log":
            # power-law value maps of positive states are smooth in log x
            feats = np.log(feats)
        elif transform is not None:
            raise ValueError(f"unknown feature transform {transform!r}")
        self.features = feats
        self.transform = transform
        self.degree = degree
        self._cache: dict[int, Projector] = {}

    def __getitem__(self, i: int) -> Projector:
        p = self._cache.get(i)
        if p is None:
            p = Projector(self.features[i], self.degree)
            self._cache[i] = p
        return p

    @property
    def degrees_used(self) -> list[int]:
        return [self._cache[i].degree for i in sorted(self._cache)]


@dataclass
class BsdeSolution:
    """Pair solution on the grid.

    ``Y``/``Z`` hold the regressed values per knot and path (``None`` when
    only the initial knot was requested).  ``y0_samples`` are per-path
    unbiased targets for ``Y(t;t)``; ``cost_samples`` are pathwise values of
    ``sum f ds + terminal``, whose mean is the expectation form of ``Y(t;t)``.
    """

    Y0: float
    Z0: float
    Y: NDArray[np.float64] | None
    Z: NDArray[np.float64] | None
    y0_samples: NDArray[np.float64]
    z0_samples: NDArray[np.float64]
    cost_samples: NDArray[np.float64]
    method: str = "regression"
    degree: int = 3
    extras: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.y0_samples.shape[0]

    @property
    def Y0_std(self) -> float:
        """Cross-path standard deviation of the regressed ``Y(t;t)``."""
        return 0.0 if self.Y is None else float(self.Y[0].std())

    @property
    def Z0_variance(self) -> float:
        return 0.0 if self.Z is None else float(self.Z[0].var())

    @property
    def y0_se(self) -> float:
        # one-step regression targets understate the error of the sweep
        smp = self.y0_samples if self.method == "explicit" else self.cost_samples
        return float(smp.std(ddof=1) / np.sqrt(self.n_paths))

    @property
    def z0_se(self) -> float:
        return float(self.z0_samples.std(ddof=1) / np.sqrt(self.n_paths))


def backward_sweep(terminal, driver, basis: RegressionBasis, ensemble: BrownianEnsemble,
                   picard: int = PICARD_SWEEPS) -> BsdeSolution:
    """Generic regression sweep for ``-dY = driver(i, Y, Z) ds - Z dW``.

    ``Z_i`` comes from the centred estimator
    ``E[(Y_{i+1} - E[Y_{i+1}|F_i]) dW_i | F_i] / dt``; ``Y_i`` from ``picard``
    fixed-point passes on ``E[Y_{i+1} + driver(i, Y_i, Z_i) dt | F_i]``.
    """
    dW = ensemble.increments
    N, M = dW.shape
    dt = ensemble.grid.dt
    Y = np.empty((N + 1, M))
    Z = np.empty((N + 1, M))
    drv = np.empty((N, M))
    Y[N] = np.broadcast_to(np.asarray(terminal, dtype=float), (M,))
    y0_samples = z0_samples = None
    for i in range(N - 1, -1, -1):
        proj = basis[i]
        nxt = Y[i + 1]
        cond = proj.fit(nxt)
        resid = nxt - cond
        Z[i] = proj.fit(resid * dW[i]) / dt
        y = cond
        for _ in range(picard):
            target = nxt + _finite(driver(i, y, Z[i]), i) * dt
            y = proj.fit(target)
        Y[i] = y
        drv[i] = _finite(driver(i, Y[i], Z[i]), i)
        if i == 0:
            y0_samples = target
            z0_samples = resid * dW[0] / dt
    Z[N] = Z[N - 1]
    cost = Y[N] + drv.sum(axis=0) * dt
    return BsdeSolution(float(Y[0].mean()), float(Z[0].mean()), Y, Z,
                        y0_samples, z0_samples, cost, "regression", basis.degree)


def feature_transform(problem: ProblemInstance) -> str | None:
    """Log features for the positive log-Euler state, raw features otherwise."""
    return "log" if problem.scheme == "log_euler" else None


def _finite(v, i):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ProblemError(f"non-finite driver value at knot {i}")
    return v


def solve_bsde_regression(problem: ProblemInstance, states: StatePaths,
                          ensemble: BrownianEnsemble, basis_degree: int = 3,
                          features: NDArray[np.float64] | None = None,
                          basis: RegressionBasis | None = None,
                          terminal_shift: float = 0.0) -> BsdeSolution:
    """Recursive utility ``Y(.;t)`` along simulated states by regression.

    ``features`` defaults to the state paths; pass a stacked array of shape
    ``(N + 1, M, d)`` when the control is not a function of the state alone.
    """
    t = problem.grid.t_start
    bundle = problem.bundle
    X, U = states.X, states.control.values
    knots = problem.grid.knots
    if basis is None:
        basis = RegressionBasis(X if features is None else features, basis_degree,
                                feature_transform(problem))

    def driver(i, y, z):
        return bundle.f(knots[i], X[i], U[i], y, z, t)

    terminal = bundle.h(X[-1], t) + terminal_shift
    return backward_sweep(terminal, driver, basis, ensemble)


def _as_knot_array(v, n_knots: int, M: int, name: str) -> NDArray[np.float64]:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return np.full((n_knots, 1), float(a))
    if a.ndim == 1:
        if a.shape[0] != n_knots:
            raise ProblemError(f"{name} must have one value per knot")
        return a[:, None]
    if a.shape != (n_knots, M):
        raise ProblemError(f"{name} has shape {a.shape}, expected ({n_knots}, {M})")
    return a


def is_path_deterministic(a: NDArray[np.float64], rtol: float = 1e-13) -> bool:
    """True when every knot carries the same value on all paths."""
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[1] == 1:
        return True
    spread = a.max(axis=1) - a.min(axis=1)
    scale = np.maximum(1.0, np.abs(a).max(axis=1))
    return bool(np.all(spread <= rtol * scale))


@dataclass
class LinearBsdeSpec:
    """``-dXi = (alpha + beta Xi + gamma Theta) ds - Theta dW``, ``Xi(T) = xi``.

    ``alpha`` may be a scalar, a per-knot vector or a ``(N + 1, M)`` array;
    ``beta`` and ``gamma`` likewise but must be identical across paths for the
    explicit solver.  ``state`` is the regression state (default
    ``W - W(t)``).

    ``alpha_right`` optionally holds, for each step ``[s_i, s_{i+1})``, the
    source term at the step's right end evaluated with the step's own control,
    shape ``(N, M)``.  When given, the explicit solver integrates ``alpha``
    with the trapezoid rule instead of the left-point rule; the regression
    sweep always uses the left point.
    """

    alpha: object = 0.0
    beta: object = 0.0
    gamma: object = 0.0
    xi: object = 0.0
    state: NDArray[np.float64] | None = None
    alpha_right: NDArray[np.float64] | None = None

    def arrays(self, ensemble: BrownianEnsemble):
        N, M = ensemble.increments.shape
        alpha = _as_knot_array(self.alpha, N + 1, M, "alpha")
        beta = _as_knot_array(self.beta, N + 1, M, "beta")
        gamma = _as_knot_array(self.gamma, N + 1, M, "gamma")
        xi = np.broadcast_to(np.asarray(self.xi, dtype=float), (M,))
        for name, a in (("beta", beta), ("gamma", gamma), ("alpha", alpha), ("xi", xi)):
            if not np.all(np.isfinite(a)):
                raise ProblemError(f"{name} is not finite on the ensemble")
        return alpha, beta, gamma, xi

    def regression_state(self, ensemble: BrownianEnsemble) -> NDArray[np.float64]:
        return ensemble.brownian() if self.state is None else np.asarray(self.state)


def discount_ratios(beta, gamma, ensemble: BrownianEnsemble) -> NDArray[np.float64]:
    """``eta(s_{i+1}) / eta(s_i)`` with left-point quadrature, shape ``(N, M)``."""
    dt = ensemble.grid.dt
    dW = ensemble.increments
    b = beta[:-1]
    g = gamma[:-1]
    return np.exp((b - 0.5 * g * g) * dt + g * dW)


def pathwise_linear_values(alpha, beta, gamma, xi, ensemble, alpha_right=None, ratio=None):
    """``R_i = eta_T/eta_i xi + sum_{j>=i} eta_j/eta_i alpha_j dt`` per path.

    With ``alpha_right`` each step contributes
    ``(alpha_j + eta_{j+1}/eta_j alpha_right_j) dt / 2`` instead.
    """
    N, M = ensemble.increments.shape
    dt = ensemble.grid.dt
    if ratio is None:
        ratio = discount_ratios(beta, gamma, ensemble)
    R = np.empty((N + 1, M))
    R[N] = xi
    if alpha_right is not None:
        alpha_right = np.asarray(alpha_right, dtype=float)
        if alpha_right.shape != (N, M):
            raise ProblemError(f"alpha_right must have shape {(N, M)}")
        if not np.all(np.isfinite(alpha_right)):
            raise ProblemError("alpha_right is not finite on the ensemble")
    for i in range(N - 1, -1, -1):
        if alpha_right is None:
            R[i] = alpha[i] * dt + ratio[i] * R[i + 1]
        else:
            R[i] = 0.5 * (alpha[i] + ratio[i] * alpha_right[i]) * dt + ratio[i] * R[i + 1]
    return R


def solve_linear_bsde_explicit(spec: LinearBsdeSpec, ensemble: BrownianEnsemble,
                               basis_degree: int = 3, basis: RegressionBasis | None = None,
                               knots: str = "all", control_variate: bool = True
                               ) -> BsdeSolution:
    """Explicit representation through the positive weight ``eta``.

    ``Xi(s) = E[eta(T)/eta(s) xi + int_s^T eta(r)/eta(s) alpha dr | F_s]`` is
    computed pathwise and projected on the regression state (a plain mean at
    the initial knot).  ``Theta`` comes from centred martingale-increment
    regression.  ``knots="initial"`` stops after the first two knots.  With
    ``control_variate`` a second pass subtracts the martingale built from the
    first-pass ``(Xi, Theta)``, which shrinks the regression noise.
    """
    alpha, beta, gamma, xi = spec.arrays(ensemble)
    if not (is_path_deterministic(beta) and is_path_deterministic(gamma)):
        raise ProblemError("explicit linear solver needs deterministic beta and gamma")
    N, M = ensemble.increments.shape
    dt = ensemble.grid.dt
    dW = ensemble.increments
    ratio = discount_ratios(beta, gamma, ensemble)
    R = pathwise_linear_values(alpha, beta, gamma, xi, ensemble, spec.alpha_right, ratio)
    if basis is None:
        basis = RegressionBasis(spec.regression_state(ensemble), basis_degree)

    if knots == "initial":
        xi1 = basis[1].fit(R[1]) if N > 1 else R[1]
        resid = xi1 - basis[0].fit(xi1)
        z0_samples = resid * dW[0] / dt
        return BsdeSolution(float(R[0].mean()), float(z0_samples.mean()), None, None,
                            R[0], z0_samples, R[0], "explicit", basis.degree)

    # E[R_i | F_i] lies in the range of R_i even when the corrected targets
    # R - C do not; the fits never re-enter the targets, so clipping is unbiased
    # for Y0
    bounds = [(R[i].min(), R[i].max()) for i in range(N + 1)]

    def fit_pass(target):
        Y = np.empty((N + 1, M))
        Z = np.empty((N + 1, M))
        Y[N] = target[N]
        for i in range(N - 1, -1, -1):
            Y[i] = basis[i].fit(target[i], bounds[i])
        for i in range(N):
            resid = Y[i + 1] - basis[i].fit(Y[i + 1])
            Z[i] = basis[i].fit(resid * dW[i]) / dt
            if i == 0:
                z0 = resid * dW[0] / dt
        Z[N] = Z[N - 1]
        return Y, Z, z0

    Y, Z, z0_samples = fit_pass(R)
    y0_samples = R[0]
    if control_variate:
        # sum_j eta_j/eta_i (Theta_j + gamma_j Xi_j) dW_j has zero conditional
        # mean, so subtracting it keeps the targets unbiased
        C = np.zeros((N + 1, M))
        for i in range(N - 1, -1, -1):
            C[i] = (Z[i] + gamma[i] * Y[i]) * dW[i] + ratio[i] * C[i + 1]
        Y, Z, z0_samples = fit_pass(R - C)
        y0_samples = R[0] - C[0]
    return BsdeSolution(float(Y[0].mean()), float(Z[0].mean()), Y, Z,
                        y0_samples, z0_samples, R[0], "explicit", basis.degree)


def solve_linear_bsde_regression(spec: LinearBsdeSpec, ensemble: BrownianEnsemble,
                                 basis_degree: int = 3,
                                 basis: RegressionBasis | None = None) -> BsdeSolution:
    """Same linear equation through the generic regression sweep.

    Works for path-dependent ``beta``/``gamma``.
    """
    alpha, beta, gamma, xi = spec.arrays(ensemble)
    if basis is None:
        basis = RegressionBasis(spec.regression_state(ensemble), basis_degree)

    def driver(i, y, z):
        return alpha[i] + beta[i] * y + gamma[i] * z

    return backward_sweep(xi, driver, basis, ensemble)


@dataclass
class CostEvaluation:
    J: float
    expectation_form: float
    se: float
    solution: BsdeSolution

    @property
    def relative_gap(self) -> float:
        return abs(self.J - self.expectation_form) / max(abs(self.J), 1e-300)


def evaluate_cost_functional(problem: ProblemInstance, control, ensemble: BrownianEnsemble,
                             basis_degree: int = 3) -> CostEvaluation:
    """``J(u; t, x) = Y(t;t)`` plus the expectation form as a cross-check."""
    from .sde import solve_state_forward

    states = control if isinstance(control, StatePaths) else \
        solve_state_forward(problem, control, ensemble)
    sol = solve_bsde_regression(problem, states, ensemble, basis_degree)
    return CostEvaluation(sol.Y0, float(sol.cost_samples.mean()), sol.y0_se, sol)


@dataclass
class ComparisonVerdict:
    status: str
    min_value: float
    violations: list[tuple[int, int]]
    tolerance: float = COMPARISON_TOL

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def comparison_check(spec: LinearBsdeSpec, ensemble: BrownianEnsemble,
                     basis_degree: int = 3, max_report: int = 20) -> ComparisonVerdict:
    """Nonnegative data must give a nonnegative solution.

    Returns ``"precondition unmet"`` without asserting anything when ``xi`` or
    ``alpha`` takes a negative value.
    """
    alpha, _, _, xi = spec.arrays(ensemble)
    if alpha.min() < 0 or xi.min() < 0:
        return ComparisonVerdict("precondition unmet", float("nan"), [])
    sol = solve_linear_bsde_explicit(spec, ensemble, basis_degree)
    mn = float(sol.Y.min())
    bad = np.argwhere(sol.Y < COMPARISON_TOL)
    viol = [(int(i), int(j)) for i, j in bad[:max_report]]
    return ComparisonVerdict("pass" if not len(bad) else "fail", mn, viol)


@dataclass
class StabilityTable:
    rows: list[dict]
    C_y: float
    C_z: float
    slope_y: float
    monotone: bool


def _loglog_slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def stability_check(problem: ProblemInstance, states: StatePaths, ensemble: BrownianEnsemble,
                    perturbation_sizes, basis_degree: int = 3) -> StabilityTable:
    """Shift the terminal map by ``delta`` and measure the response.

    Reports ``sup |Y_delta - Y|`` and the L2 norm of ``Z_delta - Z``; the
    fitted constant is the smallest ``C`` with ``diff <= C delta`` on the
    ladder.
    """
    basis = RegressionBasis(states.X, basis_degree, feature_transform(problem))
    base = solve_bsde_regression(problem, states, ensemble, basis=basis)
    dt = problem.grid.dt
    rows = []
    for d in sorted((float(v) for v in perturbation_sizes), reverse=True):
        sol = solve_bsde_regression(problem, states, ensemble, basis=basis, terminal_shift=d)
        dy = float(np.abs(sol.Y - base.Y).max())
        dz = float(np.sqrt(np.mean(np.sum((sol.Z[:-1] - base.Z[:-1]) ** 2, axis=0) * dt)))
        rows.append({"delta": d, "sup_dY": dy, "l2_dZ": dz})
    pos = [r for r in rows if r["delta"] > 0]
    C_y = max((r["sup_dY"] / r["delta"] for r in pos), default=0.0)
    C_z = max((r["l2_dZ"] / r["delta"] for r in pos), default=0.0)
    slope = _loglog_slope([r["delta"] for r in rows], [r["sup_dY"] for r in rows])
    tol = 1e-12
    mono = all(rows[k + 1]["sup_dY"] <= rows[k]["sup_dY"] + tol
               and rows[k + 1]["l2_dZ"] <= rows[k]["l2_dZ"] + tol
               for k in range(len(rows) - 1))
    return StabilityTable(rows, C_y, C_z, slope, mono)
