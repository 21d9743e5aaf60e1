"""Candidate tuples, the numeraire process and the two adjoint equations.

The adjoints are linear backward equations along a frozen candidate
``(X, u, Y, Z)``.  When their coefficients are identical across paths at every
knot they are solved through the explicit positive-weight representation,
otherwise through the regression sweep.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .bsde import (
    BsdeSolution,
    LinearBsdeSpec,
    RegressionBasis,
    feature_transform,
    is_path_deterministic,
    solve_linear_bsde_explicit,
    solve_linear_bsde_regression,
)
from .model import ControlPath, FeedbackPolicy, ProblemError, ProblemInstance
from .sde import BrownianEnsemble, StatePaths, solve_state_forward

logger = logging.getLogger(__name__)

AFFINE_RTOL = 1e-9


@dataclass
class CandidateTuple:
    """Forward state, control and recursive utility along one ensemble."""

    problem: ProblemInstance
    ensemble: BrownianEnsemble
    states: StatePaths
    utility: BsdeSolution
    basis: RegressionBasis
    policy: FeedbackPolicy | None = None
    quadrature: str = "trapezoid"

    @property
    def t(self) -> float:
        return self.problem.grid.t_start

    @property
    def X(self) -> NDArray[np.float64]:
        return self.states.X

    @property
    def U(self) -> NDArray[np.float64]:
        return self.states.control.values

    @property
    def Y(self) -> NDArray[np.float64]:
        return self.utility.Y

    @property
    def Z(self) -> NDArray[np.float64]:
        return self.utility.Z


@dataclass
class AffineDriver:
    """``f = alpha + beta y + gamma z`` along a path ensemble.

    ``alpha_right[i]`` is ``f(s_{i+1}, X_{i+1}, u_i, 0, 0)``, the source at the
    right end of step ``i`` under that step's control.
    """

    alpha: NDArray[np.float64]
    alpha_right: NDArray[np.float64]
    beta: NDArray[np.float64]
    gamma: NDArray[np.float64]


def affine_driver_coefficients(problem: ProblemInstance, X, U) -> AffineDriver | None:
    """Decompose ``f`` as affine in ``(y, z)`` with path-independent slopes
    along ``(X, U)``; ``None`` when that fails."""
    f = problem.bundle.f
    t = problem.grid.t_start
    knots = problem.grid.knots
    n = len(knots)
    alpha = np.empty(X.shape)
    beta = np.empty(n)
    gamma = np.empty(n)
    zero = np.zeros(X.shape[1])
    one = np.ones(X.shape[1])
    for i, s in enumerate(knots):
        a = f(s, X[i], U[i], zero, zero, t)
        b = f(s, X[i], U[i], one, zero, t) - a
        g = f(s, X[i], U[i], zero, one, t) - a
        if not (is_path_deterministic(b[None, :]) and is_path_deterministic(g[None, :])):
            return None
        probe = f(s, X[i], U[i], -0.7 * one, 1.3 * one, t)
        pred = a - 0.7 * b + 1.3 * g
        if np.any(np.abs(probe - pred) > AFFINE_RTOL * np.maximum(1.0, np.abs(probe))):
            return None
        alpha[i] = a
        beta[i] = b[0]
        gamma[i] = g[0]
    right = np.empty((n - 1, X.shape[1]))
    for i in range(n - 1):
        right[i] = f(knots[i + 1], X[i + 1], U[i], zero, zero, t)
    return AffineDriver(alpha, right, beta, gamma)


def solve_candidate(problem: ProblemInstance, control: FeedbackPolicy | ControlPath,
                    ensemble: BrownianEnsemble, basis_degree: int = 3,
                    method: str = "auto", quadrature: str = "trapezoid") -> CandidateTuple:
    """Simulate the state under ``control`` and solve the utility equation.

    ``method="auto"`` uses the explicit linear route when the driver is
    affine in ``(y, z)`` with deterministic slopes, else regression.  The
    explicit route integrates the running cost with ``quadrature``
    (``"trapezoid"`` or ``"left"``).
    """
    _check_quadrature(quadrature)
    states = solve_state_forward(problem, control, ensemble)
    basis = RegressionBasis(states.X, basis_degree, feature_transform(problem))
    sol = None
    if method in ("auto", "explicit"):
        coeffs = affine_driver_coefficients(problem, states.X, states.control.values)
        if coeffs is not None:
            xi = problem.bundle.h(states.X[-1], problem.grid.t_start)
            right = coeffs.alpha_right if quadrature == "trapezoid" else None
            spec = LinearBsdeSpec(coeffs.alpha, coeffs.beta, coeffs.gamma, xi, alpha_right=right)
            sol = solve_linear_bsde_explicit(spec, ensemble, basis=basis)
        elif method == "explicit":
            raise ProblemError("driver is not affine with deterministic slopes")
    if sol is None:
        from .bsde import solve_bsde_regression
        sol = solve_bsde_regression(problem, states, ensemble, basis=basis)
    policy = None if isinstance(control, ControlPath) else control
    return CandidateTuple(problem, ensemble, states, sol, basis, policy, quadrature)


def _check_quadrature(quadrature: str) -> None:
    if quadrature not in ("trapezoid", "left"):
        raise ValueError(f"unknown quadrature {quadrature!r}")


@dataclass
class DriverCoefficients:
    """Coefficient values entering the adjoint drivers (scalars or arrays)."""

    b_x: object = 0.0
    b_xx: object = 0.0
    sigma_x: object = 0.0
    sigma_xx: object = 0.0
    f_x: object = 0.0
    f_y: object = 0.0
    f_z: object = 0.0
    f_hess: object = None


def eval_driver_g(p, q, c: DriverCoefficients):
    """``[b_x + f_z sigma_x + f_y] p + [sigma_x + f_z] q + f_x``."""
    return (c.b_x + c.f_z * c.sigma_x + c.f_y) * p + (c.sigma_x + c.f_z) * q + c.f_x


def hessian_form(hess, p, q, sigma_x):
    """``v D2f v^T`` with ``v = (1, p, sigma_x p + q)``."""
    if hess is None:
        return np.zeros(np.broadcast(p, q, sigma_x).shape)
    hess = np.asarray(hess, dtype=float)
    v = (1.0, p, sigma_x * p + q)
    out = 0.0
    for a in range(3):
        for b in range(a, 3):
            w = 1.0 if a == b else 2.0
            out = out + w * hess[..., a, b] * v[a] * v[b]
    return out + np.zeros(np.broadcast(p, q, sigma_x).shape)


def eval_driver_G(P, Q, p, q, c: DriverCoefficients):
    """Second-order driver.

    ``[2 b_x + sigma_x^2 + 2 f_z sigma_x + f_y] P + [2 sigma_x + f_z] Q
    + b_xx p + sigma_xx (f_z p + q) + v D2f v^T``.
    """
    lin = (2 * c.b_x + c.sigma_x**2 + 2 * c.f_z * c.sigma_x + c.f_y) * P \
        + (2 * c.sigma_x + c.f_z) * Q
    return lin + c.b_xx * p + c.sigma_xx * (c.f_z * p + q) + hessian_form(c.f_hess, p, q, c.sigma_x)


def coefficients_at(tup: CandidateTuple, s: float, x, u, y, z,
                    second: bool = False) -> DriverCoefficients:
    """Coefficients at an arbitrary point ``(s, x, u, y, z)``."""
    b = tup.problem.bundle
    t = tup.t
    c = DriverCoefficients(
        b_x=b.b_x(s, x, u), sigma_x=b.sigma_x(s, x, u),
        f_x=b.f_x(s, x, u, y, z, t), f_y=b.f_y(s, x, u, y, z, t), f_z=b.f_z(s, x, u, y, z, t),
    )
    if second:
        c.b_xx = b.b_xx(s, x, u)
        c.sigma_xx = b.sigma_xx(s, x, u)
        c.f_hess = b.f_hess(s, x, u, y, z, t)
    return c


def path_coefficients(tup: CandidateTuple, i: int, second: bool = False) -> DriverCoefficients:
    """Coefficients at knot ``i`` along the candidate."""
    s = tup.problem.grid.knots[i]
    return coefficients_at(tup, s, tup.X[i], tup.U[i], tup.Y[i], tup.Z[i], second)


def right_coefficients(tup: CandidateTuple, i: int, second: bool = False) -> DriverCoefficients:
    """Coefficients at the right end of step ``i`` under the step's control."""
    s = tup.problem.grid.knots[i + 1]
    return coefficients_at(tup, s, tup.X[i + 1], tup.U[i], tup.Y[i + 1], tup.Z[i + 1], second)


@dataclass
class KappaPath:
    values: NDArray[np.float64]

    @property
    def min(self) -> float:
        return float(self.values.min())


def compute_kappa(tup: CandidateTuple) -> KappaPath:
    """``kappa(s;t) = exp(int (f_y - f_z^2/2) dr + int f_z dW)``, left-point."""
    dt = tup.problem.grid.dt
    dW = tup.ensemble.increments
    N, M = dW.shape
    logk = np.zeros((N + 1, M))
    for i in range(N):
        c = path_coefficients(tup, i)
        fy = np.broadcast_to(c.f_y, (M,))
        fz = np.broadcast_to(c.f_z, (M,))
        if not (np.all(np.isfinite(fy)) and np.all(np.isfinite(fz))):
            raise ProblemError(f"non-finite f_y or f_z at knot {i}")
        logk[i + 1] = logk[i] + (fy - 0.5 * fz * fz) * dt + fz * dW[i]
    return KappaPath(np.exp(logk))


@dataclass
class AdjointBundle:
    p: NDArray[np.float64]
    q: NDArray[np.float64]
    P: NDArray[np.float64]
    Q: NDArray[np.float64]
    first: BsdeSolution
    second: BsdeSolution
    method_first: str
    method_second: str
    extras: dict = field(default_factory=dict)

    @property
    def p0(self) -> float:
        return self.first.Y0

    @property
    def q0(self) -> float:
        return self.first.Z0

    @property
    def P0(self) -> float:
        return self.second.Y0

    @property
    def Q0(self) -> float:
        return self.second.Z0

    @property
    def p0_std(self) -> float:
        return float(self.p[0].std())

    @property
    def P0_std(self) -> float:
        return float(self.P[0].std())

    @property
    def q0_variance(self) -> float:
        return float(self.q[0].var())

    @property
    def Q0_variance(self) -> float:
        return float(self.Q[0].var())


def _solve_linear(spec: LinearBsdeSpec, tup: CandidateTuple, method: str):
    if method not in ("auto", "explicit", "regression"):
        raise ValueError(f"unknown adjoint method {method!r}")
    det = is_path_deterministic(spec.beta) and is_path_deterministic(spec.gamma)
    if method == "explicit" or (method == "auto" and det):
        return solve_linear_bsde_explicit(spec, tup.ensemble, basis=tup.basis), "explicit"
    return solve_linear_bsde_regression(spec, tup.ensemble, basis=tup.basis), "regression"


def _stack_coefficients(tup: CandidateTuple, second: bool):
    N = tup.problem.grid.n_steps
    M = tup.ensemble.n_paths
    names = ("b_x", "sigma_x", "f_x", "f_y", "f_z")
    out = {k: np.empty((N + 1, M)) for k in names}
    for i in range(N + 1):
        c = path_coefficients(tup, i)
        for k in names:
            out[k][i] = getattr(c, k)
    return out


def solve_first_adjoint(tup: CandidateTuple, method: str = "auto") -> tuple[BsdeSolution, str]:
    """``-dp = g ds - q dW``, ``p(T) = h_x(X(T);t)``."""
    c = _stack_coefficients(tup, False)
    beta = c["b_x"] + c["f_z"] * c["sigma_x"] + c["f_y"]
    gamma = c["sigma_x"] + c["f_z"]
    xi = tup.problem.bundle.h_x(tup.X[-1], tup.t)
    right = None
    if tup.quadrature == "trapezoid":
        N = tup.problem.grid.n_steps
        right = np.empty((N, tup.ensemble.n_paths))
        for i in range(N):
            right[i] = right_coefficients(tup, i).f_x
    spec = LinearBsdeSpec(alpha=c["f_x"], beta=beta, gamma=gamma, xi=xi, state=tup.X,
                          alpha_right=right)
    return _solve_linear(spec, tup, method)


def solve_second_adjoint(tup: CandidateTuple, first: BsdeSolution,
                         method: str = "auto") -> tuple[BsdeSolution, str]:
    """``-dP = G ds - Q dW``, ``P(T) = h_xx(X(T);t)``."""
    N = tup.problem.grid.n_steps
    M = tup.ensemble.n_paths
    beta = np.empty((N + 1, M))
    gamma = np.empty((N + 1, M))
    alpha = np.empty((N + 1, M))
    p, q = first.Y, first.Z
    for i in range(N + 1):
        c = path_coefficients(tup, i, second=True)
        beta[i] = 2 * c.b_x + c.sigma_x**2 + 2 * c.f_z * c.sigma_x + c.f_y
        gamma[i] = 2 * c.sigma_x + c.f_z
        alpha[i] = eval_driver_G(0.0, 0.0, p[i], q[i], c)
    xi = tup.problem.bundle.h_xx(tup.X[-1], tup.t)
    right = None
    if tup.quadrature == "trapezoid":
        right = np.empty((N, M))
        for i in range(N):
            right[i] = eval_driver_G(0.0, 0.0, p[i + 1], q[i + 1], right_coefficients(tup, i, True))
    spec = LinearBsdeSpec(alpha=alpha, beta=beta, gamma=gamma, xi=xi, state=tup.X,
                          alpha_right=right)
    return _solve_linear(spec, tup, method)


def solve_adjoints(tup: CandidateTuple, method: str = "auto") -> AdjointBundle:
    first, m1 = solve_first_adjoint(tup, method)
    second, m2 = solve_second_adjoint(tup, first, method)
    return AdjointBundle(first.Y, first.Z, second.Y, second.Z, first, second, m1, m2)


def inhomogeneity_G0(tup: CandidateTuple, adj: AdjointBundle) -> NDArray[np.float64]:
    """``G(.,0,0;t)`` along the candidate, shape ``(N + 1, M)``."""
    out = np.empty_like(adj.p)
    for i in range(out.shape[0]):
        c = path_coefficients(tup, i, second=True)
        out[i] = eval_driver_G(0.0, 0.0, adj.p[i], adj.q[i], c)
    return out


__all__ = [
    "AdjointBundle", "AffineDriver", "CandidateTuple", "DriverCoefficients", "KappaPath",
    "affine_driver_coefficients", "coefficients_at", "compute_kappa", "eval_driver_G",
    "eval_driver_g", "hessian_form", "inhomogeneity_G0", "path_coefficients",
    "right_coefficients", "solve_adjoints", "solve_candidate", "solve_first_adjoint",
    "solve_second_adjoint",
]
