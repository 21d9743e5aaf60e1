"""Investment-consumption problem with recursive CRRA utility.

Wealth follows ``dX = X (r + mu zeta - c) ds + X sigma zeta dW`` with control
``(zeta, c)`` in ``[-1, 1] x [0, 1]``.  The driver is
``f = h(s;t) [-ups(c x) - beta y - gamma z]`` and the terminal map
``-hhat(T;t) ups_hat(x)``, with ``ups(x) = x**lam / lam``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import cumulative_trapezoid

from .model import (
    CoefficientBundle,
    ControlDomain,
    FeedbackPolicy,
    ProblemError,
    ProblemInstance,
    StateDomain,
    TimeGrid,
    build_problem,
)

logger = logging.getLogger(__name__)

MERTON_CONTROL_DOMAIN = ControlDomain((-1.0, 0.0), (1.0, 1.0))


@dataclass(frozen=True)
class MarketParams:
    r: float
    rho: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ProblemError("volatility must be positive")
        if not (self.rho > self.r > 0):
            raise ProblemError("market needs rho > r > 0")

    @property
    def mu(self) -> float:
        return self.rho - self.r


@dataclass(frozen=True)
class CrraUtility:
    lam: float

    def __post_init__(self):
        if not 0 < self.lam < 1:
            raise ProblemError("CRRA exponent must lie in ]0, 1[")

    def __call__(self, x):
        return np.power(x, self.lam) / self.lam

    def prime(self, x):
        return np.power(x, self.lam - 1.0)

    def second(self, x):
        return (self.lam - 1.0) * np.power(x, self.lam - 2.0)


def hyperbolic_discount(K: float, tau):
    """``1 / (1 + K tau)``."""
    if K <= 0:
        raise ProblemError("hyperbolic discount needs K > 0")
    return 1.0 / (1.0 + K * np.asarray(tau, dtype=float))


@dataclass(frozen=True)
class DiscountSpec:
    """Discount factor as a function of elapsed time ``tau = s - t``.

    ``kind`` is ``"exponential"`` (``rate``), ``"hyperbolic"`` (``K``) or
    ``"table"`` (``taus``/``values`` interpolated linearly, flat beyond the
    last node).
    """

    kind: str = "exponential"
    rate: float = 0.1
    K: float = 1.0
    taus: tuple[float, ...] = ()
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("exponential", "hyperbolic", "table"):
            raise ProblemError(f"unknown discount kind {self.kind!r}")
        if self.kind == "hyperbolic" and self.K <= 0:
            raise ProblemError("hyperbolic discount needs K > 0")
        if self.kind == "table":
            taus = np.asarray(self.taus, dtype=float)
            vals = np.asarray(self.values, dtype=float)
            if taus.size < 2 or taus.shape != vals.shape or np.any(np.diff(taus) <= 0):
                raise ProblemError("discount table needs >= 2 increasing nodes")
            if taus[0] != 0 or vals[0] != 1:
                raise ProblemError("discount table must start at (0, 1)")
            if np.any(vals <= 0):
                raise ProblemError("discount values must be positive")

    def factor(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.kind == "exponential":
            return np.exp(-self.rate * tau)
        if self.kind == "hyperbolic":
            return hyperbolic_discount(self.K, tau)
        return np.interp(tau, self.taus, self.values)

    def __call__(self, s, t):
        return self.factor(np.asarray(s, dtype=float) - t)

    def rate_at(self, tau):
        """Instantaneous rate ``-D'(tau) / D(tau)``."""
        tau = np.asarray(tau, dtype=float)
        if self.kind == "exponential":
            return np.full_like(tau, self.rate)
        if self.kind == "hyperbolic":
            return self.K / (1.0 + self.K * tau)
        h = 1e-6
        return -(np.log(self.factor(tau + h)) - np.log(self.factor(np.maximum(tau - h, 0.0)))) \
            / (tau + h - np.maximum(tau - h, 0.0))

    def check_integrable(self, horizon: float) -> float:
        grid = np.linspace(0.0, horizon, 2001)
        v = self.factor(grid)
        total = float(np.trapezoid(v, grid))
        if not np.isfinite(total) or np.any(v <= 0):
            raise ProblemError("discount factor must be positive and integrable")
        return total


def _as_time_function(v) -> Callable:
    if callable(v):
        return v
    c = float(v)
    return lambda s, t: c


@dataclass(frozen=True)
class AversionProcesses:
    """Deterministic nonnegative ``beta(s;t)`` and ``gamma(s;t)``."""

    beta: object = 0.0
    gamma: object = 0.0

    def __post_init__(self):
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if not callable(v) and (not np.isfinite(v) or v < 0):
                raise ProblemError(f"{name} must be finite and nonnegative")

    def beta_fn(self):
        return _as_time_function(self.beta)

    def gamma_fn(self):
        return _as_time_function(self.gamma)

    def check(self, grid: TimeGrid, t: float):
        for name, fn in (("beta", self.beta_fn()), ("gamma", self.gamma_fn())):
            vals = np.array([fn(s, t) for s in grid.knots], dtype=float)
            if not np.all(np.isfinite(vals)) or vals.min() < 0:
                raise ProblemError(f"{name} must be bounded and nonnegative on the grid")

    @property
    def is_zero(self) -> bool:
        return (not callable(self.beta) and self.beta == 0
                and not callable(self.gamma) and self.gamma == 0)


@dataclass(frozen=True)
class MertonSetup:
    """Everything needed to rebuild the problem from another ``(t, x)``."""

    market: MarketParams
    utility: CrraUtility
    discount: DiscountSpec
    aversion: AversionProcesses = AversionProcesses()
    terminal_utility: CrraUtility | None = None
    terminal_discount: DiscountSpec | None = None

    @property
    def ups_hat(self) -> CrraUtility:
        return self.terminal_utility or self.utility

    @property
    def disc_hat(self) -> DiscountSpec:
        return self.terminal_discount or self.discount


def merton_bundle(setup: MertonSetup, T: float) -> CoefficientBundle:
    m = setup.market
    r, mu, vol = m.r, m.mu, m.sigma
    ups, ups_hat = setup.utility, setup.ups_hat
    lam = ups.lam
    disc, disc_hat = setup.discount, setup.disc_hat
    beta, gamma = setup.aversion.beta_fn(), setup.aversion.gamma_fn()

    def zeta(u):
        return u[..., 0]

    def cons(u):
        return u[..., 1]

    def b(s, x, u):
        return x * (r + mu * zeta(u) - cons(u))

    def sigma(s, x, u):
        return x * vol * zeta(u)

    def f(s, x, u, y, z, t):
        return disc(s, t) * (-ups(cons(u) * x) - beta(s, t) * y - gamma(s, t) * z)

    def h(x, t):
        return -disc_hat(T, t) * ups_hat(x)

    def b_x(s, x, u):
        return np.broadcast_to(r + mu * zeta(u) - cons(u), np.shape(x)) * 1.0

    def sigma_x(s, x, u):
        return np.broadcast_to(vol * zeta(u), np.shape(x)) * 1.0

    def zeros(s, x, u):
        return np.zeros(np.shape(x))

    def f_x(s, x, u, y, z, t):
        # written as c^lam x^(lam-1) so that it vanishes at c = 0
        return -disc(s, t) * np.power(cons(u), lam) * np.power(x, lam - 1.0)

    def f_y(s, x, u, y, z, t):
        return np.broadcast_to(-disc(s, t) * beta(s, t), np.shape(x)) * 1.0

    def f_z(s, x, u, y, z, t):
        return np.broadcast_to(-disc(s, t) * gamma(s, t), np.shape(x)) * 1.0

    def f_hess(s, x, u, y, z, t):
        out = np.zeros(np.shape(x) + (3, 3))
        out[..., 0, 0] = disc(s, t) * (1.0 - lam) * np.power(cons(u), lam) \
            * np.power(x, lam - 2.0)
        return out

    def h_x(x, t):
        return -disc_hat(T, t) * ups_hat.prime(x)

    def h_xx(x, t):
        return -disc_hat(T, t) * ups_hat.second(x)

    derivs = dict(b_x=b_x, b_xx=zeros, sigma_x=sigma_x, sigma_xx=zeros, f_x=f_x, f_y=f_y,
                  f_z=f_z, f_hess=f_hess, h_x=h_x, h_xx=h_xx)
    return CoefficientBundle(b, sigma, f, h, derivs, name="merton")


def build_merton_problem(setup: MertonSetup, grid: TimeGrid, x0: float = 1.0,
                         check: bool = True) -> ProblemInstance:
    """Merton instance on ``grid`` started at ``x0`` (log-Euler scheme)."""
    setup.discount.check_integrable(grid.horizon)
    setup.aversion.check(grid, grid.t_start)
    bundle = merton_bundle(setup, grid.t_end)
    return build_problem(bundle, grid, MERTON_CONTROL_DOMAIN, StateDomain(0.0, np.inf), x0,
                         scheme="log_euler", check=check, metadata={"merton": setup})


def merton_setup_of(problem: ProblemInstance) -> MertonSetup:
    setup = problem.metadata.get("merton")
    if setup is None:
        raise ProblemError("problem was not built by build_merton_problem")
    return setup


def inverse_marginal_upsilon(p_val, lam: float):
    """``(-ups')^{-1}(p) = (-p)^{1/(lam-1)}``, the wealth level at which the
    marginal utility equals ``-p``.  Defined for ``p < 0``."""
    p_val = np.asarray(p_val, dtype=float)
    if np.any(p_val >= 0):
        raise ProblemError("inverse marginal utility needs p < 0")
    return np.power(-p_val, 1.0 / (lam - 1.0))


def merton_fraction(mu: float, sigma: float, lam: float) -> float:
    """Unconstrained optimal stock fraction ``mu / ((1 - lam) sigma^2)``."""
    return mu / ((1.0 - lam) * sigma**2)


@dataclass
class MertonPolicy:
    """Feedback policy ``(zeta(s), c(s))`` independent of wealth.

    ``consumption`` maps time to the consumption rate.
    """

    zeta: float
    consumption: Callable[[NDArray[np.float64]], NDArray[np.float64]]
    zeta_clamped: bool = False
    label: str = ""
    info: dict = field(default_factory=dict)

    def __call__(self, s, x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (2,))
        out[..., 0] = self.zeta
        out[..., 1] = self.consumption(np.asarray(s, dtype=float))
        return out

    def shifted(self, shift) -> FeedbackPolicy:
        shift = np.asarray(shift, dtype=float)

        def policy(s, x):
            return self(s, x) + shift

        return policy


def _growth_rate(market: MarketParams, lam: float) -> float:
    """``lam r + lam mu^2 / (2 (1 - lam) sigma^2)``."""
    return lam * market.r + lam * market.mu**2 / (2 * (1 - lam) * market.sigma**2)


def classical_consumption(market: MarketParams, lam: float, delta: float, T: float):
    """Finite-horizon CRRA consumption rate ``1 / g(s)`` with
    ``g(s) = (1 + 1/k) e^{k (T - s)} - 1/k``, ``k = (growth - delta)/(1 - lam)``."""
    k = (_growth_rate(market, lam) - delta) / (1 - lam)

    def c(s):
        tau = T - np.asarray(s, dtype=float)
        if abs(k) < 1e-12:
            g = 1.0 + tau
        else:
            g = (1.0 + 1.0 / k) * np.exp(k * tau) - 1.0 / k
        return 1.0 / g

    return c


def classical_merton_baseline(setup: MertonSetup, grid: TimeGrid, validate: bool = True,
                              validation_paths: int = 20000, seed: int = 7) -> MertonPolicy:
    """Optimal policy for exponential discounting with ``beta = gamma = 0``.

    With ``validate`` the Hamiltonian grid argmin is compared with the closed
    form at three ``(t, x)`` points.
    """
    if setup.discount.kind != "exponential":
        raise ProblemError("classical baseline needs exponential discounting")
    if not setup.aversion.is_zero:
        raise ProblemError("classical baseline needs beta = gamma = 0")
    m, lam = setup.market, setup.utility.lam
    raw = merton_fraction(m.mu, m.sigma, lam)
    zeta = float(np.clip(raw, -1.0, 1.0))
    if zeta != raw:
        logger.warning("classical fraction %.4f clamped to %.4f", raw, zeta)
    policy = MertonPolicy(zeta, classical_consumption(m, lam, setup.discount.rate, grid.t_end),
                          zeta_clamped=zeta != raw, label="classical")
    if validate:
        validate_baseline(setup, policy, grid, validation_paths, seed)
    return policy


def validate_baseline(setup: MertonSetup, policy: MertonPolicy, grid: TimeGrid,
                      n_paths: int, seed: int) -> list[dict]:
    from .equilibrium import analyse_cell

    T = grid.t_end
    points = [(grid.t_start, 1.0), (grid.t_start + 0.3 * grid.horizon, 0.8),
              (grid.t_start + 0.6 * grid.horizon, 1.25)]
    problem = build_merton_problem(setup, grid, 1.0, check=False)
    rows = []
    for k, (t, x) in enumerate(points):
        cell = analyse_cell(problem.restart(t, x), policy, n_paths, seed + k,
                            deviations=np.empty((0, 2)), argmin=True)
        am = cell.argmin
        target = policy(t, np.array(x))
        width = am.cell_width
        ok = bool(np.all(np.abs(am.minimizer - target) <= width + 1e-12))
        rows.append({"t": t, "x": x, "argmin": am.minimizer.tolist(),
                     "closed_form": target.tolist(), "ok": ok})
        if not ok:
            raise ProblemError(
                f"baseline validation failed at (t={t:g}, x={x:g}): grid argmin "
                f"{am.minimizer} vs closed form {target}"
            )
    policy.info["validation"] = rows
    logger.debug("baseline validated up to T=%g: %s", T, rows)
    return rows


def precommitted_consumption(setup: MertonSetup, t0: float, T: float, n_nodes: int = 4001):
    """Consumption rate optimal for the problem seen from ``t0`` (no
    re-optimisation later).  Solves ``g' = -k(s) g - 1``, ``g(T) = 1`` with
    ``k(s) = (growth - rate(s - t0)) / (1 - lam)`` by quadrature."""
    lam = setup.utility.lam
    growth = _growth_rate(setup.market, lam)
    s = np.linspace(t0, T, n_nodes)
    k = (growth - setup.discount.rate_at(s - t0)) / (1 - lam)
    K = cumulative_trapezoid(k, s, initial=0.0)  # int_t0^s k
    # g(s) = e^{K(T)-K(s)} + int_s^T e^{K(r)-K(s)} dr
    eK = np.exp(K - K[-1])
    tail = cumulative_trapezoid(eK[::-1], -s[::-1], initial=0.0)[::-1]  # int_s^T eK
    g = (1.0 + tail) / eK
    c_nodes = 1.0 / g

    def c(x):
        return np.interp(np.asarray(x, dtype=float), s, c_nodes)

    return c


def precommitted_merton_policy(setup: MertonSetup, t0: float, T: float) -> MertonPolicy:
    """Policy optimal for the problem started at ``t0`` (``beta = gamma = 0``)."""
    m, lam = setup.market, setup.utility.lam
    raw = merton_fraction(m.mu, m.sigma, lam)
    zeta = float(np.clip(raw, -1.0, 1.0))
    return MertonPolicy(zeta, precommitted_consumption(setup, t0, T), zeta != raw,
                        label=f"precommitted_t{t0:g}")


def recursive_candidate_policy(setup: MertonSetup, T: float) -> MertonPolicy:
    """Candidate for ``beta, gamma > 0``: fraction ``(mu - sigma gamma) /
    ((1 - lam) sigma^2)`` with the classical consumption rate."""
    m, lam = setup.market, setup.utility.lam
    g0 = setup.aversion.gamma_fn()(0.0, 0.0)
    raw = (m.mu - m.sigma * g0) / ((1 - lam) * m.sigma**2)
    zeta = float(np.clip(raw, -1.0, 1.0))
    rate = setup.discount.rate if setup.discount.kind == "exponential" else 0.0
    return MertonPolicy(zeta, classical_consumption(m, lam, rate, T), zeta != raw,
                        label="recursive_candidate")


@dataclass
class PolicyConditionsVerdict:
    residual_i: float
    residual_ii: float
    residual_iii: float
    profile_i: NDArray[np.float64]
    profile_ii: NDArray[np.float64]
    tolerance: float = 0.02
    details: dict = field(default_factory=dict)

    @property
    def passed_i(self) -> bool:
        return self.residual_i <= self.tolerance

    @property
    def passed_ii(self) -> bool:
        return self.residual_ii <= self.tolerance

    @property
    def passed_iii(self) -> bool:
        return self.residual_iii <= self.tolerance

    @property
    def passed(self) -> bool:
        return self.passed_i and self.passed_ii and self.passed_iii


def verify_policy_conditions(problem: ProblemInstance, policy: FeedbackPolicy, t: float,
                             x: float, n_paths: int = 100_000, seed: int = 11,
                             basis_degree: int = 3, tolerance: float = 0.02
                             ) -> PolicyConditionsVerdict:
    """Residuals of the first-order equilibrium conditions along ``[t, T]``.

    (i)   ``(mu - sigma h(s;t) gamma) p + sigma q`` relative to ``|mu p|``;
    (ii)  ``p + h(s;t) ups'(c X) `` relative to ``|p|``;
    (iii) ``c(t, x) x`` against the inverse marginal utility of ``p(t;t)``.
    Each is a mean absolute residual divided by the mean scale.
    """
    from .adjoint import solve_adjoints, solve_candidate
    from .sde import generate_brownian

    setup = merton_setup_of(problem)
    sub = problem.restart(t, x)
    ens = generate_brownian(sub.grid, n_paths, seed)
    tup = solve_candidate(sub, policy, ens, basis_degree)
    adj = solve_adjoints(tup)
    knots = sub.grid.knots
    disc = setup.discount(knots, t)[:, None]
    gam = np.array([setup.aversion.gamma_fn()(s, t) for s in knots])[:, None]
    m = setup.market
    p, q = adj.p, adj.q
    res_i = np.abs((m.mu - m.sigma * disc * gam) * p + m.sigma * q)
    scale_i = np.abs(m.mu * p)
    cx = tup.U[..., 1] * tup.X
    res_ii = np.abs(p + disc * setup.utility.prime(cx))
    scale_ii = np.abs(p)
    ups_p = float(inverse_marginal_upsilon(adj.p0, setup.utility.lam))
    c_t = float(np.asarray(policy(t, np.array(x)))[..., 1])
    r_iii = abs(c_t * x - ups_p) / ups_p
    return PolicyConditionsVerdict(
        float(res_i.mean() / scale_i.mean()),
        float(res_ii.mean() / scale_ii.mean()),
        float(r_iii),
        res_i.mean(axis=1) / scale_i.mean(axis=1),
        res_ii.mean(axis=1) / scale_ii.mean(axis=1),
        tolerance,
        {"p0": adj.p0, "q0": adj.q0, "upsilon_p0": ups_p, "consumption_wealth": c_t * x},
    )


PRESET_MARKET = dict(r=0.03, rho=0.05, sigma=0.3)
PRESET_LAMBDA = 0.5


def preset_setup(name: str, overrides: dict | None = None) -> MertonSetup:
    """Setup for a named scenario with optional parameter overrides."""
    o = dict(overrides or {})
    market = MarketParams(**{**PRESET_MARKET, **o.get("market", {})})
    lam = float(o.get("lambda", PRESET_LAMBDA))
    if name == "merton_exponential":
        disc = {"kind": "exponential", "rate": 0.1}
        aversion = {"beta": 0.0, "gamma": 0.0}
    elif name == "merton_hyperbolic_K1":
        disc = {"kind": "hyperbolic", "K": 1.0}
        aversion = {"beta": 0.0, "gamma": 0.0}
    elif name == "merton_recursive_beta_gamma":
        disc = {"kind": "exponential", "rate": 0.1}
        aversion = {"beta": 0.05, "gamma": 0.1}
    else:
        raise ProblemError(f"unknown scenario {name!r}")
    disc.update(o.get("discount", {}))
    if "taus" in disc:
        disc["taus"] = tuple(disc["taus"])
        disc["values"] = tuple(disc["values"])
    aversion.update(o.get("aversion", {}))
    return MertonSetup(market, CrraUtility(lam), DiscountSpec(**disc),
                       AversionProcesses(**aversion))


def preset_policy(name: str, setup: MertonSetup, grid: TimeGrid, validate: bool = False
                  ) -> MertonPolicy:
    """Candidate policy attached to each scenario."""
    if name == "merton_exponential":
        return classical_merton_baseline(setup, grid, validate=validate)
    if name == "merton_hyperbolic_K1":
        return precommitted_merton_policy(setup, grid.t_start, grid.t_end)
    if name == "merton_recursive_beta_gamma":
        return recursive_candidate_policy(setup, grid.t_end)
    raise ProblemError(f"unknown scenario {name!r}")


PRESETS = {
    "merton_exponential": "exponential discount 0.1, beta = gamma = 0, classical policy",
    "merton_hyperbolic_K1": "hyperbolic discount K = 1, policy precommitted at t = 0",
    "merton_recursive_beta_gamma": "exponential discount 0.1, beta = 0.05, gamma = 0.1",
}
