"""Problem definition: grids, domains, coefficient bundles and feedback policies.

Every coefficient callable is vectorised.  ``s`` and ``t`` are scalar times,
``x``, ``y``, ``z`` are arrays of matching shape and ``u`` carries the control
coordinates on its last axis, so ``u.shape == x.shape + (n,)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from numpy.typing import NDArray

logger = logging.getLogger(__name__)

FD_STEP = 1e-6
# second differences with FD_STEP are dominated by round-off
FD_STEP_SECOND = 1e-4
SELF_CHECK_RTOL = 1e-4

FeedbackPolicy = Callable[[float, NDArray[np.float64]], NDArray[np.float64]]

DERIVATIVE_NAMES = (
    "b_x", "b_xx", "sigma_x", "sigma_xx",
    "f_x", "f_y", "f_z", "f_hess",
    "h_x", "h_xx",
)


class ProblemError(ValueError):
    """Raised when a problem instance cannot be built."""


class DerivativeCheckError(ProblemError):
    """Analytic derivative disagrees with its finite-difference counterpart."""

    def __init__(self, name: str, max_deviation: float):
        self.name = name
        self.max_deviation = max_deviation
        super().__init__(
            f"derivative self-check failed for {name}: "
            f"max relative deviation {max_deviation:.3e} > {SELF_CHECK_RTOL:g}"
        )


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ProblemError("t_start must be < t_end")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ProblemError("n_steps must be a positive integer")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def knots(self) -> NDArray[np.float64]:
        k = self.t_start + self.dt * np.arange(self.n_steps + 1)
        k[-1] = self.t_end
        return k

    @property
    def horizon(self) -> float:
        return self.t_end - self.t_start

    def index_of(self, s: float) -> int:
        """Nearest knot index to time ``s``."""
        i = int(round((s - self.t_start) / self.dt))
        if i < 0 or i > self.n_steps:
            raise ProblemError(f"time {s} outside grid [{self.t_start}, {self.t_end}]")
        return i


@dataclass(frozen=True)
class ControlDomain:
    """Box ``[lower, upper]`` in R^n."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ProblemError("control bounds must be 1-d and of equal length")
        if np.any(lo > hi):
            raise ProblemError("control lower bound exceeds upper bound")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> NDArray[np.float64]:
        return np.asarray(self.lower)

    @property
    def hi(self) -> NDArray[np.float64]:
        return np.asarray(self.upper)

    def clamp(self, u: NDArray[np.float64]) -> tuple[NDArray[np.float64], int]:
        """Project onto the box; returns the projection and the number of
        coordinates that moved."""
        u = np.asarray(u, dtype=float)
        c = np.clip(u, self.lo, self.hi)
        return c, int(np.count_nonzero(c != u))

    def contains(self, u: NDArray[np.float64]) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all((u >= self.lo) & (u <= self.hi)))

    def vertices(self) -> NDArray[np.float64]:
        grids = np.meshgrid(*[(a, b) for a, b in zip(self.lower, self.upper)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def grid(self, resolution: int) -> list[NDArray[np.float64]]:
        return [np.linspace(a, b, resolution) for a, b in zip(self.lower, self.upper)]


@dataclass(frozen=True)
class StateDomain:
    """Open interval ``]lower, upper[`` (bounds may be infinite)."""

    lower: float = -np.inf
    upper: float = np.inf

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ProblemError("state domain must satisfy lower < upper")

    def contains(self, x) -> NDArray[np.bool_]:
        x = np.asarray(x, dtype=float)
        return (x > self.lower) & (x < self.upper)

    def sample_interval(self, x0: float) -> tuple[float, float]:
        """A bounded interval around ``x0`` strictly inside the domain."""
        width = max(1.0, abs(x0))
        lo, hi = x0 - width, x0 + width
        if np.isfinite(self.lower):
            lo = max(lo, self.lower + 0.5 * (x0 - self.lower))
        if np.isfinite(self.upper):
            hi = min(hi, self.upper - 0.5 * (self.upper - x0))
        return lo, hi


def _step(v, base: float) -> NDArray[np.float64]:
    return base * np.maximum(1.0, np.abs(v))


@dataclass(frozen=True)
class CoefficientBundle:
    """Coefficients ``b, sigma, f, h`` plus optional analytic derivatives.

    Missing derivatives fall back to central finite differences in the
    relevant argument with step ``1e-6 * max(1, |arg|)`` (``1e-4`` for second
    differences of the base map).  ``f_hess`` returns the Hessian over
    ``(x, y, z)`` with shape ``x.shape + (3, 3)``.
    """

    b: Callable
    sigma: Callable
    f: Callable
    h: Callable
    derivatives: Mapping[str, Callable] = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        unknown = set(self.derivatives) - set(DERIVATIVE_NAMES)
        if unknown:
            raise ProblemError(f"unknown derivative names: {sorted(unknown)}")

    def has_analytic(self, name: str) -> bool:
        return name in self.derivatives

    # -- b, sigma -------------------------------------------------------
    def _fd_x(self, fn, s, x, u):
        x = np.asarray(x, dtype=float)
        e = _step(x, FD_STEP)
        return (fn(s, x + e, u) - fn(s, x - e, u)) / (2 * e)

    def _fd_xx(self, fn, fn_x, s, x, u):
        x = np.asarray(x, dtype=float)
        if fn_x is not None:
            e = _step(x, FD_STEP)
            return (fn_x(s, x + e, u) - fn_x(s, x - e, u)) / (2 * e)
        e = _step(x, FD_STEP_SECOND)
        return (fn(s, x + e, u) - 2 * fn(s, x, u) + fn(s, x - e, u)) / e**2

    def b_x(self, s, x, u):
        d = self.derivatives.get("b_x")
        return d(s, x, u) if d else self._fd_x(self.b, s, x, u)

    def b_xx(self, s, x, u):
        d = self.derivatives.get("b_xx")
        return d(s, x, u) if d else self._fd_xx(self.b, self.derivatives.get("b_x"), s, x, u)

    def sigma_x(self, s, x, u):
        d = self.derivatives.get("sigma_x")
        return d(s, x, u) if d else self._fd_x(self.sigma, s, x, u)

    def sigma_xx(self, s, x, u):
        d = self.derivatives.get("sigma_xx")
        if d:
            return d(s, x, u)
        return self._fd_xx(self.sigma, self.derivatives.get("sigma_x"), s, x, u)

    # -- f ----------------------------------------------------------------
    def _f_shift(self, s, x, u, y, z, t, axis: int, e):
        args = [np.asarray(x, dtype=float), np.asarray(y, dtype=float), np.asarray(z, dtype=float)]
        args[axis] = args[axis] + e
        return self.f(s, args[0], u, args[1], args[2], t)

    def _f_fd(self, s, x, u, y, z, t, axis: int):
        v = np.asarray((x, y, z)[axis], dtype=float)
        e = _step(v, FD_STEP)
        return (self._f_shift(s, x, u, y, z, t, axis, e)
                - self._f_shift(s, x, u, y, z, t, axis, -e)) / (2 * e)

    def f_x(self, s, x, u, y, z, t):
        d = self.derivatives.get("f_x")
        return d(s, x, u, y, z, t) if d else self._f_fd(s, x, u, y, z, t, 0)

    def f_y(self, s, x, u, y, z, t):
        d = self.derivatives.get("f_y")
        return d(s, x, u, y, z, t) if d else self._f_fd(s, x, u, y, z, t, 1)

    def f_z(self, s, x, u, y, z, t):
        d = self.derivatives.get("f_z")
        return d(s, x, u, y, z, t) if d else self._f_fd(s, x, u, y, z, t, 2)

    def f_hess(self, s, x, u, y, z, t):
        d = self.derivatives.get("f_hess")
        if d:
            return d(s, x, u, y, z, t)
        return self._fd_hessian(s, x, u, y, z, t)

    def _fd_hessian(self, s, x, u, y, z, t):
        base = [np.asarray(v, dtype=float) for v in np.broadcast_arrays(x, y, z)]
        steps = [_step(v, FD_STEP_SECOND) for v in base]
        f0 = self.f(s, base[0], u, base[1], base[2], t)
        out = np.empty(np.shape(f0) + (3, 3))

        def ev(shifts):
            a = [base[k] + shifts.get(k, 0.0) for k in range(3)]
            return self.f(s, a[0], u, a[1], a[2], t)

        for i in range(3):
            ei = steps[i]
            out[..., i, i] = (ev({i: ei}) - 2 * f0 + ev({i: -ei})) / ei**2
            for j in range(i + 1, 3):
                ej = steps[j]
                v = (ev({i: ei, j: ej}) - ev({i: ei, j: -ej})
                     - ev({i: -ei, j: ej}) + ev({i: -ei, j: -ej})) / (4 * ei * ej)
                out[..., i, j] = out[..., j, i] = v
        return out

    # -- h ----------------------------------------------------------------
    def h_x(self, x, t):
        d = self.derivatives.get("h_x")
        if d:
            return d(x, t)
        x = np.asarray(x, dtype=float)
        e = _step(x, FD_STEP)
        return (self.h(x + e, t) - self.h(x - e, t)) / (2 * e)

    def h_xx(self, x, t):
        d = self.derivatives.get("h_xx")
        if d:
            return d(x, t)
        x = np.asarray(x, dtype=float)
        hx = self.derivatives.get("h_x")
        if hx:
            e = _step(x, FD_STEP)
            return (hx(x + e, t) - hx(x - e, t)) / (2 * e)
        e = _step(x, FD_STEP_SECOND)
        return (self.h(x + e, t) - 2 * self.h(x, t) + self.h(x - e, t)) / e**2


def _sample_points(grid: TimeGrid, cdom: ControlDomain, sdom: StateDomain, x0: float, n: int = 10):
    s = np.linspace(grid.t_start, grid.t_end, n)
    lo, hi = sdom.sample_interval(x0)
    x = np.linspace(lo, hi, n)
    rng = np.random.default_rng(20240607)
    u = cdom.lo + (cdom.hi - cdom.lo) * rng.random((n, cdom.dim))
    y = np.linspace(-1.0, 1.0, n)
    z = np.linspace(1.0, -1.0, n)
    return s, x, u, y, z


def check_derivatives(bundle: CoefficientBundle, grid: TimeGrid, control_domain: ControlDomain,
                      state_domain: StateDomain, x0: float) -> dict[str, float]:
    """Compare every analytic derivative with finite differences.

    Samples a 10 x 10 x 10 grid over (s, x, u); ``y`` and ``z`` ride along with
    the control index.  Returns the maximum relative deviation per derivative
    and raises :class:`DerivativeCheckError` on the first one above 1e-4.
    """
    s_pts, x_pts, u_pts, y_pts, z_pts = _sample_points(grid, control_domain, state_domain, x0)
    t = grid.t_start
    # arrays of shape (n_u, n_x) evaluated per s
    X = np.broadcast_to(x_pts[None, :], (len(u_pts), len(x_pts))).copy()
    U = np.broadcast_to(u_pts[:, None, :], X.shape + (control_domain.dim,)).copy()
    Y = np.broadcast_to(y_pts[:, None], X.shape).copy()
    Z = np.broadcast_to(z_pts[:, None], X.shape).copy()
    fd = CoefficientBundle(bundle.b, bundle.sigma, bundle.f, bundle.h, {}, bundle.name)
    # second derivatives are checked against differences of the analytic first
    # derivative when one exists
    fd_partial = CoefficientBundle(
        bundle.b, bundle.sigma, bundle.f, bundle.h,
        {k: v for k, v in bundle.derivatives.items() if k in ("b_x", "sigma_x", "h_x")},
        bundle.name,
    )
    report: dict[str, float] = {}

    def record(name, analytic, approx):
        analytic = np.asarray(analytic, dtype=float)
        approx = np.asarray(approx, dtype=float)
        dev = np.abs(analytic - approx) / np.maximum(1.0, np.abs(analytic))
        worst = float(np.nanmax(dev)) if dev.size else 0.0
        if not np.all(np.isfinite(dev)):
            worst = np.inf
        report[name] = max(report.get(name, 0.0), worst)

    for s in s_pts:
        for name in bundle.derivatives:
            if name in ("b_x", "b_xx", "sigma_x", "sigma_xx"):
                analytic = getattr(bundle, name)(s, X, U)
                src = fd_partial if name.endswith("xx") else fd
                record(name, analytic, getattr(src, name)(s, X, U))
            elif name in ("f_x", "f_y", "f_z", "f_hess"):
                analytic = getattr(bundle, name)(s, X, U, Y, Z, t)
                record(name, analytic, getattr(fd, name)(s, X, U, Y, Z, t))
    for name in ("h_x", "h_xx"):
        if name in bundle.derivatives:
            src = fd_partial if name == "h_xx" else fd
            record(name, getattr(bundle, name)(x_pts, t), getattr(src, name)(x_pts, t))

    for name, dev in report.items():
        if dev > SELF_CHECK_RTOL:
            raise DerivativeCheckError(name, dev)
    return report


@dataclass(frozen=True)
class ProblemInstance:
    """Immutable handle shared by every solver.

    ``scheme`` is the forward scheme (``"euler"`` or ``"log_euler"``).
    """

    bundle: CoefficientBundle
    grid: TimeGrid
    control_domain: ControlDomain
    state_domain: StateDomain
    x0: float
    scheme: str = "euler"
    derivative_report: Mapping[str, float] = field(default_factory=dict, compare=False)
    metadata: Mapping[str, object] = field(default_factory=dict, compare=False)

    @property
    def t(self) -> float:
        return self.grid.t_start

    @property
    def T(self) -> float:
        return self.grid.t_end

    def restart(self, t: float, x: float, n_steps: int | None = None) -> "ProblemInstance":
        """Same problem started from ``(t, x)`` on ``[t, T]``."""
        if not self.state_domain.contains(x):
            raise ProblemError("initial state not interior")
        grid = TimeGrid(t, self.grid.t_end, n_steps or self.grid.n_steps)
        return replace(self, grid=grid, x0=float(x))


def build_problem(bundle: CoefficientBundle, grid: TimeGrid, control_domain: ControlDomain,
                  state_domain: StateDomain, x0: float, scheme: str = "euler",
                  check: bool = True, metadata: Mapping[str, object] | None = None
                  ) -> ProblemInstance:
    """Validate inputs and return a :class:`ProblemInstance`.

    Raises
    ------
    ProblemError
        ``x0`` outside the state domain, an unknown scheme, or a non-finite
        coefficient sample.
    DerivativeCheckError
        An analytic derivative disagrees with finite differences.
    """
    if not bool(state_domain.contains(x0)):
        raise ProblemError("initial state not interior")
    if scheme not in ("euler", "log_euler"):
        raise ProblemError(f"unknown scheme {scheme!r}")
    report: dict[str, float] = {}
    if check:
        s_pts, x_pts, u_pts, y_pts, z_pts = _sample_points(grid, control_domain, state_domain, x0)
        t = grid.t_start
        for s in s_pts:
            U = u_pts
            X = np.full(len(U), x_pts[len(x_pts) // 2])
            vals = [bundle.b(s, X, U), bundle.sigma(s, X, U),
                    bundle.f(s, X, U, y_pts, z_pts, t)]
            if not all(np.all(np.isfinite(v)) for v in vals):
                raise ProblemError(f"non-finite coefficient sample at s={s}")
        if not np.all(np.isfinite(bundle.h(x_pts, t))):
            raise ProblemError("non-finite terminal sample")
        report = check_derivatives(bundle, grid, control_domain, state_domain, x0)
        logger.debug("derivative self-check: %s", report)
    return ProblemInstance(bundle, grid, control_domain, state_domain, float(x0), scheme,
                           report, dict(metadata or {}))


@dataclass
class ControlPath:
    """Control values per knot and path, shape ``(N + 1, M, n)``."""

    values: NDArray[np.float64]
    clamp_count: int = 0

    @property
    def n_paths(self) -> int:
        return self.values.shape[1]

    def at(self, i: int) -> NDArray[np.float64]:
        return self.values[i]

    @classmethod
    def constant(cls, u, n_knots: int, n_paths: int) -> "ControlPath":
        u = np.asarray(u, dtype=float)
        return cls(np.broadcast_to(u, (n_knots, n_paths, u.shape[-1])).copy())


def evaluate_policy(policy: FeedbackPolicy, s: float, x, domain: ControlDomain
                    ) -> tuple[NDArray[np.float64], int]:
    """Evaluate ``policy(s, x)`` and clamp it into ``domain``."""
    x = np.asarray(x, dtype=float)
    raw = np.asarray(policy(s, x), dtype=float)
    raw = np.broadcast_to(raw, x.shape + (domain.dim,))
    return domain.clamp(raw)


def policy_to_control(policy: FeedbackPolicy, grid: TimeGrid, states, domain: ControlDomain
                      ) -> ControlPath:
    """``u(s_i) = clamp(policy(s_i, X(s_i)))`` for every knot and path."""
    states = np.asarray(states, dtype=float)
    out = np.empty(states.shape + (domain.dim,))
    total = 0
    for i, s in enumerate(grid.knots):
        out[i], n = evaluate_policy(policy, s, states[i], domain)
        total += n
    return ControlPath(out, total)


def constant_policy(u) -> FeedbackPolicy:
    u = np.asarray(u, dtype=float)

    def policy(s, x):
        return np.broadcast_to(u, np.shape(x) + u.shape)

    return policy
