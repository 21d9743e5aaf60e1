"""Brownian ensembles, forward state simulation and spike variations.

All path arrays are time-major: increments have shape ``(N, M)`` and state
paths ``(N + 1, M)``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .model import (
    ControlPath,
    FeedbackPolicy,
    ProblemError,
    ProblemInstance,
    TimeGrid,
    evaluate_policy,
)

logger = logging.getLogger(__name__)

BLOCK_SIZE = 1024
MAX_FLAGGED_FRACTION = 1e-3


class SimulationError(RuntimeError):
    """Forward simulation left the state domain on too many paths."""


@dataclass(frozen=True)
class BrownianEnsemble:
    grid: TimeGrid
    seed: int
    increments: NDArray[np.float64]
    antithetic: bool = False

    @property
    def n_paths(self) -> int:
        return self.increments.shape[1]

    @property
    def dW(self) -> NDArray[np.float64]:
        return self.increments

    def brownian(self) -> NDArray[np.float64]:
        """``W(s_i) - W(t)`` with shape ``(N + 1, M)``."""
        w = np.zeros((self.grid.n_steps + 1, self.n_paths))
        np.cumsum(self.increments, axis=0, out=w[1:])
        return w


def _block_normals(seed: int, block: int, n_steps: int, antithetic: bool) -> NDArray[np.float64]:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(block,))
    rng = np.random.default_rng(ss)
    if not antithetic:
        return rng.standard_normal((n_steps, BLOCK_SIZE))
    half = rng.standard_normal((n_steps, BLOCK_SIZE // 2))
    out = np.empty((n_steps, BLOCK_SIZE))
    out[:, 0::2] = half
    out[:, 1::2] = -half
    return out


def _cache_key(grid: TimeGrid, m_paths: int, seed: int, antithetic: bool) -> str:
    raw = f"{grid.t_start!r}|{grid.t_end!r}|{grid.n_steps}|{m_paths}|{seed}|{antithetic}"
    return hashlib.sha256(raw.encode()).hexdigest()[:24]


def generate_brownian(grid: TimeGrid, m_paths: int, seed: int, antithetic: bool = False,
                      cache_dir: str | Path | None = None) -> BrownianEnsemble:
    """Seeded Brownian increments on ``grid``.

    Paths are drawn in blocks of 1024, each block from its own
    ``SeedSequence`` child, so path ``k`` does not depend on ``m_paths``.
    With ``antithetic=True`` paths ``2j`` and ``2j + 1`` are mirror images.
    """
    m_paths = int(m_paths)
    if m_paths < 1:
        raise ValueError("m_paths must be >= 1")
    if antithetic and m_paths % 2:
        raise ValueError("antithetic ensembles need an even path count")
    cache_file = None
    if cache_dir is not None:
        cache_file = Path(cache_dir) / f"bm_{_cache_key(grid, m_paths, seed, antithetic)}.npy"
        if cache_file.exists():
            return BrownianEnsemble(grid, seed, np.load(cache_file), antithetic)

    n_blocks = -(-m_paths // BLOCK_SIZE)
    z = np.empty((grid.n_steps, n_blocks * BLOCK_SIZE))
    for b in range(n_blocks):
        z[:, b * BLOCK_SIZE:(b + 1) * BLOCK_SIZE] = _block_normals(seed, b, grid.n_steps, antithetic)
    dW = np.ascontiguousarray(z[:, :m_paths]) * np.sqrt(grid.dt)

    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        np.save(cache_file, dW)
    return BrownianEnsemble(grid, int(seed), dW, antithetic)


@dataclass
class StatePaths:
    X: NDArray[np.float64]
    scheme: str
    control: ControlPath
    flagged: NDArray[np.bool_] | None = None

    @property
    def n_paths(self) -> int:
        return self.X.shape[1]

    @property
    def n_flagged(self) -> int:
        return 0 if self.flagged is None else int(self.flagged.sum())


def _step(problem: ProblemInstance, scheme: str, s: float, x, u, dw, dt):
    b = problem.bundle.b(s, x, u)
    sig = problem.bundle.sigma(s, x, u)
    if scheme == "euler":
        return x + b * dt + sig * dw
    a = b / x
    v = sig / x
    return x * np.exp((a - 0.5 * v * v) * dt + v * dw)


def solve_state_forward(problem: ProblemInstance, control: ControlPath | FeedbackPolicy,
                        ensemble: BrownianEnsemble, scheme: str | None = None) -> StatePaths:
    """Simulate the controlled state on the ensemble.

    ``control`` is either an open-loop :class:`ControlPath` or a feedback
    policy evaluated along the simulated path (and clamped).  ``scheme``
    overrides the problem's forward scheme.
    """
    grid = problem.grid
    if ensemble.increments.shape[0] != grid.n_steps:
        raise ProblemError("ensemble does not match problem grid")
    scheme = scheme or problem.scheme
    if scheme not in ("euler", "log_euler"):
        raise ProblemError(f"unknown scheme {scheme!r}")
    if scheme == "log_euler" and problem.state_domain.lower < 0:
        raise ProblemError("log_euler needs a positive state domain")
    M = ensemble.n_paths
    dt = grid.dt
    knots = grid.knots
    X = np.empty((grid.n_steps + 1, M))
    X[0] = problem.x0
    feedback = not isinstance(control, ControlPath)
    if feedback:
        U = np.empty((grid.n_steps + 1, M, problem.control_domain.dim))
        clamps = 0
    else:
        U = control.values
        if U.shape[:2] != X.shape:
            raise ProblemError("control path does not match grid and ensemble")
    flagged = np.zeros(M, dtype=bool)
    lo, hi = problem.state_domain.lower, problem.state_domain.upper

    for i in range(grid.n_steps):
        if feedback:
            U[i], n = evaluate_policy(control, knots[i], X[i], problem.control_domain)
            clamps += n
        X[i + 1] = _step(problem, scheme, knots[i], X[i], U[i], ensemble.increments[i], dt)
        if scheme == "euler":
            out = ~((X[i + 1] > lo) & (X[i + 1] < hi))
            if out.any():
                flagged |= out
                if flagged.sum() > MAX_FLAGGED_FRACTION * M:
                    raise SimulationError(
                        f"{int(flagged.sum())} of {M} paths left the state domain"
                    )
                # keep flagged paths inside so coefficients stay finite
                X[i + 1] = np.clip(X[i + 1], np.nextafter(lo, hi), np.nextafter(hi, lo))
    if feedback:
        U[-1], n = evaluate_policy(control, knots[-1], X[-1], problem.control_domain)
        clamps += n
        path = ControlPath(U, clamps)
    else:
        path = control
    return StatePaths(X, scheme, path, flagged if flagged.any() else None)


@dataclass(frozen=True)
class SpikeWindow:
    """Window ``[start, start + epsilon]`` snapped to the grid.

    ``first`` is the first affected knot and ``n_knots`` the number of knots
    carrying the deviation; the snapped measure is ``n_knots * dt``.
    """

    start: float
    epsilon: float
    first: int
    n_knots: int
    dt: float

    @property
    def snapped_epsilon(self) -> float:
        return self.n_knots * self.dt

    @property
    def knots(self) -> range:
        return range(self.first, self.first + self.n_knots)

    @classmethod
    def on_grid(cls, grid: TimeGrid, start: float, epsilon: float) -> "SpikeWindow":
        if not 0 < epsilon < grid.horizon:
            raise ProblemError(
                f"epsilon must lie in ]0, T - t[ = ]0, {grid.horizon:g}[, got {epsilon:g}"
            )
        if not grid.t_start <= start <= grid.t_end:
            raise ProblemError("spike start outside the time grid")
        n = int(round(epsilon / grid.dt))
        if n < 1:
            raise ProblemError(
                f"epsilon {epsilon:g} is below grid resolution dt={grid.dt:g}"
            )
        first = grid.index_of(start)
        if first + n > grid.n_steps:
            first = grid.n_steps - n
        return cls(float(start), float(epsilon), first, n, grid.dt)


def apply_spike_variation(base: ControlPath, deviation, window: SpikeWindow,
                          domain=None) -> ControlPath:
    """``u_eps = base + (deviation - base) * 1_window`` on grid knots."""
    values = base.values.copy()
    if isinstance(deviation, ControlPath):
        dev = deviation.values[list(window.knots)]
    else:
        dev = np.broadcast_to(np.asarray(deviation, dtype=float),
                              (window.n_knots,) + values.shape[1:])
    clamps = base.clamp_count
    if domain is not None:
        dev, n = domain.clamp(dev)
        clamps += n
    values[window.first:window.first + window.n_knots] = dev
    return ControlPath(values, clamps)


def solve_variational_first(problem: ProblemInstance, base: StatePaths, deviation,
                            window: SpikeWindow, ensemble: BrownianEnsemble
                            ) -> NDArray[np.float64]:
    """First-order variational process along ``base``.

    Euler scheme for ``dX1 = b_x X1 ds + (sigma_x X1 + dsigma 1_E) dW`` with
    ``X1(t) = 0`` on the base ensemble.
    """
    grid = problem.grid
    bundle = problem.bundle
    X, U = base.X, base.control.values
    spiked = apply_spike_variation(base.control, deviation, window, problem.control_domain)
    X1 = np.zeros_like(X)
    knots = grid.knots
    in_window = np.zeros(grid.n_steps + 1, dtype=bool)
    in_window[list(window.knots)] = True
    for i in range(grid.n_steps):
        s = knots[i]
        bx = bundle.b_x(s, X[i], U[i])
        sx = bundle.sigma_x(s, X[i], U[i])
        forcing = 0.0
        if in_window[i]:
            forcing = bundle.sigma(s, X[i], spiked.values[i]) - bundle.sigma(s, X[i], U[i])
        X1[i + 1] = X1[i] + bx * X1[i] * grid.dt + (sx * X1[i] + forcing) * ensemble.increments[i]
    return X1
