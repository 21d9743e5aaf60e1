"""Generalised Hamiltonians, spike-variation limits and equilibrium verdicts."""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .adjoint import (
    AdjointBundle,
    CandidateTuple,
    KappaPath,
    affine_driver_coefficients,
    compute_kappa,
    inhomogeneity_G0,
    solve_adjoints,
    solve_candidate,
)
from .bsde import pathwise_linear_values, solve_bsde_regression
from .model import (
    CoefficientBundle,
    ControlDomain,
    ControlPath,
    FeedbackPolicy,
    ProblemError,
    ProblemInstance,
)
from .sde import (
    BrownianEnsemble,
    SpikeWindow,
    StatePaths,
    apply_spike_variation,
    generate_brownian,
    solve_state_forward,
)

logger = logging.getLogger(__name__)

SE_BAND = 3.0
GATE_FRACTION = 0.05
THREADS_ENV = "FBSDE_EQ_THREADS"


@dataclass
class HamiltonianEval:
    value_H: NDArray[np.float64]
    value_calH: NDArray[np.float64]
    inputs: dict


def eval_hamiltonian(s, x, u, y, z, p, q, P, t, x_bar, u_bar,
                     bundle: CoefficientBundle) -> HamiltonianEval:
    """First- and second-order generalised Hamiltonians.

    ``H = p b + q sigma + f(s, x, u, y, z + p dsig; t)`` and
    ``calH = H + P dsig^2 / 2`` with ``dsig = sigma(s,x,u) - sigma(s,x_bar,u_bar)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    sig = bundle.sigma(s, x, u)
    dsig = sig - bundle.sigma(s, np.asarray(x_bar, dtype=float), np.asarray(u_bar, dtype=float))
    H = p * bundle.b(s, x, u) + q * sig + bundle.f(s, x, u, y, z + p * dsig, t)
    calH = H + 0.5 * P * dsig * dsig
    return HamiltonianEval(H, calH, dict(s=s, x=x, u=u, y=y, z=z, p=p, q=q, P=P, t=t,
                                         x_bar=x_bar, u_bar=u_bar))


def _knot_inputs(tup: CandidateTuple, adj: AdjointBundle, i: int, samples: bool = False):
    """Arguments of the Hamiltonian at knot ``i``.

    With ``samples=True`` (initial knot only) the regressed constants are
    replaced by their per-path unbiased targets, which carry the Monte Carlo
    error into a per-path spread.
    """
    if samples:
        if i != 0:
            raise ValueError("per-path targets exist only at the initial knot")
        u = tup.utility
        return (u.y0_samples, u.z0_samples, adj.first.y0_samples, adj.first.z0_samples,
                adj.second.y0_samples)
    return tup.Y[i], tup.Z[i], adj.p[i], adj.q[i], adj.P[i]


def delta_hamiltonian(tup: CandidateTuple, adj: AdjointBundle, i: int, u,
                      samples: bool = False) -> NDArray[np.float64]:
    """``calH(s_i; t, u) - calH(s_i; t, u_bar(s_i))`` per path.

    Vanishes exactly when ``u`` equals the candidate control.
    """
    s = tup.problem.grid.knots[i]
    x = tup.X[i]
    ubar = tup.U[i]
    u = np.broadcast_to(np.asarray(u, dtype=float), ubar.shape)
    y, z, p, q, P = _knot_inputs(tup, adj, i, samples)
    b = tup.problem.bundle
    dev = eval_hamiltonian(s, x, u, y, z, p, q, P, tup.t, x, ubar, b).value_calH
    ref = eval_hamiltonian(s, x, ubar, y, z, p, q, P, tup.t, x, ubar, b).value_calH
    return dev - ref


@dataclass
class LimitValue:
    value: float
    se: float


def estimate_spike_limit_adjoint(tup: CandidateTuple, adj: AdjointBundle, kappa: KappaPath,
                                 u, s: float | None = None) -> LimitValue:
    """``E[kappa(s;t) dcalH(s;t,u)]`` with a Monte Carlo standard error.

    At ``s = t`` the value is the plug-in of the regressed constants and the
    standard error comes from the per-path targets (delta method).
    """
    grid = tup.problem.grid
    i = 0 if s is None else grid.index_of(s)
    u, _ = tup.problem.control_domain.clamp(np.asarray(u, dtype=float))
    if i == 0:
        k0 = kappa.values[0, 0]
        val = float(delta_hamiltonian(tup, adj, 0, u)[0] * k0)
        smp = delta_hamiltonian(tup, adj, 0, u, samples=True)
        return LimitValue(val, abs(k0) * standard_error(smp, tup.ensemble.antithetic))
    v = kappa.values[i] * delta_hamiltonian(tup, adj, i, u)
    return LimitValue(float(v.mean()), standard_error(v, tup.ensemble.antithetic))


def standard_error(samples: NDArray[np.float64], antithetic: bool = False) -> float:
    x = np.asarray(samples, dtype=float)
    if antithetic and x.shape[0] % 2 == 0:
        x = x.reshape(-1, 2).mean(axis=1)
    if x.shape[0] < 2:
        return 0.0
    return float(x.std(ddof=1) / np.sqrt(x.shape[0]))


def path_cost_samples(problem: ProblemInstance, states: StatePaths, ensemble: BrownianEnsemble,
                      features=None, basis_degree: int = 3,
                      quadrature: str = "trapezoid") -> tuple[float, NDArray[np.float64]]:
    """``Y(t;t)`` and per-path samples whose mean estimates it.

    Affine drivers with deterministic slopes use the explicit pathwise weight
    with the given running-cost ``quadrature``, so base and perturbed costs
    differ only through the paths.  Otherwise the regression solver runs on
    ``features``.
    """
    coeffs = affine_driver_coefficients(problem, states.X, states.control.values)
    if coeffs is not None:
        xi = problem.bundle.h(states.X[-1], problem.grid.t_start)
        right = coeffs.alpha_right if quadrature == "trapezoid" else None
        R0 = pathwise_linear_values(coeffs.alpha, coeffs.beta[:, None], coeffs.gamma[:, None],
                                    xi, ensemble, right)[0]
        return float(R0.mean()), R0
    sol = solve_bsde_regression(problem, states, ensemble, basis_degree, features=features)
    return sol.Y0, sol.cost_samples


@dataclass
class SpikeLimitEstimate:
    s: float
    deviation: NDArray[np.float64]
    epsilons: list[float]
    quotients: list[float]
    quotient_se: list[float]
    extrapolated: float
    extrapolated_se: float
    differences: list[float]
    difference_se: list[float]
    stabilizes: bool
    adjoint: LimitValue | None = None

    def agrees(self, rel: float = 0.05, band: float = SE_BAND) -> bool:
        if self.adjoint is None:
            raise ValueError("no adjoint estimate attached")
        a = self.adjoint.value
        tol = max(rel * abs(a), band * self.combined_se)
        return abs(self.extrapolated - a) <= tol

    @property
    def combined_se(self) -> float:
        a = 0.0 if self.adjoint is None else self.adjoint.se
        return float(np.hypot(a, self.extrapolated_se))


def default_epsilon_ladder(horizon: float) -> list[float]:
    return [f * horizon for f in (0.16, 0.08, 0.04, 0.02)]


def estimate_spike_limit_direct(problem: ProblemInstance, control: FeedbackPolicy | ControlPath,
                                deviation, s: float | None = None,
                                epsilon_ladder=None, ensemble: BrownianEnsemble | None = None,
                                n_paths: int = 100_000, seed: int = 0, antithetic: bool = True,
                                basis_degree: int = 3,
                                quadrature: str = "trapezoid") -> SpikeLimitEstimate:
    """Finite-``epsilon`` quotients ``(J(u_eps) - J(u)) / eps`` on common noise.

    The two smallest ladder entries are combined by Richardson extrapolation
    ``(e1 Q2 - e2 Q1) / (e1 - e2)``.  ``deviation`` is clamped to the control
    domain first.
    """
    grid = problem.grid
    s = grid.t_start if s is None else s
    ladder = sorted(epsilon_ladder or default_epsilon_ladder(grid.horizon), reverse=True)
    if len(ladder) < 2:
        raise ValueError("epsilon ladder needs at least two entries")
    windows = [SpikeWindow.on_grid(grid, s, e) for e in ladder]
    sizes = [w.n_knots for w in windows]
    if len(set(sizes)) != len(sizes):
        raise ProblemError(
            f"epsilon ladder exhausts grid resolution: snapped sizes {sizes} repeat"
        )
    ens = ensemble or generate_brownian(grid, n_paths, seed, antithetic)
    base = solve_state_forward(problem, control, ens)
    J0, c0 = path_cost_samples(problem, base, ens, basis_degree=basis_degree,
                               quadrature=quadrature)
    dev, _ = problem.control_domain.clamp(np.asarray(deviation, dtype=float))

    quotients, q_se, diffs = [], [], []
    for w in windows:
        spiked = apply_spike_variation(base.control, dev, w, problem.control_domain)
        st = solve_state_forward(problem, spiked, ens)
        feats = np.stack([st.X, base.X], axis=-1)
        J1, c1 = path_cost_samples(problem, st, ens, features=feats, basis_degree=basis_degree,
                                   quadrature=quadrature)
        d = (c1 - c0) / w.snapped_epsilon
        quotients.append((J1 - J0) / w.snapped_epsilon)
        q_se.append(standard_error(d, ens.antithetic))
        diffs.append(d)

    e1, e2 = windows[-2].snapped_epsilon, windows[-1].snapped_epsilon
    ext = (e1 * quotients[-1] - e2 * quotients[-2]) / (e1 - e2)
    ext_se = standard_error((e1 * diffs[-1] - e2 * diffs[-2]) / (e1 - e2), ens.antithetic)
    steps = [quotients[k + 1] - quotients[k] for k in range(len(quotients) - 1)]
    step_se = [standard_error(diffs[k + 1] - diffs[k], ens.antithetic) for k in range(len(steps))]
    # successive changes must shrink, up to two standard errors of noise
    stab = all(abs(steps[k + 1]) <= abs(steps[k]) + 2 * step_se[k + 1]
               for k in range(len(steps) - 1))
    return SpikeLimitEstimate(float(s), dev, [w.snapped_epsilon for w in windows],
                              [float(v) for v in quotients], q_se, float(ext), ext_se,
                              [float(v) for v in steps], step_se, stab)


@dataclass
class ArgminResult:
    minimizer: NDArray[np.float64]
    min_value: float
    value_at_candidate: float
    margin: float
    margin_se: float
    cell_width: NDArray[np.float64]
    which: str
    gate_passed: bool
    status: str

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def corollary_hypotheses(tup: CandidateTuple, adj: AdjointBundle) -> bool:
    """Convex terminal map and nonnegative ``G(.,0,0;t)`` along the candidate."""
    hxx = tup.problem.bundle.h_xx(tup.X[-1], tup.t)
    return bool(np.all(hxx >= 0) and np.all(inhomogeneity_G0(tup, adj) >= -1e-12))


def determinism_gate(tup: CandidateTuple, adj: AdjointBundle) -> tuple[bool, dict]:
    scale = max(1.0, abs(tup.utility.Y0), abs(adj.p0))
    z_sd = float(tup.Z[0].std())
    q_sd = float(adj.q[0].std())
    ok = z_sd <= GATE_FRACTION * scale and q_sd <= GATE_FRACTION * scale
    return ok, {"Z0_std": z_sd, "q0_std": q_sd, "scale": scale}


def argmin_hamiltonian(tup: CandidateTuple, adj: AdjointBundle, resolution: int = 201,
                       which: str = "calH") -> ArgminResult:
    """Grid search of ``u -> calH`` (or ``H``) at ``s = t``.

    Condition 3 passes when the candidate's margin above the grid minimum is
    within three standard errors.  ``which="auto"`` uses ``H`` when the
    corollary hypotheses hold.
    """
    dom = tup.problem.control_domain
    gate, _ = determinism_gate(tup, adj)
    if which == "auto":
        which = "H" if corollary_hypotheses(tup, adj) else "calH"
    if which not in ("H", "calH"):
        raise ValueError("which must be 'H', 'calH' or 'auto'")
    axes = dom.grid(resolution)
    mesh = np.meshgrid(*axes, indexing="ij")
    U = np.stack([m.ravel() for m in mesh], axis=-1)
    s = tup.problem.grid.knots[0]
    x = tup.X[0, 0]
    ubar = tup.U[0, 0]
    y, z, p, q, P = (float(v[0]) for v in _knot_inputs(tup, adj, 0))
    xs = np.full(U.shape[0], x)
    ev = eval_hamiltonian(s, xs, U, y, z, p, q, P, tup.t, xs, np.broadcast_to(ubar, U.shape),
                          tup.problem.bundle)
    vals = ev.value_H if which == "H" else ev.value_calH
    k = int(np.argmin(vals))
    ref = eval_hamiltonian(s, np.array([x]), ubar[None], y, z, p, q, P, tup.t, np.array([x]),
                           ubar[None], tup.problem.bundle)
    ref_v = float((ref.value_H if which == "H" else ref.value_calH)[0])
    margin = ref_v - float(vals[k])
    smp = delta_hamiltonian(tup, adj, 0, U[k], samples=True)
    if which == "H":
        smp = smp - _second_order_term(tup, adj, U[k], samples=True)
    se = standard_error(smp, tup.ensemble.antithetic)
    width = np.array([(b - a) / (resolution - 1) for a, b in zip(dom.lower, dom.upper)])
    if not gate:
        status = "condition 3 not applicable"
    else:
        tol = SE_BAND * se + 1e-12 * max(1.0, abs(ref_v))
        status = "pass" if margin <= tol else "fail"
    return ArgminResult(U[k].copy(), float(vals[k]), ref_v, margin, se, width, which, gate, status)


def _second_order_term(tup, adj, u, samples=False):
    s = tup.problem.grid.knots[0]
    x = tup.X[0]
    ubar = tup.U[0]
    P = _knot_inputs(tup, adj, 0, samples)[4]
    b = tup.problem.bundle
    dsig = b.sigma(s, x, np.broadcast_to(u, ubar.shape)) - b.sigma(s, x, ubar)
    return 0.5 * P * dsig * dsig


def default_deviation_set(domain: ControlDomain, n_random: int = 8, seed: int = 0
                          ) -> NDArray[np.float64]:
    """Box vertices, edge midpoints, centre and seeded random interior points."""
    lo, hi = domain.lo, domain.hi
    pts = [v for v in domain.vertices()]
    mid = 0.5 * (lo + hi)
    for j in range(domain.dim):
        for end in (lo[j], hi[j]):
            m = mid.copy()
            m[j] = end
            pts.append(m)
    pts.append(mid)
    rng = np.random.default_rng(seed)
    pts.extend(lo + (hi - lo) * rng.random((n_random, domain.dim)))
    return np.unique(np.round(np.array(pts), 12), axis=0)


def local_probes(domain: ControlDomain, center, fractions=(0.05, 0.15)) -> NDArray[np.float64]:
    """One-coordinate moves of ``center`` by the given box-width fractions."""
    center = np.asarray(center, dtype=float)
    width = domain.hi - domain.lo
    out = []
    for j in range(domain.dim):
        for f in fractions:
            for sign in (-1, 1):
                u = center.copy()
                u[j] += sign * f * width[j]
                out.append(np.clip(u, domain.lo, domain.hi))
    return np.array(out)


@dataclass
class DeviationResult:
    u: list[float]
    mean: float
    se: float
    quantile_01: float
    condition2: bool
    direct: SpikeLimitEstimate | None = None


@dataclass
class CellReport:
    t: float
    x: float
    candidate: list[float]
    Y0: float
    p0: float
    q0: float
    P0: float
    Q0: float
    Y0_std: float
    p0_std: float
    P0_std: float
    Y0_se: float
    gate: dict
    deviations: list[DeviationResult]
    argmin: ArgminResult | None
    min_P: float
    min_kappa: float
    error: str | None = None

    @property
    def condition2(self) -> bool:
        return self.error is None and all(d.condition2 for d in self.deviations)


def analyse_cell(problem: ProblemInstance, policy: FeedbackPolicy, n_paths: int, seed: int,
                 deviations=None, argmin: bool = True, basis_degree: int = 3,
                 resolution: int = 201, probes: bool = True, direct: bool = False,
                 epsilon_ladder=None, n_random: int = 8) -> CellReport:
    """Candidate tuple, adjoints and condition checks at one ``(t, x)``."""
    ens = generate_brownian(problem.grid, n_paths, seed)
    tup = solve_candidate(problem, policy, ens, basis_degree)
    adj = solve_adjoints(tup)
    kap = compute_kappa(tup)
    ubar = tup.U[0, 0]
    devs = default_deviation_set(problem.control_domain, n_random, seed) if deviations is None \
        else np.asarray(deviations, dtype=float).reshape(-1, problem.control_domain.dim)
    if probes and deviations is None:
        devs = np.concatenate([devs, local_probes(problem.control_domain, ubar)])
    devs, _ = problem.control_domain.clamp(devs)
    results = []
    for u in devs:
        lim = estimate_spike_limit_adjoint(tup, adj, kap, u)
        smp = delta_hamiltonian(tup, adj, 0, u, samples=True)
        res = DeviationResult(u.tolist(), lim.value, lim.se, float(np.quantile(smp, 0.01)),
                              lim.value >= -SE_BAND * lim.se)
        if direct:
            est = estimate_spike_limit_direct(problem, policy, u, epsilon_ladder=epsilon_ladder,
                                              n_paths=n_paths, seed=seed + 1,
                                              basis_degree=basis_degree)
            est.adjoint = lim
            res.direct = est
        results.append(res)
    gate_ok, gate = determinism_gate(tup, adj)
    gate["passed"] = gate_ok
    am = argmin_hamiltonian(tup, adj, resolution) if argmin else None
    return CellReport(
        problem.grid.t_start, problem.x0, ubar.tolist(), tup.utility.Y0, adj.p0, adj.q0,
        adj.P0, adj.Q0, tup.utility.Y0_std, adj.p0_std, adj.P0_std, tup.utility.y0_se, gate,
        results, am, float(adj.P.min()), kap.min,
    )


@dataclass
class EquilibriumReport:
    cells: list[CellReport]
    t_grid: list[float]
    x_grid: list[float]
    n_deviations: int
    warnings: list[str] = field(default_factory=list)

    @property
    def overall(self) -> str:
        return "pass" if all(c.condition2 for c in self.cells) else "fail"

    @property
    def passed(self) -> bool:
        return self.overall == "pass"

    def failing_cells(self) -> list[CellReport]:
        return [c for c in self.cells if not c.condition2]


def default_scan_grids(problem: ProblemInstance, policy: FeedbackPolicy, n_t: int = 5,
                       n_x: int = 5, n_paths: int = 20_000, seed: int = 0):
    """``n_t`` equispaced times in ``[t, T[`` and ``n_x`` wealth levels over the
    central 80% of the simulated states."""
    g = problem.grid
    t_grid = [g.t_start + k * g.horizon / n_t for k in range(n_t)]
    ens = generate_brownian(g, n_paths, seed)
    X = solve_state_forward(problem, policy, ens).X
    lo, hi = np.quantile(X, [0.1, 0.9])
    x_grid = list(np.linspace(lo, hi, n_x))
    return t_grid, x_grid


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def check_equilibrium(problem: ProblemInstance, policy: FeedbackPolicy, t_grid=None,
                      x_grid=None, deviations=None, n_paths: int = 100_000, seed: int = 0,
                      basis_degree: int = 3, argmin: bool = True, resolution: int = 201,
                      probes: bool = True, direct_cells=(), epsilon_ladder=None,
                      n_random: int = 8) -> EquilibriumReport:
    """Scan ``(t, x)`` cells and test the equilibrium conditions.

    Condition 2 (``E[dcalH(t;t,u)] >= -3 se`` for every deviation) decides
    the verdict; condition 3 is reported where the determinism gate passes.
    ``direct_cells`` lists cell indices that also get the direct estimator.
    """
    notes = []
    if t_grid is None or x_grid is None:
        tg, xg = default_scan_grids(problem, policy, seed=seed)
        t_grid = tg if t_grid is None else t_grid
        x_grid = xg if x_grid is None else x_grid
    if deviations is not None and len(np.asarray(deviations).reshape(-1)) == 0:
        msg = "empty deviation set: condition 2 holds vacuously"
        warnings.warn(msg)
        notes.append(msg)
        devs = np.empty((0, problem.control_domain.dim))
    else:
        devs = deviations
    cells = [(t, x) for t in t_grid for x in x_grid]
    seeds = np.random.SeedSequence(seed).generate_state(len(cells), dtype=np.uint64)
    direct_cells = set(direct_cells)

    def run(k):
        t, x = cells[k]
        try:
            sub = problem.restart(float(t), float(x))
            return analyse_cell(sub, policy, n_paths, int(seeds[k]), devs, argmin, basis_degree,
                                resolution, probes, direct=k in direct_cells,
                                epsilon_ladder=epsilon_ladder, n_random=n_random)
        except (ProblemError, RuntimeError, FloatingPointError) as exc:
            logger.error("cell (t=%g, x=%g) failed: %s", t, x, exc)
            return CellReport(float(t), float(x), [], np.nan, np.nan, np.nan, np.nan, np.nan,
                              np.nan, np.nan, np.nan, np.nan, {}, [], None, np.nan, np.nan,
                              error=str(exc))

    n = _threads()
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            out = list(pool.map(run, range(len(cells))))
    else:
        out = [run(k) for k in range(len(cells))]
    n_dev = len(out[0].deviations) if out else 0
    return EquilibriumReport(out, [float(t) for t in t_grid], [float(x) for x in x_grid], n_dev,
                             notes)
