"""Acceptance criteria 1-10 at desk scale (N = 100, M = 1e5 unless noted).

Each test logs one ``criterion <n>: PASS|FAIL`` line; the lines are repeated
in the terminal summary.
"""

from __future__ import annotations

import numpy as np
import pytest

from conftest import merton_case, relerr
from oracles import merton_fraction as oracle_fraction
from fbsde_equilibrium.adjoint import compute_kappa, solve_adjoints, solve_candidate
from fbsde_equilibrium.bsde import (
    LinearBsdeSpec,
    comparison_check,
    solve_linear_bsde_explicit,
    solve_linear_bsde_regression,
)
from fbsde_equilibrium.cli import ScenarioConfig, convergence_study
from fbsde_equilibrium.equilibrium import (
    analyse_cell,
    check_equilibrium,
    corollary_hypotheses,
    default_scan_grids,
    delta_hamiltonian,
    estimate_spike_limit_adjoint,
    estimate_spike_limit_direct,
)
from fbsde_equilibrium.merton import (
    PRESETS,
    verify_policy_conditions,
)
from fbsde_equilibrium.model import TimeGrid
from fbsde_equilibrium.sde import (
    SpikeWindow,
    apply_spike_variation,
    generate_brownian,
    solve_state_forward,
    solve_variational_first,
)

pytestmark = pytest.mark.slow

M = 100_000
GRID = TimeGrid(0.0, 1.0, 100)


def _linear_specs(ens):
    W = ens.brownian()
    s = GRID.knots
    WT = W[-1]
    return {
        "constant source, discount": LinearBsdeSpec(alpha=1.0, beta=0.2, xi=1.0),
        "brownian terminal, volatility weight": LinearBsdeSpec(alpha=0.5, beta=-0.3, gamma=0.4,
                                                              xi=1.0 + WT),
        "quadratic terminal": LinearBsdeSpec(alpha=0.1, beta=0.5, gamma=-0.2, xi=WT**2),
        "time-varying coefficients": LinearBsdeSpec(alpha=np.cos(s), beta=0.3 * np.sin(3 * s),
                                                    gamma=0.5 * s, xi=np.exp(0.5 * WT)),
        "path source": LinearBsdeSpec(alpha=1.0 + W**2, beta=0.1, gamma=0.3, xi=np.maximum(WT, 0)),
        "call-like terminal": LinearBsdeSpec(alpha=0.0, beta=-0.05, gamma=0.2,
                                             xi=np.maximum(np.exp(0.3 * WT) - 1.0, 0.0) + 0.1),
    }


def test_criterion_1_linear_oracle_equivalence(acceptance_log):
    ens = generate_brownian(GRID, M, seed=101)
    worst = 0.0
    for name, spec in _linear_specs(ens).items():
        reg = solve_linear_bsde_regression(spec, ens, basis_degree=3)
        exp = solve_linear_bsde_explicit(spec, ens, basis_degree=3)
        worst = max(worst, relerr(reg.Y0, exp.Y0))
    ok = worst <= 0.01
    acceptance_log(1, ok, f"6 specs, max relative error {worst:.2e} (tol 1e-2)")
    assert ok


def test_criterion_2_comparison_property(acceptance_log):
    rng = np.random.default_rng(202)
    ens = generate_brownian(GRID, M, seed=202)
    W = ens.brownian()
    s = GRID.knots[:, None]
    worst = np.inf
    statuses = []
    for _ in range(20):
        b0, b1, g0, g1 = rng.uniform(-1, 1, 4)
        a0, a1, x0, x1 = rng.uniform(0, 1, 4)
        spec = LinearBsdeSpec(
            alpha=a0 * W**2 + a1 * (1 + np.sin(5 * s)),
            beta=b0 + b1 * GRID.knots,
            gamma=g0 * np.cos(2 * GRID.knots) + g1,
            xi=x0 * np.maximum(W[-1], 0) + x1 * np.exp(-W[-1] ** 2),
        )
        v = comparison_check(spec, ens)
        statuses.append(v.status)
        worst = min(worst, v.min_value)
    ok = all(st == "pass" for st in statuses) and worst >= -1e-8
    acceptance_log(2, ok, f"20 random nonnegative specs, min Xi {worst:.3e} (tol -1e-8)")
    assert ok


def test_criterion_3_delta_hamiltonian_vanishes(acceptance_log):
    worst = 0.0
    for name in sorted(PRESETS):
        _, problem, policy = merton_case(name, GRID)
        ens = generate_brownian(GRID, M, seed=303)
        tup = solve_candidate(problem, policy, ens)
        adj = solve_adjoints(tup)
        for i in (0, 37, 99):
            worst = max(worst, float(np.abs(delta_hamiltonian(tup, adj, i, tup.U[i])).max()))
        worst = max(worst, float(np.abs(delta_hamiltonian(tup, adj, 0, tup.U[0], True)).max()))
    ok = worst == 0.0
    acceptance_log(3, ok, f"3 scenarios, max |dH(u_bar)| = {worst:.1e} per path")
    assert ok


def _deviations(ubar, name):
    z, c = ubar
    if name == "merton_exponential":
        return [(z + 0.3, c), (z, c + 0.2), (-0.5, 0.2), (1.0, 1.0), (z - 0.2, c - 0.1)]
    return [(z + 0.3, c), (z - 0.2, 0.9), (-0.5, 0.2), (1.0, 0.5), (z, 0.6)]


def test_criterion_4_spike_limit_agreement(acceptance_log):
    details = []
    ok = True
    for name in ("merton_exponential", "merton_hyperbolic_K1"):
        _, problem, policy = merton_case(name, GRID)
        ens = generate_brownian(GRID, M, seed=404)
        tup = solve_candidate(problem, policy, ens)
        adj = solve_adjoints(tup)
        kap = compute_kappa(tup)
        n_ok = 0
        for u in _deviations(tup.U[0, 0], name):
            lim = estimate_spike_limit_adjoint(tup, adj, kap, u)
            est = estimate_spike_limit_direct(problem, policy, u, n_paths=M, seed=405)
            est.adjoint = lim
            good = est.agrees() and est.stabilizes
            n_ok += good
            if not good:
                details.append(f"{name} u={np.round(u, 3).tolist()} adj {lim.value:.5f} "
                               f"direct {est.extrapolated:.5f}+-{est.extrapolated_se:.1e}")
        ok &= n_ok >= 4
        details.insert(0, f"{name} {n_ok}/5 agree and stabilize")
    acceptance_log(4, ok, "; ".join(details))
    assert ok


def test_criterion_5_maximum_principle_round_trip(acceptance_log):
    _, problem, policy = merton_case("merton_exponential", GRID)
    m = M
    t_grid, x_grid = default_scan_grids(problem, policy, 5, 5, n_paths=m, seed=5)
    rep = check_equilibrium(problem, policy, t_grid, x_grid, n_paths=m, seed=5)
    zeta = oracle_fraction()
    off = []
    for cell in rep.cells:
        am = cell.argmin
        target = np.array([zeta, float(policy.consumption(cell.t))])
        if am.status == "condition 3 not applicable":
            continue
        if np.any(np.abs(am.minimizer - target) > am.cell_width * (1 + 1e-9)):
            off.append((cell.t, cell.x, am.minimizer.tolist()))
    bad = policy.shifted([0.3, 0.0])
    violations = 0
    for t, x in ((0.0, 1.0), (0.4, 0.9)):
        cell = analyse_cell(problem.restart(t, x), bad, m, seed=55, probes=True)
        violations += any(d.mean < -3 * d.se for d in cell.deviations)
    ok = rep.passed and len(rep.cells) == 25 and not off and violations >= 1
    acceptance_log(5, ok, f"baseline {rep.overall} on {len(rep.cells)} cells, argmin off-cell at "
                          f"{len(off)}, perturbed policy violated at {violations}/2 cells")
    assert ok


def test_criterion_6_second_order_sign(acceptance_log):
    worst = np.inf
    hyp = True
    for name in sorted(PRESETS):
        _, problem, policy = merton_case(name, GRID)
        ens = generate_brownian(GRID, M, seed=606)
        tup = solve_candidate(problem, policy, ens)
        adj = solve_adjoints(tup)
        hyp &= corollary_hypotheses(tup, adj)
        worst = min(worst, float(adj.P.min()))
    ok = hyp and worst >= -1e-8
    acceptance_log(6, ok, f"convex h and G(.,0,0) >= 0 on 3 scenarios: {hyp}, min P {worst:.4f}")
    assert ok


def test_criterion_7_taylor_orders(acceptance_log):
    _, problem, policy = merton_case("merton_exponential", GRID)
    ens = generate_brownian(GRID, M, seed=707)
    base = solve_state_forward(problem, policy, ens, scheme="euler")
    dev = np.array([1.0, 0.2])
    eps = [0.08, 0.04, 0.02, 0.01]
    first, rem = [], []
    for e in eps:
        w = SpikeWindow.on_grid(GRID, 0.3, e)
        X1 = solve_variational_first(problem, base, dev, w, ens)
        spiked = apply_spike_variation(base.control, dev, w, problem.control_domain)
        Xe = solve_state_forward(problem, spiked, ens, scheme="euler").X
        first.append((X1**2).mean(axis=1).max())
        rem.append(((Xe - base.X - X1) ** 2).mean(axis=1).max())
    k1 = np.polyfit(np.log(eps), np.log(first), 1)[0]
    k2 = np.polyfit(np.log(eps), np.log(rem), 1)[0]
    ok = abs(k1 - 1) <= 0.25 and abs(k2 - 2) <= 0.25
    acceptance_log(7, ok, f"slopes {k1:.3f} (target 1) and {k2:.3f} (target 2)")
    assert ok


def test_criterion_8_policy_conditions(acceptance_log):
    _, problem, policy = merton_case("merton_exponential", GRID)
    res = []
    for t, x in ((0.0, 1.0), (0.4, 0.8)):
        v = verify_policy_conditions(problem, policy, t, x, n_paths=M)
        res.append(max(v.residual_i, v.residual_ii, v.residual_iii))
    setup_h, problem_h, precommitted = merton_case("merton_hyperbolic_K1", GRID)
    v_pre = verify_policy_conditions(problem_h, precommitted, 0.5, 1.0, n_paths=M)
    # the exponential-optimal policy is interior, so this isolates the discount effect
    v_exp = verify_policy_conditions(problem_h, policy, 0.5, 1.0, n_paths=M)
    ok = max(res) <= 0.02 and not v_pre.passed_ii and not v_exp.passed_ii
    acceptance_log(8, ok, f"baseline max residual {max(res):.2e}; hyperbolic at t=0.5 residual (ii) "
                          f"{v_pre.residual_ii:.3f} precommitted, {v_exp.residual_ii:.3f} "
                          "exponential-optimal (both must exceed 0.02)")
    assert ok


def test_criterion_9_determinism(acceptance_log):
    worst_regressed = 0.0
    worst_seed = 0.0
    for name in ("merton_exponential", "merton_recursive_beta_gamma"):
        _, problem, policy = merton_case(name, GRID)
        vals = []
        for seed in range(5):
            ens = generate_brownian(GRID, M, seed=900 + seed)
            tup = solve_candidate(problem, policy, ens)
            adj = solve_adjoints(tup)
            for v, sd in ((tup.utility.Y0, tup.utility.Y0_std), (adj.p0, adj.p0_std),
                          (adj.P0, adj.P0_std)):
                worst_regressed = max(worst_regressed, sd / abs(v))
            vals.append([tup.utility.Y0, adj.p0, adj.P0])
        vals = np.array(vals)
        worst_seed = max(worst_seed, float((vals.std(axis=0, ddof=1) / np.abs(vals.mean(axis=0))).max()))
    ok = worst_regressed <= 0.01 and worst_seed <= 0.01
    acceptance_log(9, ok, f"regressed cross-path std {worst_regressed:.1e}, cross-seed std "
                          f"{worst_seed:.1e} of magnitude (tol 1e-2)")
    assert ok


def test_criterion_10_convergence_rates(acceptance_log):
    cfg = ScenarioConfig(scenario="merton_exponential", M=M, seed=1010,
                         convergence_ladder=[10, 20, 40, 80])
    slopes = {}
    for oracle in ("gbm", "linear_bsde"):
        cfg.convergence_oracle = oracle
        slopes[oracle] = convergence_study(cfg, "steps")[-1][4]
    cfg.convergence_ladder = [2_000, 8_000, 32_000, 128_000]
    slopes["paths"] = convergence_study(cfg, "paths")[-1][4]
    ok = abs(slopes["gbm"] + 1) <= 0.25 and abs(slopes["linear_bsde"] + 1) <= 0.25 \
        and abs(slopes["paths"] + 0.5) <= 0.25
    acceptance_log(10, ok, "weak slopes gbm {gbm:.3f}, linear BSDE {linear_bsde:.3f}; "
                           "MC se slope {paths:.3f}".format(**slopes))
    assert ok
