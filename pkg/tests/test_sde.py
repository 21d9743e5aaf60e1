from __future__ import annotations

import numpy as np
import pytest

from conftest import merton_case
from fbsde_equilibrium.model import (
    CoefficientBundle,
    ControlDomain,
    ControlPath,
    ProblemError,
    StateDomain,
    TimeGrid,
    build_problem,
)
from fbsde_equilibrium.sde import (
    BLOCK_SIZE,
    BrownianEnsemble,
    SimulationError,
    SpikeWindow,
    apply_spike_variation,
    generate_brownian,
    solve_state_forward,
    solve_variational_first,
)

BOX = ControlDomain((-1.0, 0.0), (1.0, 1.0))


def test_same_seed_same_increments(grid20):
    a = generate_brownian(grid20, 3000, seed=9)
    b = generate_brownian(grid20, 3000, seed=9)
    np.testing.assert_array_equal(a.increments, b.increments)
    c = generate_brownian(grid20, 3000, seed=10)
    assert not np.array_equal(a.increments, c.increments)


def test_paths_do_not_depend_on_ensemble_size(grid20):
    small = generate_brownian(grid20, BLOCK_SIZE, seed=3)
    large = generate_brownian(grid20, 3 * BLOCK_SIZE + 5, seed=3)
    np.testing.assert_array_equal(small.increments, large.increments[:, :BLOCK_SIZE])


def test_blocks_are_distinct(grid20):
    ens = generate_brownian(grid20, 2 * BLOCK_SIZE, seed=3)
    a, b = ens.increments[:, :BLOCK_SIZE], ens.increments[:, BLOCK_SIZE:]
    corr = np.corrcoef(a.ravel(), b.ravel())[0, 1]
    assert abs(corr) < 0.03


def test_per_step_variance_band(grid100):
    ens = generate_brownian(grid100, 100_000, seed=1)
    var = ens.increments.var(axis=1)
    assert np.all((var > 0.0097) & (var < 0.0103))
    mean = ens.increments.mean(axis=1)
    assert np.all(np.abs(mean) < 3 * np.sqrt(0.01 / 100_000) * 1.5)


def test_antithetic_pairs_mirror(grid20):
    ens = generate_brownian(grid20, 10, seed=0, antithetic=True)
    np.testing.assert_array_equal(ens.increments[:, 0::2], -ens.increments[:, 1::2])
    with pytest.raises(ValueError):
        generate_brownian(grid20, 9, seed=0, antithetic=True)


def test_empty_ensemble_rejected(grid20):
    with pytest.raises(ValueError):
        generate_brownian(grid20, 0, seed=0)


def test_brownian_starts_at_zero(grid20):
    w = generate_brownian(grid20, 50, seed=0).brownian()
    assert w.shape == (21, 50)
    np.testing.assert_array_equal(w[0], 0.0)


def test_disk_cache_round_trip(grid20, tmp_path):
    a = generate_brownian(grid20, 100, seed=4, cache_dir=tmp_path)
    assert len(list(tmp_path.iterdir())) == 1
    b = generate_brownian(grid20, 100, seed=4, cache_dir=tmp_path)
    np.testing.assert_array_equal(a.increments, b.increments)


def test_riskless_wealth_is_deterministic(grid100):
    _, problem, _ = merton_case("merton_exponential", grid100)
    ens = generate_brownian(grid100, 1000, seed=2)
    ctrl = ControlPath.constant([0.0, 0.0], 101, 1000)
    X = solve_state_forward(problem, ctrl, ens).X
    np.testing.assert_allclose(X[-1], np.exp(0.03), rtol=1e-12)


def test_gbm_mean(grid100):
    # rho = 0.07 gives a risk premium of 0.04; E X(T) = exp(r + 0.04 * 0.5)
    _, problem, _ = merton_case("merton_exponential", grid100,
                                overrides={"market": {"rho": 0.07}})
    ens = generate_brownian(grid100, 100_000, seed=6)
    ctrl = ControlPath.constant([0.5, 0.0], 101, 100_000)
    XT = solve_state_forward(problem, ctrl, ens).X[-1]
    se = XT.std(ddof=1) / np.sqrt(XT.size)
    assert abs(XT.mean() - np.exp(0.05)) < 3 * se


def frozen_problem(grid):
    zero = lambda s, x, u: np.zeros(np.shape(x))
    bundle = CoefficientBundle(zero, zero, lambda s, x, u, y, z, t: np.zeros(np.shape(x)),
                               lambda x, t: x)
    return build_problem(bundle, grid, BOX, StateDomain(), 0.7)


def test_frozen_dynamics(grid20):
    problem = frozen_problem(grid20)
    ens = generate_brownian(grid20, 200, seed=0)
    X = solve_state_forward(problem, ControlPath.constant([0.0, 0.0], 21, 200), ens).X
    np.testing.assert_array_equal(X, 0.7)


def test_log_euler_wealth_positive(baseline100):
    _, problem, policy = baseline100
    ens = generate_brownian(problem.grid, 20_000, seed=8)
    st = solve_state_forward(problem, policy, ens)
    assert st.X.min() > 0
    assert st.control.clamp_count == 0


def test_feedback_policy_clamps_are_counted(baseline20):
    _, problem, policy = baseline20
    ens = generate_brownian(problem.grid, 100, seed=8)
    st = solve_state_forward(problem, policy.shifted([2.0, 0.0]), ens)
    np.testing.assert_array_equal(st.control.values[..., 0], 1.0)
    assert st.control.clamp_count == 21 * 100


def test_grid_mismatch_rejected(baseline20, grid100):
    _, problem, policy = baseline20
    with pytest.raises(ProblemError):
        solve_state_forward(problem, policy, generate_brownian(grid100, 10, seed=0))


def test_euler_leaving_domain_raises(grid20):
    bundle = CoefficientBundle(lambda s, x, u: -5.0 * np.ones_like(x),
                               lambda s, x, u: np.zeros_like(x),
                               lambda s, x, u, y, z, t: np.zeros_like(x), lambda x, t: x)
    problem = build_problem(bundle, grid20, BOX, StateDomain(0.0, np.inf), 1.0)
    with pytest.raises(SimulationError):
        solve_state_forward(problem, ControlPath.constant([0.0, 0.0], 21, 50),
                            generate_brownian(grid20, 50, seed=0))


def test_euler_strong_order(baseline20):
    # Euler against the exact log-Euler solution on common noise
    _, problem, _ = baseline20
    fine = TimeGrid(0.0, 1.0, 256)
    ens = generate_brownian(fine, 4000, seed=12)
    errs = []
    steps = (16, 32, 64, 128)
    for n in steps:
        g = TimeGrid(0.0, 1.0, n)
        dW = ens.increments.reshape(n, 256 // n, -1).sum(axis=1)
        sub = BrownianEnsemble(g, 12, dW)
        p = problem.restart(0.0, 1.0, n)
        ctrl = ControlPath.constant([1.0, 0.2], n + 1, 4000)
        e = solve_state_forward(p, ctrl, sub, scheme="euler").X[-1]
        x = solve_state_forward(p, ctrl, sub, scheme="log_euler").X[-1]
        errs.append(np.mean(np.abs(e - x)))
    slope = np.polyfit(np.log(1.0 / np.array(steps)), np.log(errs), 1)[0]
    assert 0.4 < slope < 1.1


def test_spike_window_snapping(grid100):
    w = SpikeWindow.on_grid(grid100, 0.3, 0.02)
    assert (w.first, w.n_knots) == (30, 2)
    assert w.snapped_epsilon == pytest.approx(0.02)
    late = SpikeWindow.on_grid(grid100, 1.0, 0.05)
    assert late.first + late.n_knots == 100


@pytest.mark.parametrize("eps", [0.0, 1.0, 1.5, 0.001])
def test_spike_window_rejects_bad_epsilon(grid100, eps):
    with pytest.raises(ProblemError):
        SpikeWindow.on_grid(grid100, 0.0, eps)


def test_null_spike_is_identity(grid20):
    base = ControlPath(np.random.default_rng(0).random((21, 5, 2)))
    w = SpikeWindow.on_grid(grid20, 0.1, 0.1)
    out = apply_spike_variation(base, base, w)
    np.testing.assert_array_equal(out.values, base.values)


def test_spike_changes_exactly_window_knots(grid100):
    base = ControlPath.constant([0.3, 0.4], 101, 4)
    w = SpikeWindow.on_grid(grid100, 0.5, 0.02)
    out = apply_spike_variation(base, [1.0, 0.0], w)
    changed = np.any(out.values != base.values, axis=(1, 2))
    assert changed.sum() == 2
    assert list(np.flatnonzero(changed)) == [50, 51]


def test_variational_process_vanishes_for_null_deviation(baseline20):
    _, problem, policy = baseline20
    ens = generate_brownian(problem.grid, 500, seed=1)
    base = solve_state_forward(problem, policy, ens)
    w = SpikeWindow.on_grid(problem.grid, 0.0, 0.1)
    X1 = solve_variational_first(problem, base, base.control, w, ens)
    np.testing.assert_array_equal(X1, 0.0)
