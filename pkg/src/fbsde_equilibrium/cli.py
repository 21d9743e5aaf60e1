"""Batch front-end: scenario runs, equilibrium scans and convergence studies.

Usage::

    fbsde-eq run config.json
    fbsde-eq converge config.json --axis steps|paths|epsilon
    fbsde-eq presets

Exit codes: 0 when the verdict passes, 2 when it fails, 1 on any execution
or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import compute_kappa, solve_adjoints, solve_candidate
from .bsde import LinearBsdeSpec, solve_linear_bsde_regression
from .equilibrium import (
    THREADS_ENV,
    CellReport,
    EquilibriumReport,
    check_equilibrium,
    default_epsilon_ladder,
    estimate_spike_limit_adjoint,
    estimate_spike_limit_direct,
    standard_error,
)
from .merton import (
    PRESETS,
    build_merton_problem,
    preset_policy,
    preset_setup,
    verify_policy_conditions,
)
from .model import (
    CoefficientBundle,
    ControlDomain,
    ControlPath,
    ProblemError,
    StateDomain,
    TimeGrid,
    build_problem,
)
from .sde import BrownianEnsemble, SimulationError, generate_brownian, solve_state_forward

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_FAIL = 2

AXES = ("steps", "paths", "epsilon")
ORACLES = ("gbm", "linear_bsde", "scenario")
DIRECT_CELL_MODES = ("none", "center", "all")

DEFAULT_LADDERS = {
    "steps": [10, 20, 40, 80],
    "paths": [2_000, 8_000, 32_000, 128_000],
    "epsilon": None,
}

CELL_COLUMNS = [
    "t", "x", "u_zeta", "u_c", "dH_mean", "dH_se", "dH_q01", "condition2",
    "direct_limit", "direct_se", "direct_stabilizes", "agrees",
]
CONVERGENCE_COLUMNS = ["axis", "value", "estimate", "reference", "error", "se"]


class ConfigError(ValueError):
    """Invalid scenario configuration."""


@dataclass
class ScenarioConfig:
    """Materialised run configuration.

    Every field has a default except ``scenario``; :meth:`to_dict` returns the
    complete document that is written into ``run_meta.json``.
    """

    scenario: str
    overrides: dict = field(default_factory=dict)
    T: float = 1.0
    N: int = 100
    x0: float = 1.0
    M: int = 100_000
    seed: int = 0
    antithetic: bool = True
    regression_degree: int = 3
    epsilon_ladder: list[float] | None = None
    t_grid: list[float] | None = None
    x_grid: list[float] | None = None
    n_t: int = 5
    n_x: int = 5
    n_random: int = 8
    probes: bool = True
    argmin_resolution: int = 201
    policy_shift: list[float] = field(default_factory=lambda: [0.0, 0.0])
    direct_cells: object = "center"
    conditions: bool = True
    output_dir: str = "fbsde_out"
    convergence_ladder: list[float] | None = None
    convergence_oracle: str = "scenario"

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        doc = copy.deepcopy(doc)
        if "scenario" not in doc:
            raise ConfigError("missing required field 'scenario'")
        name = doc.pop("scenario")
        if name not in PRESETS:
            raise ConfigError(f"unknown scenario {name!r}; available: {sorted(PRESETS)}")
        kw: dict = {"scenario": name}
        grid = doc.pop("grid", {})
        mc = doc.pop("monte_carlo", {})
        scan = doc.pop("scan", {})
        devs = doc.pop("deviations", {})
        conv = doc.pop("convergence", {})
        for sub, keys in ((grid, ("T", "N")), (mc, ("M", "seed", "antithetic")),
                          (scan, ("n_t", "n_x")), (devs, ("n_random", "probes"))):
            if not isinstance(sub, dict):
                raise ConfigError("grid, monte_carlo, scan and deviations must be objects")
            extra = set(sub) - set(keys) - {"t", "x"}
            if extra:
                raise ConfigError(f"unknown keys {sorted(extra)}")
            kw.update({k: sub[k] for k in keys if k in sub})
        if "t" in scan:
            kw["t_grid"] = scan["t"]
        if "x" in scan:
            kw["x_grid"] = scan["x"]
        if conv:
            if not isinstance(conv, dict) or set(conv) - {"ladder", "oracle"}:
                raise ConfigError("convergence accepts only 'ladder' and 'oracle'")
            if "ladder" in conv:
                kw["convergence_ladder"] = conv["ladder"]
            if "oracle" in conv:
                kw["convergence_oracle"] = conv["oracle"]
        simple = {"overrides", "x0", "regression_degree", "epsilon_ladder", "argmin_resolution",
                  "policy_shift", "direct_cells", "conditions", "output_dir"}
        extra = set(doc) - simple
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        kw.update(doc)
        try:
            cfg = cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(_is_number(self.T) and self.T > 0, "grid.T must be positive")
        need(_is_int(self.N) and 2 <= self.N <= 100_000, "grid.N must be an integer in [2, 1e5]")
        need(_is_int(self.M) and self.M >= 2 and self.M % 2 == 0,
             "monte_carlo.M must be an even integer >= 2")
        need(_is_int(self.seed) and self.seed >= 0, "monte_carlo.seed must be a nonnegative integer")
        need(isinstance(self.antithetic, bool), "monte_carlo.antithetic must be boolean")
        need(_is_number(self.x0) and self.x0 > 0, "x0 must be positive")
        need(_is_int(self.regression_degree) and 1 <= self.regression_degree <= 5,
             "regression_degree must be an integer in [1, 5]")
        need(_is_int(self.argmin_resolution) and self.argmin_resolution >= 3,
             "argmin_resolution must be an integer >= 3")
        need(_is_int(self.n_t) and self.n_t >= 1 and _is_int(self.n_x) and self.n_x >= 1,
             "scan.n_t and scan.n_x must be positive integers")
        need(_is_int(self.n_random) and self.n_random >= 0,
             "deviations.n_random must be a nonnegative integer")
        need(isinstance(self.probes, bool) and isinstance(self.conditions, bool),
             "deviations.probes and conditions must be boolean")
        need(isinstance(self.overrides, dict), "overrides must be an object")
        need(isinstance(self.policy_shift, list) and len(self.policy_shift) == 2
             and all(_is_number(v) for v in self.policy_shift),
             "policy_shift must be a list of two numbers")
        for name in ("epsilon_ladder", "t_grid", "x_grid", "convergence_ladder"):
            v = getattr(self, name)
            need(v is None or (isinstance(v, list) and all(_is_number(e) for e in v)),
                 f"{name} must be a list of numbers")
        if self.epsilon_ladder is not None:
            need(len(self.epsilon_ladder) >= 2, "epsilon_ladder needs at least two entries")
            need(all(0 < e < self.T for e in self.epsilon_ladder),
                 "epsilon_ladder entries must lie in ]0, T[")
        if self.t_grid is not None:
            need(all(0 <= t < self.T for t in self.t_grid), "scan.t entries must lie in [0, T[")
        if self.x_grid is not None:
            need(all(x > 0 for x in self.x_grid), "scan.x entries must be positive")
        need(self.convergence_oracle in ORACLES,
             f"convergence.oracle must be one of {list(ORACLES)}")
        dc = self.direct_cells
        need(dc in DIRECT_CELL_MODES or (isinstance(dc, list) and all(_is_int(k) for k in dc)),
             "direct_cells must be 'none', 'center', 'all' or a list of cell indices")
        need(isinstance(self.output_dir, str) and self.output_dir, "output_dir must be a path")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "overrides": self.overrides,
            "grid": {"T": self.T, "N": self.N},
            "x0": self.x0,
            "monte_carlo": {"M": self.M, "seed": self.seed, "antithetic": self.antithetic},
            "regression_degree": self.regression_degree,
            "epsilon_ladder": self.epsilon_ladder,
            "scan": {"t": self.t_grid, "x": self.x_grid, "n_t": self.n_t, "n_x": self.n_x},
            "deviations": {"n_random": self.n_random, "probes": self.probes},
            "argmin_resolution": self.argmin_resolution,
            "policy_shift": self.policy_shift,
            "direct_cells": self.direct_cells,
            "conditions": self.conditions,
            "output_dir": self.output_dir,
            "convergence": {"ladder": self.convergence_ladder,
                            "oracle": self.convergence_oracle},
        }


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ScenarioConfig.from_dict(doc)


def build_scenario(cfg: ScenarioConfig, n_steps: int | None = None):
    """``(setup, problem, policy)`` for the configured preset."""
    try:
        setup = preset_setup(cfg.scenario, cfg.overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid overrides: {exc}") from exc
    grid = TimeGrid(0.0, cfg.T, n_steps or cfg.N)
    problem = build_merton_problem(setup, grid, cfg.x0)
    policy = preset_policy(cfg.scenario, setup, grid)
    if any(cfg.policy_shift):
        policy = policy.shifted(cfg.policy_shift)
    return setup, problem, policy


# -- JSON / CSV ---------------------------------------------------------

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def dump_json(doc, path: Path) -> None:
    path.write_text(json.dumps(_jsonable(doc), sort_keys=True, indent=2, allow_nan=False) + "\n",
                    encoding="utf-8")


def _direct_dict(est) -> dict | None:
    if est is None:
        return None
    return {
        "epsilons": est.epsilons, "quotients": est.quotients, "quotient_se": est.quotient_se,
        "extrapolated": est.extrapolated, "extrapolated_se": est.extrapolated_se,
        "stabilizes": est.stabilizes, "agrees": est.agrees() if est.adjoint else None,
    }


def cell_to_dict(cell: CellReport) -> dict:
    am = cell.argmin
    return {
        "t": cell.t, "x": cell.x, "candidate": cell.candidate, "error": cell.error,
        "Y0": cell.Y0, "p0": cell.p0, "q0": cell.q0, "P0": cell.P0, "Q0": cell.Q0,
        "Y0_std": cell.Y0_std, "p0_std": cell.p0_std, "P0_std": cell.P0_std,
        "Y0_se": cell.Y0_se, "gate": cell.gate, "min_P": cell.min_P,
        "min_kappa": cell.min_kappa, "condition2": cell.condition2,
        "argmin": None if am is None else {
            "minimizer": am.minimizer, "min_value": am.min_value,
            "value_at_candidate": am.value_at_candidate, "margin": am.margin,
            "margin_se": am.margin_se, "cell_width": am.cell_width, "which": am.which,
            "status": am.status,
        },
        "deviations": [
            {"u": d.u, "mean": d.mean, "se": d.se, "quantile_01": d.quantile_01,
             "condition2": d.condition2, "direct": _direct_dict(d.direct)}
            for d in cell.deviations
        ],
    }


def report_to_dict(report: EquilibriumReport, cfg: ScenarioConfig, extra: dict | None = None
                   ) -> dict:
    doc = {
        "scenario": cfg.scenario,
        "overall": report.overall,
        "t_grid": report.t_grid,
        "x_grid": report.x_grid,
        "n_deviations": report.n_deviations,
        "failing_cells": [[c.t, c.x] for c in report.failing_cells()],
        "warnings": report.warnings,
        "cells": [cell_to_dict(c) for c in report.cells],
    }
    doc.update(extra or {})
    return doc


def cell_rows(report: EquilibriumReport) -> list[list]:
    rows = []
    for c in report.cells:
        for d in c.deviations:
            est = d.direct
            rows.append([
                c.t, c.x, d.u[0], d.u[1], d.mean, d.se, d.quantile_01, d.condition2,
                est.extrapolated if est else "", est.extrapolated_se if est else "",
                est.stabilizes if est else "", est.agrees() if est else "",
            ])
    return rows


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else "nan"
    return str(v)


def _versions() -> dict:
    import scipy

    return {"fbsde_equilibrium": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__, "python": platform.python_version()}


def _write_meta(out: Path, cfg: ScenarioConfig, command: str, timings: dict) -> None:
    import os

    dump_json({"command": command, "config": cfg.to_dict(), "seed": cfg.seed,
               "versions": _versions(), "timings_seconds": timings,
               "threads": os.environ.get(THREADS_ENV, "1")}, out / "run_meta.json")


# -- run -----------------------------------------------------------------

def _direct_indices(cfg: ScenarioConfig, n_t: int, n_x: int) -> list[int]:
    if cfg.direct_cells == "none":
        return []
    if cfg.direct_cells == "all":
        return list(range(n_t * n_x))
    if cfg.direct_cells == "center":
        return [(n_t // 2) * n_x + n_x // 2]
    return [int(k) for k in cfg.direct_cells]


def run_scenario(cfg: ScenarioConfig, output_dir: str | Path | None = None) -> int:
    """Scan the configured scenario and write the report artifacts.

    Writes ``report.json``, ``tables/cells.csv`` and ``run_meta.json``.
    Returns the exit code.
    """
    out = Path(output_dir or cfg.output_dir)
    t0 = time.perf_counter()
    setup, problem, policy = build_scenario(cfg)
    t_grid, x_grid = cfg.t_grid, cfg.x_grid
    if t_grid is None or x_grid is None:
        from .equilibrium import default_scan_grids

        tg, xg = default_scan_grids(problem, policy, cfg.n_t, cfg.n_x,
                                    n_paths=min(cfg.M, 20_000), seed=cfg.seed)
        t_grid = tg if t_grid is None else t_grid
        x_grid = xg if x_grid is None else x_grid
    direct = _direct_indices(cfg, len(t_grid), len(x_grid))
    ladder = cfg.epsilon_ladder or default_epsilon_ladder(cfg.T)
    report = check_equilibrium(
        problem, policy, t_grid, x_grid, None, cfg.M, cfg.seed, cfg.regression_degree,
        True, cfg.argmin_resolution, cfg.probes, direct, ladder, cfg.n_random,
    )
    t_scan = time.perf_counter() - t0
    extra = {}
    if cfg.conditions:
        v = verify_policy_conditions(problem, policy, 0.0, cfg.x0, cfg.M, cfg.seed + 1,
                                     cfg.regression_degree)
        extra["policy_conditions"] = {
            "t": 0.0, "x": cfg.x0, "residual_i": v.residual_i, "residual_ii": v.residual_ii,
            "residual_iii": v.residual_iii, "passed": v.passed, "details": v.details,
        }
    (out / "tables").mkdir(parents=True, exist_ok=True)
    dump_json(report_to_dict(report, cfg, extra), out / "report.json")
    write_csv(out / "tables" / "cells.csv", CELL_COLUMNS, cell_rows(report))
    _write_meta(out, cfg, "run", {"scan": t_scan, "total": time.perf_counter() - t0})
    if any(c.error for c in report.cells):
        return EXIT_ERROR
    return EXIT_PASS if report.passed else EXIT_FAIL


# -- convergence ---------------------------------------------------------

def fit_loglog_slope(xs, ys) -> float:
    """Least-squares slope of ``log y`` on ``log x``."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def gbm_problem(n_steps: int, drift: float = 1.0, vol: float = 0.2, T: float = 1.0,
                x0: float = 1.0):
    """Uncontrolled geometric Brownian motion used as a weak-order oracle."""
    bundle = CoefficientBundle(
        b=lambda s, x, u: drift * x,
        sigma=lambda s, x, u: vol * x,
        f=lambda s, x, u, y, z, t: 0.0 * x,
        h=lambda x, t: x,
        name="gbm",
    )
    return build_problem(bundle, TimeGrid(0.0, T, n_steps), ControlDomain((0.0,), (1.0,)),
                         StateDomain(0.0, np.inf), x0, scheme="euler", check=False)


def _steps_row_gbm(n: int, cfg: ScenarioConfig, drift=1.0, vol=0.2):
    prob = gbm_problem(n, drift, vol, cfg.T, cfg.x0)
    ens = generate_brownian(prob.grid, cfg.M, cfg.seed)
    ctrl = ControlPath(np.zeros((n + 1, cfg.M, 1)))
    X = solve_state_forward(prob, ctrl, ens).X[-1]
    W = ens.increments.sum(axis=0)
    exact = cfg.x0 * np.exp((drift - 0.5 * vol**2) * cfg.T + vol * W)
    d = X - exact
    ref = cfg.x0 * math.exp(drift * cfg.T)
    return float(X.mean()), ref, abs(float(d.mean())), float(d.std(ddof=1) / math.sqrt(cfg.M))


def _steps_row_linear(n: int, cfg: ScenarioConfig, alpha=0.5, beta=1.0, n_blocks: int = 4):
    """Regression ``Y0`` against the closed form on the same paths.

    The paths are split into ``n_blocks`` independent blocks so the standard
    error refers to the paired error rather than to ``Y0`` itself.
    """
    grid = TimeGrid(0.0, cfg.T, n)
    ens = generate_brownian(grid, cfg.M, cfg.seed)
    g = math.exp(beta * cfg.T)
    est, ref, err = [], [], []
    for cols in np.array_split(np.arange(cfg.M), n_blocks):
        sub = BrownianEnsemble(grid, ens.seed, ens.increments[:, cols])
        xi = 1.0 + sub.increments.sum(axis=0)
        sol = solve_linear_bsde_regression(LinearBsdeSpec(alpha, beta, 0.0, xi), sub,
                                           cfg.regression_degree)
        exact = float((g * xi + alpha * (g - 1.0) / beta).mean())
        est.append(sol.Y0)
        ref.append(exact)
        err.append(sol.Y0 - exact)
    return float(np.mean(est)), float(np.mean(ref)), abs(float(np.mean(err))), \
        float(np.std(err, ddof=1) / math.sqrt(n_blocks))


def _utility_y0(cfg: ScenarioConfig, n_steps: int, n_paths: int, plain: bool = False):
    """Candidate utility ``Y(0;0)`` and its standard error.

    ``plain=True`` returns the pathwise cost average instead, whose per-path
    variance does not depend on ``n_paths`` (the control-variate estimate's
    does, through the fitted martingale).
    """
    _, problem, policy = build_scenario(cfg, n_steps)
    ens = generate_brownian(problem.grid, n_paths, cfg.seed, cfg.antithetic)
    tup = solve_candidate(problem, policy, ens, cfg.regression_degree)
    if plain:
        c = tup.utility.cost_samples
        return float(c.mean()), standard_error(c, ens.antithetic)
    return tup.utility.Y0, tup.utility.y0_se


def convergence_study(cfg: ScenarioConfig, axis: str) -> list[list]:
    """One row per ladder point plus a final row with the fitted slope.

    Columns are ``axis, value, estimate, reference, error, se``; the slope row
    carries ``"slope"`` in the first column and the log-log slope of ``error``
    against ``value`` in the error column.
    """
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {list(AXES)}")
    ladder = cfg.convergence_ladder or DEFAULT_LADDERS[axis]
    if axis == "epsilon" and ladder is None:
        ladder = [0.16 * cfg.T, 0.08 * cfg.T, 0.04 * cfg.T, 0.02 * cfg.T]
    if len(ladder) < 3:
        raise ConfigError("convergence ladder needs at least 3 points")
    rows = []
    if axis == "steps":
        if any(not float(n).is_integer() or n < 2 for n in ladder):
            raise ConfigError("steps ladder must hold integers >= 2")
        oracle = cfg.convergence_oracle
        if oracle == "scenario":
            n_ref = 4 * int(max(ladder))
            ref, ref_se = _utility_y0(cfg, n_ref, cfg.M)
        for n in ladder:
            n = int(n)
            if oracle == "gbm":
                est, r, err, se = _steps_row_gbm(n, cfg)
            elif oracle == "linear_bsde":
                est, r, err, se = _steps_row_linear(n, cfg)
            else:
                est, se = _utility_y0(cfg, n, cfg.M)
                r, err = ref, abs(est - ref)
            rows.append([axis, n, est, r, err, se])
    elif axis == "paths":
        if any(not float(m).is_integer() or m < 2 or int(m) % 2 for m in ladder):
            raise ConfigError("paths ladder must hold even integers")
        for m in ladder:
            est, se = _utility_y0(cfg, cfg.N, int(m), plain=True)
            rows.append([axis, int(m), est, "", se, se])
    else:
        _, problem, policy = build_scenario(cfg)
        ens = generate_brownian(problem.grid, cfg.M, cfg.seed, cfg.antithetic)
        tup = solve_candidate(problem, policy, ens, cfg.regression_degree)
        adj = solve_adjoints(tup)
        dev = _epsilon_deviation(tup)
        lim = estimate_spike_limit_adjoint(tup, adj, compute_kappa(tup), dev)
        est = estimate_spike_limit_direct(problem, policy, dev, epsilon_ladder=list(ladder),
                                          n_paths=cfg.M, seed=cfg.seed + 1,
                                          antithetic=cfg.antithetic,
                                          basis_degree=cfg.regression_degree)
        for e, q, se in zip(est.epsilons, est.quotients, est.quotient_se):
            rows.append([axis, e, q, lim.value, abs(q - lim.value), se])
    errs = [r[4] for r in rows]
    vals = [r[1] for r in rows]
    slope = fit_loglog_slope(vals, errs) if all(e > 0 for e in errs) else float("nan")
    rows.append(["slope", "", "", "", slope, ""])
    return rows


def _epsilon_deviation(tup) -> np.ndarray:
    """Consumption moved by a fifth of the box width, kept inside the box."""
    dom = tup.problem.control_domain
    u = tup.U[0, 0].copy()
    w = 0.2 * (dom.hi[1] - dom.lo[1])
    u[1] = u[1] + w if u[1] + w <= dom.hi[1] else u[1] - w
    return u


def run_convergence(cfg: ScenarioConfig, axis: str, output_dir: str | Path | None = None) -> int:
    out = Path(output_dir or cfg.output_dir)
    t0 = time.perf_counter()
    rows = convergence_study(cfg, axis)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    write_csv(out / "tables" / f"convergence_{axis}.csv", CONVERGENCE_COLUMNS, rows)
    _write_meta(out, cfg, f"converge --axis {axis}", {"total": time.perf_counter() - t0})
    return EXIT_PASS


# -- entry point ---------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbsde-eq", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="equilibrium scan of a scenario")
    r.add_argument("config")
    r.add_argument("-o", "--output-dir", default=None)
    c = sub.add_parser("converge", help="convergence study along one axis")
    c.add_argument("config")
    c.add_argument("--axis", required=True, choices=AXES)
    c.add_argument("-o", "--output-dir", default=None)
    sub.add_parser("presets", help="list built-in scenarios")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PASS if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets":
        for name in sorted(PRESETS):
            print(f"{name}\t{PRESETS[name]}")
        return EXIT_PASS
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            return run_scenario(cfg, args.output_dir)
        return run_convergence(cfg, args.axis, args.output_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ProblemError, SimulationError, ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
