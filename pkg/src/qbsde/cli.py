"""Command-line entry point: ``qbsde --config experiment.json``.

Each experiment writes ``report.txt``, one CSV per surface or table, and
``manifest.csv`` into the output directory.  Exit status: 0 pass, 2 a
numerical tolerance failed, 1 configuration or integrability problem.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import platform
import sys
from dataclasses import dataclass, field

import numpy as np
import scipy

from . import __version__
from .closed_form import (comparison_check, envelope_bounds, log_bsde_residual, log_transform_ln1p,
                          pure_quadratic_surface, quadratic_log_map, scalar_log_bound_violations,
                          solve_pure_quadratic, solve_theta_linear, solve_zero_generator)
from .errors import ConfigError, IntegrabilityError, PreconditionError, QbsdeError, RangeError
from .function_model import FunctionSpec, from_dict, process_from
from .mc_engine import TimeGrid, lsmc_solve, simulate_paths
from .pde_oracle import PdeGrid, convergence_study, solve_pde, write_convergence_csv
from .scenario import (GeneratorSpec, TerminalSpec, alpha, beta_abs_y, check_A1, check_A3,
                       check_domination, dominating_coefficient, envelope_pair, estimate_A2,
                       estimate_A4, f_zsq)
from .transforms import (build_u, build_v, build_w, check_lipschitz_sandwich, lipschitz_bounds,
                         ode_residual)

EXPERIMENTS = ("transform-check", "pure-quadratic", "domination-solve", "theta-linear",
               "log-equivalence", "comparison", "assumptions", "convergence")

NUMERIC_DEFAULTS = {
    "R": 3.0, "n": 2048, "M": 100_000, "N": 50, "K": None, "nx": 401, "nt": None,
    "gh_order": 12, "p": None, "workers": 1,
    "tol_quadrature": 1e-6, "tol_pde": 1e-3, "tol_lsmc": 2e-2, "tol_residual": 1e-4,
    "tol_log": 1e-2, "tol_comparison": 1e-8, "lattice_nt": 21, "lattice_nx": 21, "lattice_x": 2.0,
}

REQUIRED = {
    "transform-check": ("f",),
    "pure-quadratic": ("f", "g"),
    "domination-solve": ("generator", "g"),
    "theta-linear": ("theta", "g"),
    "log-equivalence": ("gamma", "g"),
    "comparison": ("f", "g", "f2", "g2"),
    "assumptions": ("f", "g"),
    "convergence": ("g",),
}


@dataclass
class ExperimentConfig:
    experiment: str
    scenario: dict
    numerics: dict
    seed: int = 0
    out_dir: str = "out"
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        exp = d.get("experiment")
        if exp not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {exp!r}; choose one of {', '.join(EXPERIMENTS)}")
        scen = d.get("scenario", {})
        if not isinstance(scen, dict):
            raise ConfigError("scenario must be an object")
        missing = [k for k in REQUIRED[exp] if k not in scen]
        if missing:
            raise ConfigError(f"experiment {exp} needs scenario fields: {', '.join(missing)}")
        num = dict(NUMERIC_DEFAULTS)
        unknown = set(d.get("numerics", {})) - set(NUMERIC_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown numerics fields: {', '.join(sorted(unknown))}")
        num.update(d.get("numerics", {}))
        for key, val in num.items():
            if val is None:
                continue
            if not isinstance(val, (int, float)) or isinstance(val, bool) or not val > 0:
                raise ConfigError(f"numerics.{key} must be a positive number")
        for key in ("n", "M", "N", "K", "nx", "nt", "gh_order", "workers", "lattice_nt", "lattice_nx"):
            if num[key] is not None:
                if float(num[key]) != int(num[key]):
                    raise ConfigError(f"numerics.{key} must be an integer")
                num[key] = int(num[key])
        T = scen.get("T", 1.0)
        if not isinstance(T, (int, float)) or not T > 0:
            raise ConfigError("scenario.T must be positive")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or seed < 0 or seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return cls(exp, scen, num, seed, str(d.get("out_dir", "out")), d)


class Run:
    """Collects report lines, CSV artifacts and the pass/fail verdict."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.lines: list[str] = [f"experiment: {cfg.experiment}", f"seed: {cfg.seed}"]
        self.failed: list[str] = []
        self.files: list[str] = []
        os.makedirs(cfg.out_dir, exist_ok=True)

    def line(self, text: str) -> None:
        self.lines.append(text)

    def check(self, name: str, value: float, target: float, tol: float, source: str) -> bool:
        err = abs(value - target)
        ok = bool(err <= tol)
        self.line(f"{name} = {value:.10g} (target {target:.10g}, |delta| = {err:.3g}, "
                  f"{source}, tolerance {tol:g}) {'PASS' if ok else 'FAIL'}")
        if not ok:
            self.failed.append(name)
        return ok

    def flag(self, name: str, ok: bool, detail: str) -> None:
        self.line(f"{name}: {detail} {'PASS' if ok else 'FAIL'}")
        if not ok:
            self.failed.append(name)

    def path(self, name: str) -> str:
        self.files.append(name)
        return os.path.join(self.cfg.out_dir, name)

    def write_rows(self, name: str, header, rows) -> None:
        with open(self.path(name), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for row in rows:
                wr.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return v


def _terminal(scen, key="g") -> TerminalSpec:
    return TerminalSpec(from_dict(scen[key]), float(scen.get("T", 1.0)))


def _lattice(cfg, T):
    num = cfg.numerics
    times = np.linspace(0.0, T, num["lattice_nt"])
    states = np.linspace(-num["lattice_x"], num["lattice_x"], num["lattice_nx"])
    return times, states


def _pde_X(T):
    return 8.0 * np.sqrt(T) + 2.0


def _bounds_grid(T, N):
    X = _pde_X(T) + 0.5
    return TimeGrid(T, N).nodes, np.linspace(-X, X, int(round(2 * X / 0.03)) + 1)


def _coefficient_radius(ts: TerminalSpec, a, b) -> float:
    """Radius covering the shifted terminal values seen by the envelope transforms."""
    reach = _pde_X(ts.T) + 14.0 * np.sqrt(ts.T) + 1.0
    top = float(np.max(np.abs(ts.g(np.linspace(-reach, reach, 20_001)))))
    shift, grow = a.integral(0.0, ts.T), np.exp(b.integral(0.0, ts.T))
    return max(1.0, 1.2 * (top + shift) * grow)


def _lattice_rows(surface, bounds):
    for i, t in enumerate(surface.times):
        L, U = bounds.at(t, surface.states) if bounds is not None else (None, None)
        for k, x in enumerate(surface.states):
            yield (t, x, surface.Y[i, k], surface.Z[i, k],
                   None if L is None else L[k], None if U is None else U[k])


def exp_transform_check(run: Run) -> None:
    cfg = run.cfg
    f = from_dict(cfg.scenario["f"])
    R, n = float(cfg.numerics["R"]), cfg.numerics["n"]
    u = build_u(f, R, n)
    u.to_csv(run.path("transform.csv"))
    y = np.random.default_rng(cfg.seed).uniform(-R, R, 1000)
    rt = float(np.max(np.abs(u.inverse(u.u(y)) - y)))
    run.flag("round trip", rt <= 1e-8, f"max |u^-1(u(y)) - y| = {rt:.3g} on 1000 points (eval_u_inverse, tolerance 1e-8)")
    if R >= 1.0:
        u1 = float(u.u(1.0))
        run.line(f"u(1)={u1:.5f} ({u1:.12f} from build_u R={R:g} n={n}, nested Gauss-Legendre)")
    if "expected_u1" in cfg.scenario:
        run.check("u(1)", u.u(1.0), float(cfg.scenario["expected_u1"]), cfg.numerics["tol_quadrature"], "build_u/eval_u")
    tol = cfg.numerics["tol_residual"]
    for name, t in (("u", u), ("v", build_v(f, R, n)), ("w", build_w(f, R, n))):
        r = ode_residual(t)
        run.flag(f"ODE residual {name}", r <= tol, f"{r:.3g} (ode_residual, tolerance {tol:g})")
    lo, hi = lipschitz_bounds(u)
    run.flag("Lipschitz sandwich", check_lipschitz_sandwich(u),
             f"exp(-2|f|_1) = {lo:.6g} <= u' <= {hi:.6g} = exp(2|f|_1) at all nodes")
    c = u.lower_limit_c
    run.line(f"lower limit c = {'-inf' if not np.isfinite(c) else f'{c:.10g}'} (build_u)")


def _pure_generator(f: FunctionSpec) -> GeneratorSpec:
    return GeneratorSpec.from_terms(f_zsq(f, abs_y=False))


def exp_pure_quadratic(run: Run) -> None:
    cfg = run.cfg
    num = cfg.numerics
    f = from_dict(cfg.scenario["f"])
    ts = _terminal(cfg.scenario)
    y_q, z_q = solve_pure_quadratic(f, ts, 0.0, 0.0, order=num["gh_order"])
    run.line(f"Y0 quadrature = {y_q:.12g}, Z0 = {z_q:.12g} (solve_pure_quadratic)")
    if "expected_y0" in cfg.scenario:
        run.check("Y0 quadrature", y_q, float(cfg.scenario["expected_y0"]), num["tol_quadrature"], "solve_pure_quadratic")
    H = _pure_generator(f)
    grid = PdeGrid.build(H, ts.g, ts.T, X=_pde_X(ts.T), nx=num["nx"], nt=num["nt"])
    pde = solve_pde(H, ts.g, grid, store_every=max(1, grid.nt // 50))
    pde.to_csv(run.path("pde_surface.csv"))
    run.check("Y0 pde", pde.y0(), y_q, num["tol_pde"], f"solve_pde nx={grid.nx} nt={grid.nt}")
    times, states = _bounds_grid(ts.T, num["N"])
    zero = process_from(0.0)
    phi = dominating_coefficient(f, _coefficient_radius(ts, zero, zero))
    bounds = envelope_bounds(phi, zero, zero, ts, times, states)
    bundle = simulate_paths(cfg.seed, num["M"], TimeGrid(ts.T, num["N"]), workers=num["workers"])
    mc = lsmc_solve(H, ts, bounds, bundle, num["K"])
    mc.to_csv(run.path("lsmc_paths.csv"))
    run.check("Y0 lsmc", mc.y0(), y_q, num["tol_lsmc"],
              f"lsmc_solve M={num['M']} N={num['N']} stderr {mc.meta['y0_stderr']:.2g}")
    run.line(f"lsmc clamp fraction = {mc.clamp_fraction:.4g}")
    lt, lx = _lattice(cfg, ts.T)
    surf = pure_quadratic_surface(f, ts, lt, lx, order=num["gh_order"])
    run.write_rows("lattice.csv", ("t", "x", "Y", "Z", "L", "U"), _lattice_rows(surf, bounds))


def exp_domination_solve(run: Run) -> None:
    cfg = run.cfg
    num, scen = cfg.numerics, cfg.scenario
    H = GeneratorSpec.from_dict(scen["generator"])
    ts = _terminal(scen)
    a, b = process_from(scen.get("alpha", 0.0)), process_from(scen.get("beta", 0.0))
    f = from_dict(scen.get("f", {"kind": "constant", "c": 0.0}))
    times, states = _bounds_grid(ts.T, num["N"])
    phi = dominating_coefficient(f, _coefficient_radius(ts, a, b))
    bounds = envelope_bounds(phi, a, b, ts, times, states)
    y_bound = float(max(np.max(np.abs(bounds.L)), np.max(np.abs(bounds.U))))
    pair = envelope_pair(a, b, 0.0, phi, y_bound)
    rep = check_domination(H, pair, ((0.0, ts.T), (-y_bound, y_bound), (-5.0, 5.0)), 8000)
    run.flag("domination", rep.passed,
             f"(H1-H)+ = {rep.lower_excess:.3g}, (H-H2)+ = {rep.upper_excess:.3g}, "
             f"growth excess = {rep.growth_excess:.3g} on {rep.n} points (check_domination, tolerance 1e-12)")
    grid = PdeGrid.build(H, ts.g, ts.T, X=_pde_X(ts.T), nx=num["nx"], nt=num["nt"],
                         boundary="dirichlet_from_envelope", C=pair.C)
    pde = solve_pde(H, ts.g, grid, bounds=bounds, store_every=max(1, grid.nt // 50))
    pde.to_csv(run.path("pde_surface.csv"))
    bundle = simulate_paths(cfg.seed, num["M"], TimeGrid(ts.T, num["N"]), workers=num["workers"])
    mc = lsmc_solve(H, ts, bounds, bundle, num["K"])
    mc.to_csv(run.path("lsmc_paths.csv"))
    run.line(f"Y0 pde = {pde.y0():.10g} (solve_pde nx={grid.nx} nt={grid.nt}, "
             f"envelope box active at {pde.meta['box_active_fraction']:.3g} of grid values)")
    run.check("Y0 lsmc vs pde", mc.y0(), pde.y0(), num["tol_lsmc"],
              f"lsmc_solve M={num['M']} N={num['N']} stderr {mc.meta['y0_stderr']:.2g}")
    run.line(f"lsmc clamp fraction = {mc.clamp_fraction:.4g}")
    lt, lx = _lattice(cfg, ts.T)
    tt, xx = np.meshgrid(lt, lx, indexing="ij")
    yv = pde.interpolate(tt, xx)
    L = np.array([bounds.at(t, lx)[0] for t in lt])
    U = np.array([bounds.at(t, lx)[1] for t in lt])
    excess = float(max(np.max(L - yv), np.max(yv - U), 0.0))
    run.flag("envelope containment", excess <= num["tol_pde"],
             f"pde outside [L, U] by {excess:.3g} on the lattice (envelope_bounds, tolerance {num['tol_pde']:g})")
    rows = ((t, x, yv[i, k], pde.interpolate(t, x, "Z"), L[i, k], U[i, k])
            for i, t in enumerate(lt) for k, x in enumerate(lx))
    run.write_rows("lattice.csv", ("t", "x", "Y", "Z", "L", "U"), rows)


def exp_theta_linear(run: Run) -> None:
    cfg = run.cfg
    num, scen = cfg.numerics, cfg.scenario
    ts = _terminal(scen)
    res = solve_theta_linear(scen["theta"], ts, M=num["M"], seed=cfg.seed, workers=num["workers"])
    res.to_csv(run.path("controls.csv"))
    run.line(f"family max = {res.y0:.10g} +/- {res.stderr:.2g} with control {res.best} "
             f"(solve_theta_linear, lower bound of the minimal solution)")
    run.line(f"E[zeta] estimate = {res.expectation:.10g}")
    run.flag("family max >= E[zeta]", res.y0 >= res.expectation, "control pi = 0 is in the family")
    run.check("family max vs pde", res.y0, res.pde_value, num["tol_lsmc"], "solve_pde reference")
    if "expected_y0" in scen:
        run.check("Y0 pde", res.pde_value, float(scen["expected_y0"]), 1e-2, "solve_pde")


def exp_log_equivalence(run: Run) -> None:
    cfg = run.cfg
    num, scen = cfg.numerics, cfg.scenario
    gamma = float(scen["gamma"])
    a, b = process_from(scen.get("alpha", 0.0)), process_from(scen.get("beta", 0.0))
    ts = _terminal(scen)
    H = GeneratorSpec.from_terms(alpha(a), beta_abs_y(b), f_zsq(from_dict({"kind": "constant", "c": gamma / 2})))
    grid = PdeGrid.build(H, ts.g, ts.T, X=_pde_X(ts.T), nx=num["nx"], nt=num["nt"])
    pde = solve_pde(H, ts.g, grid)
    mapped = quadratic_log_map(pde, gamma)
    res = log_bsde_residual(mapped, gamma, a, b)
    run.flag("log residual", res <= num["tol_log"],
             f"{res:.3g} (log_bsde_residual on the solve_pde lattice, tolerance {num['tol_log']:g})")
    back = quadratic_log_map(mapped, gamma, "inverse")
    rt = float(np.max(np.abs(back.Y - pde.Y) / np.maximum(1.0, np.abs(pde.Y))))
    run.flag("log map round trip", rt <= 1e-12, f"{rt:.3g} (quadratic_log_map, tolerance 1e-12)")
    ac, bc, cc = (float(scen.get(k, 1.0)) for k in ("a", "b", "c"))
    ln = log_transform_ln1p(mapped, ac, bc, cc, seed=cfg.seed)
    run.flag("Hbar domination", ln.violations == 0,
             f"{ln.violations} violations of 0 <= Hbar <= a+b+c+c y+z^2/2 at {ln.samples} points (log_transform_ln1p)")
    sv = scalar_log_bound_violations()
    run.flag("scalar log bound", sv == 0, f"{sv} violations on (0, 1e3]")
    step = max(1, grid.nt // 50)
    sub = type(mapped)("state_indexed", mapped.times[::step], mapped.Y[::step], mapped.Z[::step],
                       states=mapped.states)
    sub.to_csv(run.path("mapped_surface.csv"))


def exp_comparison(run: Run) -> None:
    cfg = run.cfg
    scen = cfg.scenario
    ts1, ts2 = _terminal(scen, "g"), _terminal(scen, "g2")
    lt, lx = _lattice(cfg, ts1.T)
    rep = comparison_check(from_dict(scen["f"]), from_dict(scen["f2"]), ts1, ts2, lt, lx)
    tol = cfg.numerics["tol_comparison"]
    run.flag("comparison", rep.max_excess <= tol,
             f"max (Y1 - Y2)+ = {rep.max_excess:.3g} on a {lt.size}x{lx.size} lattice (comparison_check, tolerance {tol:g})")
    run.write_rows("comparison.csv", ("t", "x", "Y1", "Y2"), rep.lattice_rows())


def exp_assumptions(run: Run) -> None:
    cfg = run.cfg
    num, scen = cfg.numerics, cfg.scenario
    f = from_dict(scen["f"])
    ts = _terminal(scen)
    a, b = process_from(scen.get("alpha", 0.0)), process_from(scen.get("beta", 0.0))
    rep = estimate_A2(f, ts, a, b, m=num["M"], seed=cfg.seed, p=num["p"])
    if "theta" in scen:
        rep4 = estimate_A4(f, ts, a, b, scen["theta"], m=num["M"], seed=cfg.seed)
        rep.a4_estimate, rep.a4_table = rep4.a4_estimate, rep4.a4_table
        rep.notes.extend(rep4.notes)
    if "generator" in scen:
        H = GeneratorSpec.from_dict(scen["generator"])
        box = ((0.0, ts.T), (-num["R"], num["R"]), (-5.0, 5.0))
        rep.a1_ok, rep.a1_worst = check_A1(H, f, a, b, box)
        if "theta" in scen:
            rep.a3_ok, rep.a3_worst = check_A3(H, f, a, b, scen["theta"], box)
    run.line(rep.text())
    row = rep.csv_row()
    run.write_rows("assumptions.csv", list(row), [list(row.values())])
    if rep.a2_estimate is not None and rep.a2_estimate.divergence_flag:
        run.failed.append("(A2) violated (heuristic)")
    if rep.a4_estimate is not None and rep.a4_estimate.divergence_flag:
        run.failed.append("(A4) violated (heuristic)")
    for name, ok in (("(A1)", rep.a1_ok), ("(A3)", rep.a3_ok)):
        if ok is False:
            run.failed.append(f"{name} violated")


def exp_convergence(run: Run) -> None:
    cfg = run.cfg
    scen = cfg.scenario
    ts = _terminal(scen)
    exact = scen.get("exact")
    if exact is None:
        exact = solve_zero_generator(ts, 0.0, 0.0, order=cfg.numerics["gh_order"])[0]
    rows, ratios = convergence_study(ts.g, float(exact), ts.T)
    write_convergence_csv(run.path("convergence.csv"), rows)
    for (nx, nt, err) in rows:
        run.line(f"nx={nx} nt={nt} origin error={err:.6g}")
    for r in ratios:
        run.flag("convergence ratio", 3.2 <= r <= 4.8, f"{r:.4f} (solve_pde, expected in [3.2, 4.8])")


DISPATCH = {
    "transform-check": exp_transform_check,
    "pure-quadratic": exp_pure_quadratic,
    "domination-solve": exp_domination_solve,
    "theta-linear": exp_theta_linear,
    "log-equivalence": exp_log_equivalence,
    "comparison": exp_comparison,
    "assumptions": exp_assumptions,
    "convergence": exp_convergence,
}


def _flatten(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, json.dumps(v, sort_keys=True)


def _write_manifest(run: Run, status: int) -> None:
    cfg = run.cfg
    rows = [("experiment", cfg.experiment), ("seed", str(cfg.seed)), ("status", str(status))]
    rows += [(f"scenario.{k}", v) for k, v in _flatten(cfg.scenario)]
    rows += [(f"numerics.{k}", v) for k, v in _flatten(cfg.numerics)]
    rows += [("version.qbsde", __version__), ("version.python", platform.python_version()),
             ("version.numpy", np.__version__), ("version.scipy", scipy.__version__),
             ("files", ";".join(run.files)),
             ("timestamp", datetime.datetime.now(datetime.timezone.utc).isoformat())]
    with open(os.path.join(cfg.out_dir, "manifest.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["key", "value"])
        wr.writerows(rows)


def run(cfg: ExperimentConfig) -> int:
    """Execute one experiment; returns the exit status."""
    r = Run(cfg)
    status = 0
    try:
        DISPATCH[cfg.experiment](r)
    except IntegrabilityError as exc:
        r.line(f"error: {exc.assumption} violated: {exc}")
        status = 1
    except RangeError as exc:
        hint = f"; try R >= {exc.suggested_radius:g}" if exc.suggested_radius else ""
        r.line(f"error: transform range exceeded ({exc}){hint}")
        status = 1
    except (ConfigError, PreconditionError) as exc:
        r.line(f"error: invalid configuration: {exc}")
        status = 1
    if status == 0 and r.failed:
        status = 2
        r.line("verdict: FAIL (" + ", ".join(r.failed) + ")")
    elif status == 0:
        r.line("verdict: PASS")
    with open(os.path.join(cfg.out_dir, "report.txt"), "w") as fh:
        fh.write("\n".join(r.lines) + "\n")
    _write_manifest(r, status)
    summary = r.lines[-1]
    print(summary)
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qbsde", description="Quadratic BSDE toolkit experiments")
    parser.add_argument("--config", required=True, help="JSON experiment configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out-dir", help="override the output directory")
    parser.add_argument("--experiment", help="override the configured experiment")
    parser.add_argument("--paths", type=int, help="Monte Carlo path count M")
    parser.add_argument("--steps", type=int, help="time steps N")
    args = parser.parse_args(argv)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.out_dir is not None:
            raw["out_dir"] = args.out_dir
        if args.experiment is not None:
            raw["experiment"] = args.experiment
        num = raw.setdefault("numerics", {})
        if args.paths is not None:
            num["M"] = args.paths
        if args.steps is not None:
            num["N"] = args.steps
        cfg = ExperimentConfig.from_dict(raw)
    except (OSError, json.JSONDecodeError, QbsdeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return run(cfg)
    except QbsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
