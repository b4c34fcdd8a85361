"""Command line entry point: ``meanreflect <subcommand> --config cfg.json --out dir``.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 failed --check.
Outputs are written only once a run has finished.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import (
    ConfigError,
    build_actions,
    build_cost,
    build_grid,
    build_relaxed,
    build_system,
    load_config,
)
from .control import brute_force_optimal, chattering_convergence, relaxed_grid_search
from .constraint_map import TimeDomainFamily
from .geometry import ProjectionError
from .mckean import (
    NumericalError,
    chaos_study,
    constraint_tolerance,
    constraint_violation,
    minimality_violation,
    picard_solve,
    simulate_particles,
)
from .skorokhod import check_minimality, constrained_phi_mean, solve_mean_reflection, stability_gap

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("meanreflect")


@dataclass
class Table:
    name: str
    columns: list  # (name, unit, provenance)
    rows: list = field(default_factory=list)


@dataclass
class Outcome:
    tables: list
    checks: list = field(default_factory=list)  # (name, passed, detail)
    warnings: list = field(default_factory=list)


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


# -- subcommands --------------------------------------------------------------------


def _input_path(cfg, grid, d, seed):
    rec = cfg.section("path")
    try:
        if "values" in rec:
            return np.asarray(rec["values"], dtype=float).reshape(len(grid), d)
        if "file" in rec:
            data = np.loadtxt(cfg.base_dir / rec["file"], delimiter=",", ndmin=2,
                              skiprows=int(rec.get("header_rows", 1)))
            if data.shape != (len(grid), d + 1) or not np.allclose(data[:, 0], grid.times):
                raise ConfigError("path file must have columns t, y_0.. on the config grid")
            return data[:, 1:]
    except (OSError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid input path: {exc}") from None
    drift = np.asarray(rec.get("drift", [0.0] * d), dtype=float)
    scale = float(rec.get("scale", 1.0))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    inc = scale * rng.standard_normal((grid.steps, d)) * np.sqrt(grid.dt)[:, None]
    inc += drift * grid.dt[:, None]
    start = np.asarray(rec.get("start", [0.0] * d), dtype=float)
    return start + np.vstack([np.zeros(d), np.cumsum(inc, axis=0)])


def cmd_skorokhod_test(cfg, threads):
    spec = build_system(cfg)
    grid, d = spec.grid, spec.dim
    family = TimeDomainFamily(spec.domain, spec.cmap, grid)
    tol = constraint_tolerance(spec)

    def one(seed):
        y = _input_path(cfg, grid, d, seed)
        led = solve_mean_reflection(spec.cmap, spec.domain, y, grid, project_initial=True)
        phi = constrained_phi_mean(spec.cmap, grid, y, led)
        viol = max(spec.domain.distance(p) for p in phi)
        mini = check_minimality(phi, led, spec.domain)
        y2 = _input_path(cfg, grid, d, seed + 1)
        x0 = family.project(0, y[0])
        gap = stability_gap(y - y[0] + x0, y2 - y2[0] + x0, family, family)
        return seed, viol, mini, led.total_variation, gap.lhs, 2 * gap.rhs, led

    results = _map(one, cfg.seeds, threads)
    summary = Table("skorokhod_summary", [
        ("seed", "-", "input"), ("constraint_violation", "state", "exact"),
        ("minimality", "state^2", "exact"), ("total_variation", "state", "exact"),
        ("stability_lhs", "state^2", "exact"), ("stability_2rhs", "state^2", "exact")])
    checks = []
    for seed, viol, mini, tv, lhs, rhs2, _ in results:
        summary.rows.append((seed, viol, mini, tv, lhs, rhs2))
        checks.append((f"constraint seed={seed}", viol <= tol, f"{viol:.3e} <= {tol:.0e}"))
        checks.append((f"minimality seed={seed}", mini <= 1e-8 * (1 + tv), f"{mini:.3e}"))
        checks.append((f"stability seed={seed}", lhs <= rhs2 + 1e-8, f"{lhs:.3e} <= {rhs2:.3e}"))
    led = results[0][-1]
    y0 = _input_path(cfg, grid, d, cfg.seeds[0])
    ledger = Table("skorokhod_ledger", [("t", "time", "grid")]
                   + [(f"x{i}", "state", "exact") for i in range(d)]
                   + [(f"k{i}", "state", "exact") for i in range(d)]
                   + [("k_variation", "state", "exact")])
    for t, y, k, var in zip(grid.times, y0, led.k, led.variation):
        ledger.rows.append((t, *(y + k), *k, var))
    return Outcome([summary, ledger], checks)


def cmd_simulate(cfg, threads):
    spec = build_system(cfg)
    n, d = cfg.particles, spec.dim
    tol = constraint_tolerance(spec)

    def one(seed):
        ens, led = simulate_particles(spec, n, seed, store="none")
        return seed, ens, led

    results = _map(one, cfg.seeds, threads)
    summary = Table("simulate_summary", [
        ("seed", "-", "input"), ("N", "-", "input"),
        ("constraint_violation", "state", "exact"), ("minimality", "state^2", "exact"),
        ("K_total_variation", "state", "monte-carlo")])
    tables, checks = [summary], []
    for seed, ens, led in results:
        viol = constraint_violation(spec, ens)
        mini = minimality_violation(spec, ens, led)
        summary.rows.append((seed, n, viol, mini, led.total_variation))
        checks.append((f"constraint seed={seed}", viol <= tol, f"{viol:.3e} <= {tol:.0e}"))
        checks.append((f"minimality seed={seed}",
                       mini <= 1e-8 * (1 + led.total_variation), f"{mini:.3e}"))
        path = Table(f"simulate_seed{seed}", [("t", "time", "grid")]
                     + [(f"K{i}", "state", "monte-carlo") for i in range(d)]
                     + [(f"mean{i}", "state", "monte-carlo") for i in range(d)]
                     + [(f"phi_mean{i}", "state", "monte-carlo") for i in range(d)])
        for j, t in enumerate(spec.grid.times):
            path.rows.append((t, *led.k[j], *ens.mean_path[j], *ens.phi_mean_path[j]))
        tables.append(path)
    return Outcome(tables, checks)


def cmd_picard(cfg, threads):
    spec = build_system(cfg)
    opts = cfg.section("picard")
    tol = float(opts.get("tol", 1e-3))
    max_iter = int(opts.get("max_iter", 10))
    res = picard_solve(spec, cfg.particles, max_iter, tol, cfg.seeds[0])
    table = Table("picard_residuals", [("iterate", "-", "index"),
                                       ("residual_w2", "state", "monte-carlo (CRN)"),
                                       ("ratio", "-", "monte-carlo (CRN)")])
    for k, r in enumerate(res.residuals):
        ratio = r / res.residuals[k - 1] if k > 0 and res.residuals[k - 1] > 0 else float("nan")
        table.rows.append((k + 1, r, ratio))
    warnings = []
    if not res.converged:
        warnings.append(f"picard did not reach residual < {tol} in {max_iter} iterations")
    if not res.exact_w2:
        warnings.append("approximate (sliced) Wasserstein distance used for residuals")
    ratios = [row[2] for row in table.rows[2:]]
    checks = [("picard converged", res.converged, f"{res.residuals[-1]:.3e} < {tol}"),
              ("residual ratio < 1 from iterate 2", all(r < 1 for r in ratios), str(ratios))]
    return Outcome([table], checks, warnings)


def cmd_chaos_study(cfg, threads):
    spec = build_system(cfg)
    opts = cfg.section("chaos")
    n_list = [int(v) for v in opts.get("N_list", [50, 200, 800])]
    n_ref = int(opts.get("N_ref", 4 * max(n_list)))
    audit = int(opts.get("audit", 16))
    ref_k = None
    if "reference_slope" in opts:
        slope = np.asarray(opts["reference_slope"], dtype=float)
        ref_k = lambda t: np.outer(t, slope)  # noqa: E731
    seeds = cfg.seeds
    per_seed = _map(lambda s: chaos_study(spec, n_list, [s], n_ref, audit, ref_k), seeds, threads)
    rows = []
    for i, n in enumerate(n_list):
        g = np.array([r[i].gap for r in per_seed])
        kg = np.array([r[i].k_gap for r in per_seed])
        w = np.array([r[i].w2_terminal for r in per_seed])
        exact = all(r[i].w2_exact for r in per_seed)
        se = (lambda v: float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan"))
        rows.append((n, g.mean(), se(g), kg.mean(), se(kg), w.mean(), exact))
    table = Table("chaos", [("N", "-", "input"), ("gap", "state^2", "monte-carlo mean"),
                            ("gap_se", "state^2", "monte-carlo stderr"),
                            ("k_gap", "state", "monte-carlo mean"),
                            ("k_gap_se", "state", "monte-carlo stderr"),
                            ("w2_terminal", "state", "monte-carlo mean"),
                            ("w2_exact", "-", "flag")], rows)
    warnings = [] if all(r[6] for r in rows) else ["approximate (sliced) Wasserstein distance used"]
    gaps, kgaps = [r[1] for r in rows], [r[3] for r in rows]
    checks = [("gap strictly decreasing", all(a > b for a, b in zip(gaps, gaps[1:])), str(gaps)),
              ("k gap strictly decreasing", all(a > b for a, b in zip(kgaps, kgaps[1:])),
               str(kgaps))]
    return Outcome([table], checks, warnings)


def cmd_control_chatter(cfg, threads):
    spec = build_system(cfg)
    actions = build_actions(cfg)
    relaxed = build_relaxed(cfg, actions, spec.grid.steps)
    cost = build_cost(cfg)
    n_list = [int(v) for v in cfg.section("chatter").get("n_list", [4, 16, 64])]
    rows = chattering_convergence(spec, cost, relaxed, n_list, cfg.particles, cfg.seeds)
    table = Table("chatter", [("n", "-", "input"), ("J_strict", "cost", "monte-carlo mean"),
                              ("J_relaxed", "cost", "monte-carlo mean"),
                              ("gap", "cost", "monte-carlo (CRN)"),
                              ("gap_se", "cost", "monte-carlo stderr")], [tuple(r) for r in rows])
    gaps = [r.gap for r in rows]
    checks = [("gap strictly decreasing", all(a > b for a, b in zip(gaps, gaps[1:])), str(gaps)),
              ("final gap small", gaps[-1] <= 0.05 * (1 + abs(rows[-1].relaxed)),
               f"{gaps[-1]:.3e}")]
    return Outcome([table], checks)


def cmd_control_search(cfg, threads):
    spec = build_system(cfg)
    actions = build_actions(cfg)
    cost = build_cost(cfg)
    opts = cfg.section("search")
    cells = int(opts.get("cells", 2))
    try:
        ctrl, est, table = brute_force_optimal(spec, cost, actions, cells, cfg.particles,
                                               cfg.seeds)
    except ValueError as exc:
        if "cap" in str(exc):
            raise ConfigError(str(exc)) from None
        raise
    out = Table("search", [("cell_actions", "-", "input"), ("J", "cost", "monte-carlo mean")],
                [(" ".join(map(str, c)), j) for c, j in table])
    tables = [out]
    if "relaxed_resolution" in opts:
        _, rest, rtable = relaxed_grid_search(spec, cost, actions, int(opts["relaxed_resolution"]),
                                              cfg.particles, cfg.seeds)
        tables.append(Table("search_relaxed", [("weights", "-", "input"),
                                               ("J", "cost", "monte-carlo mean")],
                            [(" ".join(_fmt(x) for x in w), j) for w, j in rtable]))
    return Outcome(tables, [("search completed", True, f"best J={est.mean:.6g}")])


COMMANDS = {
    "skorokhod-test": cmd_skorokhod_test,
    "simulate": cmd_simulate,
    "picard": cmd_picard,
    "chaos-study": cmd_chaos_study,
    "control-chatter": cmd_control_chatter,
    "control-search": cmd_control_search,
}


# -- output -------------------------------------------------------------------------


def write_outputs(out_dir: Path, subcommand, cfg, outcome: Outcome, wall: float, check: bool):
    out_dir.mkdir(parents=True, exist_ok=True)
    report_tables = {}
    for table in outcome.tables:
        fname = f"{table.name}.csv"
        with open(out_dir / fname, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([c[0] for c in table.columns])
            for row in table.rows:
                w.writerow([_fmt(v) for v in row])
        report_tables[table.name] = {
            "file": fname,
            "columns": [{"name": c, "unit": u, "provenance": p} for c, u, p in table.columns],
        }
    report = {
        "subcommand": subcommand,
        "config_hash": cfg.digest,
        "versions": {"meanreflect": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "wall_time_s": wall,
        "tables": report_tables,
        "warnings": outcome.warnings,
        "checks": [{"name": n, "passed": bool(p), "detail": d} for n, p, d in outcome.checks],
        "check_enforced": check,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")


def run(subcommand: str, config_path, out_dir, threads: int = 1, check: bool = False) -> int:
    try:
        cfg = load_config(config_path)
        build_grid(cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        outcome = COMMANDS[subcommand](cfg, max(1, threads))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericalError, ProjectionError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    wall = time.perf_counter() - start
    write_outputs(Path(out_dir), subcommand, cfg, outcome, wall, check)
    for name, passed, detail in outcome.checks:
        log.info("%s %s (%s)", "PASS" if passed else "FAIL", name, detail)
    for msg in outcome.warnings:
        log.warning(msg)
    if check and not all(p for _, p, _ in outcome.checks):
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meanreflect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads over seeds")
        p.add_argument("--check", action="store_true", help="exit 4 if acceptance checks fail")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    return run(args.subcommand, args.config, args.out, args.threads, args.check)


if __name__ == "__main__":
    sys.exit(main())
