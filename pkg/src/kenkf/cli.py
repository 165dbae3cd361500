"""Command-line entry point: ``kenkf run | phase | sweep``.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import copy
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .config import load_config, problem_from_config, solver_config
from .diagnostics import write_trace_csv
from .ensemble import write_ensemble_csv
from .errors import ConfigurationError, NumericDivergence
from .fileio import write_csv, write_json
from .meanfield import StopReason, run
from .moments import (ScalarMomentSystem, fixed_points, integrate, vector_field_grid,
                      write_fixed_points_csv, write_grid_csv, write_nullclines_csv)
from .problems import EllipticLinearProblem

log = logging.getLogger("kenkf")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

SUMMARY_COLUMNS = ("value", "stop_reason", "iterations", "t", "misfit", "threshold",
                   "v", "r", "V", "R", "rel_error")


def relative_error(ubar, u_true) -> float:
    """``|ubar - u_true|_2^2 / |ubar|_2^2``."""
    ubar = np.asarray(ubar, dtype=float)
    return float(np.sum((ubar - u_true) ** 2) / np.sum(ubar**2))


def final_metrics(problem, trace, threshold) -> dict:
    fin = trace.final
    ubar = trace.ensemble.mean
    out = {
        "iterations": trace.iterations,
        "t": fin.t,
        "misfit": fin.misfit,
        "threshold": threshold,
        "v": fin.v, "r": fin.r, "V": fin.V, "R": fin.R,
        "V_lin": fin.V_lin, "R_lin": fin.R_lin,
        "rho": fin.rho,
        "rel_error": (relative_error(ubar, problem.u_true)
                      if problem.u_true is not None else float("nan")),
    }
    if ubar.size <= 16:
        out["mean"] = ubar.tolist()
    return out


def _threshold(problem, scfg):
    if scfg.stopping.value != "discrepancy":
        return None
    if scfg.threshold is not None:
        return scfg.threshold
    return problem.discrepancy_threshold(scfg.threshold_norm)


def execute_run(cfg: dict, out_dir: Path) -> dict:
    """Run one configured experiment and write its artifacts; returns the manifest."""
    problem = problem_from_config(cfg)
    scfg = solver_config(cfg)
    emit = cfg["output"]
    out_dir.mkdir(parents=True, exist_ok=True)

    callback = None
    every = emit["ensemble_every"]
    if every > 0:
        def callback(n, U, rec):
            if n % every == 0:
                write_ensemble_csv(out_dir / "snapshots" / f"ensemble_{n:06d}.csv", U)

    start = time.perf_counter()
    trace = run(problem, scfg, callback=callback)
    wall = time.perf_counter() - start

    if emit["trace"]:
        records = trace.all_records
        write_trace_csv(out_dir / "trace.csv", records)
        write_csv(out_dir / "trace_unsquared.csv", ("t", "V_lin", "R_lin"),
                  ((r.t, r.V_lin, r.R_lin) for r in records))
    if emit["ensemble"]:
        write_ensemble_csv(out_dir / "final_ensemble.csv", trace.ensemble)
    if emit["reconstruction"]:
        write_reconstruction(out_dir / "reconstruction.csv", problem, trace.ensemble.mean)

    manifest = {
        "config": cfg,
        "stop_reason": trace.stop_reason.value,
        "wall_time_s": wall,
        "backend": trace.backend,
        "threads": kernels.num_threads(),
        "final": final_metrics(problem, trace, _threshold(problem, scfg)),
    }
    write_json(out_dir / "manifest.json", manifest)
    if trace.stop_reason is StopReason.MAX_ITERATIONS:
        log.warning("iteration budget n_tot=%d exhausted before stopping", scfg.n_tot)
    return manifest


def write_reconstruction(path, problem, ubar):
    """Elliptic problems: ``x, ubar, u_true, p`` on the mesh including the boundary.

    Other problems: ``x, p, y`` at the observation points.
    """
    if isinstance(problem, EllipticLinearProblem):
        x = problem.full_mesh()
        p = problem.extend(problem.model.apply(ubar))
        rows = zip(x, problem.extend(ubar), problem.extend(problem.u_true), p)
        return write_csv(path, ("x", "ubar", "u_true", "p"), rows)
    from .problems import NONLINEAR_POINTS

    p = problem.model.apply(ubar)
    return write_csv(path, ("x", "p", "y"), zip(NONLINEAR_POINTS, p, problem.y))


def cmd_run(cfg: dict, out_dir: Path) -> int:
    manifest = execute_run(cfg, out_dir)
    fin = manifest["final"]
    log.info("%s after %d iterations: misfit %.6g (threshold %s), r %.6g",
             manifest["stop_reason"], fin["iterations"], fin["misfit"], fin["threshold"],
             fin["r"])
    return EXIT_OK


def cmd_phase(cfg: dict, out_dir: Path) -> int:
    ph = cfg["phase"]
    sys_ = ScalarMomentSystem(float(ph["y"]), float(ph["G"]), float(ph["lambda2"]))
    m_range = _pair(ph["m_range"], "phase.m_range")
    E_range = _pair(ph["E_range"], "phase.E_range")
    if ph["n"] < 1:
        raise ConfigurationError("configuration key 'phase.n' must be positive")
    write_grid_csv(out_dir / "vector_field.csv", vector_field_grid(sys_, m_range, E_range, ph["n"]))
    write_nullclines_csv(out_dir / "nullclines.csv", sys_, m_range, E_range, max(ph["n"], 50))
    fps = fixed_points(sys_)
    write_fixed_points_csv(out_dir / "fixed_points.csv", fps)
    rows = []
    blow = []
    for i, p0 in enumerate(ph["starts"]):
        p0 = _pair(p0, f"phase.starts[{i}]")
        traj = integrate(sys_, p0, float(ph["t_end"]), float(ph["tol"]))
        rows.extend((i, t, m, E) for t, m, E in zip(traj.t, traj.m, traj.E))
        blow.append((i, p0[0], p0[1], int(traj.blow_up), traj.t[-1]))
    if ph["starts"]:
        write_csv(out_dir / "trajectories.csv", ("start", "t", "m", "E"), rows)
        write_csv(out_dir / "trajectory_status.csv", ("start", "m0", "E0", "blow_up", "t_last"),
                  blow)
    write_json(out_dir / "manifest.json", {
        "config": cfg,
        "fixed_points": [{"label": f.label, "m": f.point.m, "E": f.point.E,
                          "classification": f.classification} for f in fps],
    })
    for f in fps:
        log.info("%s = (%g, %g): %s", f.label, f.point.m, f.point.E, f.classification)
    return EXIT_OK


def _pair(value, key):
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"configuration key '{key}' must be a pair of numbers") from None
    return lo, hi


def _sweep_one(args):
    cfg, out_dir = args
    return execute_run(cfg, out_dir)


def cmd_sweep(cfg: dict, out_dir: Path) -> int:
    sw = cfg["sweep"]
    param, values = sw["parameter"], sw["values"]
    if not values:
        raise ConfigurationError("configuration key 'sweep.values' must be a non-empty list")
    jobs = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigurationError(f"configuration key 'sweep.values' has invalid entry {v!r}")
        sub = copy.deepcopy(cfg)
        sub["solver"][param] = v
        if param == "J" and sub["solver"].get("M") is not None and sub["solver"]["M"] > v:
            sub["solver"]["M"] = v
        solver_config(sub)  # validate every point before running any
        jobs.append((sub, out_dir / f"{param}={v}"))
    if sw["parallel"]:
        with concurrent.futures.ProcessPoolExecutor() as pool:
            manifests = list(pool.map(_sweep_one, jobs))
    else:
        manifests = [_sweep_one(job) for job in jobs]
    rows = []
    for v, man in zip(values, manifests):
        f = man["final"]
        rows.append((v, man["stop_reason"], f["iterations"], f["t"], f["misfit"],
                     f["threshold"] if f["threshold"] is not None else float("nan"),
                     f["v"], f["r"], f["V"], f["R"], f["rel_error"]))
    write_csv(out_dir / "summary.csv", (param,) + SUMMARY_COLUMNS[1:], rows)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "phase": cmd_phase, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kenkf", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, metavar="PATH",
                        help="TOML configuration or JSON run manifest to replay")
    parser.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    parser.add_argument("--seed", type=int, metavar="N", help="solver seed (overrides solver.seed)")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["solver"]["seed"] = args.seed
        if args.out is not None:
            cfg["output"]["dir"] = args.out
        out_dir = Path(cfg["output"]["dir"])
        return COMMANDS[args.command](cfg, out_dir)
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericDivergence as exc:
        log.error("numeric divergence: %s", exc)
        return EXIT_DIVERGENCE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
