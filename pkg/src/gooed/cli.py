"""Command-line front end: offline | optimize | evaluate | baselines | spectrum.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 input data that does not match the configuration or archive.

Every CSV has a header row and carries ``config_hash`` and ``seed`` columns;
floats are written with ``repr`` so they read back bitwise.
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from pathlib import Path

import numpy as np

from .archive import ArchiveError, FactorArchive
from .config import RunConfig, load_config
from .design import (
    EvaluationError,
    exhaustive_search,
    random_design_sample,
    standard_greedy,
    swapping_greedy,
)
from .eig import EigEvaluator
from .exceptions import ConfigError, DimensionMismatch, GooedError, NumericalError
from .lowrank import (
    RandEigConfig,
    SpectralFactor,
    Tolerances,
    bound_from_factors,
    dense_eig_reference,
    truncate_by_tolerance,
    truncate_to_rank,
)
from .model import Design, LowRankOffline, assemble_offline
from .transport import (
    PriorOperatorConfig,
    SensorLayout,
    TransportConfig,
    VelocityField,
    build_grid,
    STEP_SOLVES,
    build_problem,
    candidate_sensors,
)

ARCHIVE_NAME = "factors.goed"


class ContractViolation(GooedError, ArithmeticError):
    """The online stage touched the forward model."""


# -- problem construction ----------------------------------------------------

def layout_from_config(cfg: RunConfig, grid):
    """Candidate sensors on ``grid``; needs no model solves."""
    s = cfg.sensors
    if s.layout == "file":
        path = cfg.resolve_path(s.file)
        if not path.is_file():
            raise ConfigError(f"sensor file {path} not found")
        return SensorLayout.on_grid(SensorLayout.read_csv(path), grid,
                                    {"layout": "file", "file": str(path)}, s.interpolation)
    return candidate_sensors(s.layout, grid, s.interpolation)


def problem_from_config(cfg: RunConfig, n=None):
    m = cfg.model
    velocity = None
    if m.velocity != "default":
        path = cfg.resolve_path(m.velocity)
        if not path.is_file():
            raise ConfigError(f"velocity file {path} not found")
        velocity = VelocityField.from_file(path)
    tcfg = TransportConfig(m.diffusion, m.final_time, m.time_steps, m.prediction_time,
                           velocity, m.advection, m.observation_times or None)
    pcfg = PriorOperatorConfig(m.gamma, m.delta, m.robin_beta, m.prior_mean)
    grid = build_grid(n or m.n)
    layout = layout_from_config(cfg, grid)
    return build_problem(grid=grid, layout=layout, goal=cfg.goal.which, config=tcfg,
                         prior_config=pcfg, noise_std=m.noise_std, width=cfg.goal.width)


def _clip_spectrum(f: SpectralFactor) -> SpectralFactor:
    return SpectralFactor(f.basis, np.clip(f.eigenvalues, 0.0, None), f.source_dim,
                          extended=np.clip(f.spectrum, 0.0, None), exact_spectrum=f.exact_spectrum)


def offline_factors(problem, cfg: RunConfig) -> LowRankOffline:
    """Eigenfactors of ``H_d^rho`` and ``Delta H_d`` truncated per ``[lowrank]``."""
    lr = cfg.lowrank
    d = problem.model.d
    tol = Tolerances(lr.eps_zeta, lr.eps_lambda)
    if lr.mode == "exact":
        dense = assemble_offline(problem.model, problem.goal, mode="exact")
        rho = _clip_spectrum(dense_eig_reference(dense.h_d_rho))
        delta = _clip_spectrum(dense_eig_reference(dense.delta_h_d))
        apps = dense.applications
    else:
        rho_cfg = RandEigConfig.clipped(max(lr.k, 1), d, lr.oversampling, lr.power_iterations, lr.seed)
        delta_cfg = RandEigConfig.clipped(max(lr.l, 1), d, lr.oversampling, lr.power_iterations, lr.seed)
        low = assemble_offline(problem.model, problem.goal, mode="lowrank",
                               rho_config=rho_cfg, delta_config=delta_cfg)
        rho, delta, apps = low.rho, low.delta, low.applications
    rho = truncate_by_tolerance(truncate_to_rank(rho, lr.k), tol.eps_zeta)
    delta = truncate_by_tolerance(truncate_to_rank(delta, lr.l), tol.eps_lambda)
    return LowRankOffline(rho, delta, apps)


def _solves():
    return STEP_SOLVES.total


# -- output helpers ----------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows, cfg: RunConfig):
    tag = [cfg.hash_hex(), str(cfg.lowrank.seed)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(header) + ["config_hash", "seed"])
        for row in rows:
            w.writerow([_fmt(v) for v in row] + tag)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_archive(args, cfg, expected_d):
    path = Path(args.archive) if args.archive else Path(args.out) / ARCHIVE_NAME
    arc = FactorArchive.read(path)
    if arc.d != expected_d:
        raise DimensionMismatch(f"archive has d = {arc.d} candidates, configuration has {expected_d}")
    return arc


def _config_layout(cfg):
    return layout_from_config(cfg, build_grid(cfg.model.n))


def _expected_d(cfg, layout):
    """Candidate count implied by the configuration (sensors times observation times)."""
    return layout.d * max(1, len(set(cfg.model.observation_times)))


def read_design_file(path, d) -> Design:
    """Sensor indices from a CSV with a ``sensor`` column or a plain list of integers."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DimensionMismatch(f"cannot read design file {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines and "sensor" in [c.strip() for c in lines[0].split(",")]:
        tokens = [r["sensor"] for r in csv.DictReader(lines)]
    else:
        tokens = text.replace(",", " ").split()
    try:
        idx = [int(t) for t in tokens]
    except ValueError as exc:
        raise DimensionMismatch(f"design file {path} has non-integer entries") from exc
    if not idx:
        raise DimensionMismatch("design file is empty")
    if len(set(idx)) != len(idx):
        raise DimensionMismatch(f"design file {path} repeats a sensor index")
    if min(idx) < 0 or max(idx) >= d:
        raise DimensionMismatch(f"design indices must lie in [0, {d})")
    return Design.of(idx, d)


def _sensor_xy(layout, i):
    x, y = layout.coordinates[i % layout.d]
    return float(x), float(y)


# -- commands ------------------------------------------------------------------

def cmd_offline(cfg: RunConfig, args):
    out = _out_dir(args)
    problem = problem_from_config(cfg)
    low = offline_factors(problem, cfg)
    arc = FactorArchive.from_offline(low, problem.model.noise, cfg.lowrank.eps_zeta,
                                     cfg.lowrank.eps_lambda, cfg.lowrank.seed, cfg.digest())
    arc.write(out / ARCHIVE_NAME)
    problem.layout.to_csv(out / "sensors.csv")
    apps = low.applications
    rows = [(key, apps[key]) for key in ("forward", "adjoint", "goal", "goal_adjoint")]
    rows.append(("forward_type_total", apps["forward"] + apps["adjoint"]))
    write_csv(out / "offline_report.csv", ["counter", "applications"], rows, cfg)
    print(f"d_m = {problem.grid.d_m}, d = {problem.model.d}, k = {arc.k}, l = {arc.l}")
    for key, value in rows:
        print(f"{key}: {value}")
    print(f"archive: {out / ARCHIVE_NAME}")
    return 0


def cmd_optimize(cfg: RunConfig, args):
    before = _solves()
    out = _out_dir(args)
    layout = _config_layout(cfg)
    arc = _load_archive(args, cfg, _expected_d(cfg, layout))
    op = cfg.optimize
    if not 1 <= op.r <= arc.d:
        raise DimensionMismatch(f"r = {op.r} is not in [1, {arc.d}]")
    evaluator = EigEvaluator(arc.offline(), arc.noise())
    if op.algorithm == "swapping":
        trace = swapping_greedy(evaluator, arc.d, op.r, op.max_loops, eig_tol=op.eig_tol)
        design, history = trace.final_design, trace.eig_history
        loops, swaps, evals = trace.loops, trace.swaps, trace.eig_evaluations
        converged, truncated = trace.converged, trace.truncated
    else:
        design, history = standard_greedy(evaluator, arc.d, op.r, return_values=True)
        loops = swaps = 0
        evals = sum(arc.d - j for j in range(op.r))
        converged, truncated = True, False
    write_csv(out / "design.csv", ["position", "sensor", "x", "y"],
              [(p, s, *_sensor_xy(layout, s)) for p, s in enumerate(design.indices)], cfg)
    delta = _solves() - before
    if delta != 0:
        raise ContractViolation(f"online optimization performed {delta} model solves")
    write_csv(out / "trace.csv", ["step", "eig"], list(enumerate(history)), cfg)
    summary = [("algorithm", op.algorithm), ("r", op.r), ("d", arc.d), ("loops", loops),
               ("swaps", swaps), ("eig_evaluations", evals),
               ("distinct_evaluations", evaluator.eval_counter), ("final_eig", history[-1]),
               ("converged", converged), ("truncated", truncated), ("model_solves", delta)]
    write_csv(out / "optimize_summary.csv", ["field", "value"], summary, cfg)
    print(f"design: {list(design.indices)}")
    print(f"final EIG: {history[-1]!r}")
    print(f"loops = {loops}, swaps = {swaps}, EIG evaluations = {evals}, model solves = {delta}")
    return 0


def cmd_evaluate(cfg: RunConfig, args):
    out = _out_dir(args)
    arc = _load_archive(args, cfg, _expected_d(cfg, _config_layout(cfg)))
    design = read_design_file(args.design, arc.d)
    low = arc.offline()
    value = EigEvaluator(low, arc.noise(), cache=False).compute(design)
    bound = bound_from_factors(low.rho, low.delta, arc.noise().sigma_min_sq)
    write_csv(out / "evaluate.csv", ["design", "eig", "bound", "bound_label"],
              [(" ".join(map(str, design.indices)), value, bound.value, bound.label)], cfg)
    print(f"EIG: {value!r}")
    print(f"error bound ({bound.label}): {bound.value!r}")
    return 0


def cmd_baselines(cfg: RunConfig, args):
    out = _out_dir(args)
    arc = _load_archive(args, cfg, _expected_d(cfg, _config_layout(cfg)))
    op = cfg.optimize
    d, r = arc.d, op.r
    if not 1 <= r <= d:
        raise DimensionMismatch(f"r = {r} is not in [1, {d}]")
    evaluator = EigEvaluator(arc.offline(), arc.noise())
    rows = []

    def timed(fn):
        t0 = time.perf_counter()
        res = fn()
        return res, time.perf_counter() - t0

    trace, t = timed(lambda: swapping_greedy(evaluator, d, r, op.max_loops, eig_tol=op.eig_tol))
    rows.append(("swapping", r, trace.final_value, " ".join(map(str, trace.final_design.indices)), t, "ok"))
    design, t = timed(lambda: standard_greedy(evaluator, d, r))
    rows.append(("standard", r, evaluator(design), " ".join(map(str, design.indices)), t, "ok"))
    if math.comb(d, r) <= op.exhaustive_cap:
        (best, value), t = timed(lambda: exhaustive_search(evaluator, d, r, op.exhaustive_cap))
        rows.append(("exhaustive", r, value, " ".join(map(str, best.indices)), t, "ok"))
    else:
        rows.append(("exhaustive", r, float("nan"), "", 0.0, "skipped"))
    sample, t = timed(lambda: random_design_sample(evaluator, d, r, op.random_n, op.random_seed))
    best_design, best_value = max(sample, key=lambda dv: dv[1])
    rows.append((f"random_max_of_{op.random_n}", r, best_value,
                 " ".join(map(str, best_design.indices)), t, "ok"))
    write_csv(out / "baselines.csv", ["baseline", "r", "eig", "design", "wall_time_s", "status"], rows, cfg)
    write_csv(out / "random_designs.csv", ["draw", "design", "eig", "random_seed"],
              [(i, " ".join(map(str, D.indices)), v, op.random_seed) for i, (D, v) in enumerate(sample)],
              cfg)
    for row in rows:
        print(f"{row[0]:>20s}  r={row[1]}  EIG={row[2]!r}  [{row[5]}]")
    return 0


def cmd_spectrum(cfg: RunConfig, args):
    out = _out_dir(args)
    rows = []
    for n in cfg.spectrum.resolutions:
        problem = problem_from_config(cfg, n=n)
        dense = assemble_offline(problem.model, problem.goal, mode="exact")
        for name, M in (("delta_h_d", dense.delta_h_d), ("h_d_rho", dense.h_d_rho)):
            evals = np.sort(np.linalg.eigvalsh(M))[::-1]
            for i, v in enumerate(evals):
                rows.append((n, problem.grid.d_m, name, i, v))
        lead = np.sort(np.linalg.eigvalsh(dense.delta_h_d))[::-1][:cfg.spectrum.count]
        print(f"n = {n}, d_m = {problem.grid.d_m}: leading Delta H_d eigenvalues {np.array2string(lead, precision=4)}")
    write_csv(out / "spectrum.csv", ["n", "d_m", "matrix", "index", "eigenvalue"], rows, cfg)
    return 0


COMMANDS = {
    "offline": cmd_offline,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "baselines": cmd_baselines,
    "spectrum": cmd_spectrum,
}


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI configuration file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--seed", type=_u64, default=argparse.SUPPRESS,
                        help="overrides the sketch and random-baseline seeds")
    parser = argparse.ArgumentParser(prog="gooed", parents=[common],
                                     description="Goal-oriented sensor placement")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("offline", parents=[common], help="build and archive eigenfactors")
    for name, text in (("optimize", "swapping greedy on an archive"),
                       ("baselines", "standard greedy, exhaustive and random designs")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--archive", help=f"archive path (default OUT/{ARCHIVE_NAME})")
    p = sub.add_parser("evaluate", parents=[common], help="EIG and error bound of one design")
    p.add_argument("--archive", help=f"archive path (default OUT/{ARCHIVE_NAME})")
    p.add_argument("--design", required=True, help="design file (sensor indices)")
    sub.add_parser("spectrum", parents=[common], help="dense spectra at several resolutions")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    for key, default in (("config", None), ("out", "out"), ("seed", None)):
        if not hasattr(args, key):
            setattr(args, key, default)
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DimensionMismatch, ArchiveError) as exc:
        print(f"input mismatch: {exc}", file=sys.stderr)
        return 4
    except EvaluationError as exc:
        code = 4 if isinstance(exc.__cause__, DimensionMismatch) else 3
        print(f"evaluation error: {exc}", file=sys.stderr)
        return code
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
