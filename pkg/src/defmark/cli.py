"""Command-line surface: `register` (one source onto one target), `evaluate`
(predicted vs ground-truth landmarks) and `batch` (one source against a
directory of targets, with a CSV summary).

Exit codes: 0 success, 2 bad input, 3 numerical failure, 4 batch failure
threshold exceeded. DEFMARK_LOG=debug|info|warning|error selects verbosity.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DefmarkError, DegenerateGeometryError, InputError, NumericalError
from .geometry import TriMesh
from .model_io import (
    LandmarkSet,
    ReportDocument,
    read_landmarks,
    read_mesh,
    write_landmarks,
    write_mesh,
    write_report,
)
from .rigid import CpdParams
from .solver import SolverParams, register

__all__ = ["EvaluationOutcome", "landmark_error", "main"]

_log = logging.getLogger("defmark")

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_BATCH_FAILURES = 4

_MESH_SUFFIXES = (".obj", ".ply")


@dataclass
class EvaluationOutcome:
    """Per-landmark Euclidean errors (mm), their mean and their median."""

    per_landmark: list  # (name, mm)
    err_avg: float
    err_median_landmark: float


def landmark_error(predicted, truth):
    """Distance between predicted and ground-truth landmarks, paired by index.

    Landmark order defines the pairing; when both sets carry names they must
    agree index by index.
    """
    if len(predicted) != len(truth):
        raise InputError(
            f"landmark count mismatch: predicted has {len(predicted)}, "
            f"truth has {len(truth)}; the error metric pairs landmarks by index, "
            f"so both sets must list the same landmarks in the same order"
        )
    if len(predicted) == 0:
        raise InputError("cannot evaluate empty landmark sets")
    for i, (a, b) in enumerate(zip(predicted.names, truth.names)):
        if a != b:
            raise InputError(
                f"landmark name mismatch at index {i}: predicted {a!r} vs truth {b!r}"
            )
    d = np.linalg.norm(predicted.positions - truth.positions, axis=1)
    return EvaluationOutcome(
        per_landmark=[(name, float(e)) for name, e in zip(predicted.names, d)],
        err_avg=float(np.mean(d)),
        err_median_landmark=float(np.median(d)),
    )


# ---------------------------------------------------------------------------
# option handling
# ---------------------------------------------------------------------------

# name -> (converter, default) for options that may come from a config file
_OPTIONS = {
    "source": (str, None),
    "source_landmarks": (str, None),
    "target": (str, None),
    "truth": (str, None),
    "out": (str, None),
    "targets_dir": (str, None),
    "nodes": (int, 500),
    "k_influence": (int, 10),
    "k_node": (int, 6),
    "alpha": (float, 2000.0),
    "max_iters": (int, 50),
    "tol": (float, 1e-5),
    "reject_multiplier": (float, None),
    "cpd_w": (float, 0.1),
    "cpd_subsample": (int, 3000),
    "seed": (int, 0),
    "no_rigid_init": (lambda s: s.lower() in ("1", "true", "yes", "on"), False),
    "jobs": (int, 1),
    "max_failures": (int, None),
}


def _read_config_file(path):
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower().replace("-", "_")
        if key not in _OPTIONS:
            raise InputError(f"{path}:{lineno}: unknown option {key!r}")
        values[key] = value.strip()
    return values


def _merge_options(args):
    """Config file supplies defaults; explicit flags win."""
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    merged = {}
    for name, (conv, default) in _OPTIONS.items():
        cli_value = getattr(args, name, None)
        if name == "no_rigid_init" and cli_value is False:
            cli_value = None  # store_true default: absent unless given
        if cli_value is not None:
            merged[name] = cli_value
        elif name in file_values:
            try:
                merged[name] = conv(file_values[name])
            except ValueError:
                raise InputError(
                    f"config option {name}={file_values[name]!r} is not a valid value"
                ) from None
        else:
            merged[name] = default
    return merged


def _solver_params(opts, seed=None):
    return SolverParams(
        alpha=opts["alpha"],
        node_count=opts["nodes"],
        k_influence=opts["k_influence"],
        k_node=opts["k_node"],
        max_outer_iterations=opts["max_iters"],
        relative_energy_tolerance=opts["tol"],
        correspondence_reject_multiplier=opts["reject_multiplier"],
        seed=opts["seed"] if seed is None else seed,
    )


def _cpd_params(opts):
    return CpdParams(
        outlier_weight=opts["cpd_w"],
        subsample_cap=opts["cpd_subsample"] if opts["cpd_subsample"] > 0 else None,
    )


def _require_file(path, what):
    if path is None:
        raise InputError(f"missing required {what}")
    if not Path(path).is_file():
        raise InputError(f"{what} {path} does not exist")
    return Path(path)


def _ensure_dir(path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc}") from exc


def _params_echo(opts):
    solver = asdict(_solver_params(opts))
    cpd = asdict(_cpd_params(opts))
    return {"solver": solver, "cpd": cpd, "rigid_init": not opts["no_rigid_init"]}


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------


def _register_one(source_mesh, source_lms, target_path, opts, out_dir, seed, truth_path=None):
    """Run one registration and write deformed.obj / predicted_landmarks.csv /
    report.json into out_dir. Returns (result, outcome, seconds)."""
    target_mesh = read_mesh(target_path)
    truth = read_landmarks(truth_path) if truth_path else None
    t0 = time.perf_counter()
    result = register(
        source_mesh,
        source_lms,
        target_mesh,
        params=_solver_params(opts, seed=seed),
        cpd_params=_cpd_params(opts),
        rigid_init=not opts["no_rigid_init"],
    )
    seconds = time.perf_counter() - t0
    outcome = landmark_error(result.predicted_landmarks, truth) if truth else None

    _ensure_dir(out_dir)
    written = []
    try:
        deformed_path = out_dir / "deformed.obj"
        write_mesh(TriMesh(result.deformed_source, source_mesh.faces), deformed_path)
        written.append(deformed_path)
        landmarks_path = out_dir / "predicted_landmarks.csv"
        write_landmarks(result.predicted_landmarks, landmarks_path)
        written.append(landmarks_path)
        report_path = out_dir / "report.json"
        report = ReportDocument(
            per_landmark_errors=dict(outcome.per_landmark) if outcome else {},
            err_avg=outcome.err_avg if outcome else None,
            err_median_landmark=outcome.err_median_landmark if outcome else None,
            params=_params_echo(opts),
            energy_trace=result.energy_trace,
            timings_ms=result.timings_ms,
        )
        write_report(report, report_path)
        written.append(report_path)
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return result, outcome, seconds


def run_register(args):
    opts = _merge_options(args)
    source_path = _require_file(opts["source"], "--source mesh")
    lms_path = _require_file(opts["source_landmarks"], "--source-landmarks file")
    target_path = _require_file(opts["target"], "--target mesh")
    truth_path = _require_file(opts["truth"], "--truth file") if opts["truth"] else None
    if opts["out"] is None:
        raise InputError("missing required --out directory")
    out_dir = Path(opts["out"])

    source_mesh = read_mesh(source_path)
    source_lms = read_landmarks(lms_path)
    result, outcome, seconds = _register_one(
        source_mesh, source_lms, target_path, opts, out_dir, opts["seed"], truth_path
    )
    print(
        f"registered {source_path.name} -> {target_path.name}: "
        f"{result.outer_iterations_run} outer iterations, "
        f"converged={result.converged}, {seconds:.2f}s"
    )
    if outcome is not None:
        print(f"Err_avg = {outcome.err_avg:.6f} mm over {len(outcome.per_landmark)} landmarks")
    print(f"outputs in {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def run_evaluate(args):
    predicted = read_landmarks(_require_file(args.predicted, "predicted landmarks"))
    truth = read_landmarks(_require_file(args.truth, "truth landmarks"))
    outcome = landmark_error(predicted, truth)
    width = max(len(name) for name, _ in outcome.per_landmark)
    print(f"{'landmark':<{width}}  error_mm")
    for name, err in outcome.per_landmark:
        print(f"{name:<{width}}  {err:.6f}")
    print(f"{'Err_avg':<{width}}  {outcome.err_avg:.6f}")
    print(f"{'Err_median':<{width}}  {outcome.err_median_landmark:.6f}")
    if args.out:
        report = ReportDocument(
            per_landmark_errors=dict(outcome.per_landmark),
            err_avg=outcome.err_avg,
            err_median_landmark=outcome.err_median_landmark,
            params={},
            energy_trace=[],
            timings_ms={},
        )
        write_report(report, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# batch
# ---------------------------------------------------------------------------


def _batch_task(task):
    """Worker for one batch model; returns a summary row dict."""
    opts = task["opts"]
    source_mesh = read_mesh(task["source"])
    source_lms = read_landmarks(task["source_landmarks"])
    row = {
        "model_id": task["model_id"],
        "err_avg": None,
        "err_median_landmark": None,
        "iterations": None,
        "seconds": None,
        "status": "ok",
    }
    try:
        result, outcome, seconds = _register_one(
            source_mesh,
            source_lms,
            task["target"],
            opts,
            Path(task["out_dir"]),
            task["seed"],
            task["truth"],
        )
        row["iterations"] = result.outer_iterations_run
        row["seconds"] = seconds
        if outcome is not None:
            row["err_avg"] = outcome.err_avg
            row["err_median_landmark"] = outcome.err_median_landmark
    except DefmarkError as exc:
        row["status"] = f"failed: {exc}"
    return row


def run_batch(args):
    opts = _merge_options(args)
    source_path = _require_file(opts["source"], "--source mesh")
    lms_path = _require_file(opts["source_landmarks"], "--source-landmarks file")
    if opts["targets_dir"] is None:
        raise InputError("missing required --targets-dir")
    targets_dir = Path(opts["targets_dir"])
    if not targets_dir.is_dir():
        raise InputError(f"targets directory {targets_dir} does not exist")
    if opts["out"] is None:
        raise InputError("missing required --out directory")
    out_dir = Path(opts["out"])
    _ensure_dir(out_dir)

    targets = sorted(
        p for p in targets_dir.iterdir() if p.suffix.lower() in _MESH_SUFFIXES
    )
    if not targets:
        raise InputError(f"no .obj/.ply meshes found in {targets_dir}")

    # validate the shared inputs once up front
    read_mesh(source_path)
    read_landmarks(lms_path)

    tasks = []
    for index, target in enumerate(targets):
        truth = target.with_suffix(".csv")
        tasks.append(
            {
                "model_id": target.stem,
                "source": str(source_path),
                "source_landmarks": str(lms_path),
                "target": str(target),
                "truth": str(truth) if truth.is_file() else None,
                "out_dir": str(out_dir / target.stem),
                "seed": opts["seed"] + index,
                "opts": opts,
            }
        )

    jobs = max(1, opts["jobs"])
    if jobs == 1:
        rows = [_batch_task(task) for task in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_batch_task, tasks))

    summary_path = out_dir / "batch_summary.csv"
    _write_batch_summary(rows, summary_path)

    failures = sum(1 for r in rows if r["status"] != "ok")
    for row in rows:
        if row["status"] != "ok":
            print(f"{row['model_id']}: {row['status']}", file=sys.stderr)
    print(f"batch: {len(rows) - failures}/{len(rows)} models registered; summary in {summary_path}")
    if failures == len(rows):
        return EXIT_BATCH_FAILURES
    if opts["max_failures"] is not None and failures > opts["max_failures"]:
        return EXIT_BATCH_FAILURES
    return EXIT_OK


def _write_batch_summary(rows, path):
    errs = [r["err_avg"] for r in rows if r["status"] == "ok" and r["err_avg"] is not None]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model_id", "err_avg", "err_median_landmark", "iterations", "seconds", "status"]
        )
        for r in rows:
            writer.writerow(
                [
                    r["model_id"],
                    "" if r["err_avg"] is None else repr(r["err_avg"]),
                    "" if r["err_median_landmark"] is None else repr(r["err_median_landmark"]),
                    "" if r["iterations"] is None else r["iterations"],
                    "" if r["seconds"] is None else f"{r['seconds']:.3f}",
                    r["status"],
                ]
            )
        avg = repr(float(np.mean(errs))) if errs else ""
        mid = repr(float(np.median(errs))) if errs else ""
        writer.writerow(["Avg.", avg, "", "", "", ""])
        writer.writerow(["Mid.", mid, "", "", "", ""])


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _add_common_options(parser, batch=False):
    parser.add_argument("--source", help="source mesh (.obj/.ply) carrying the landmarks")
    parser.add_argument("--source-landmarks", dest="source_landmarks",
                        help="CSV of landmarks annotated on the source")
    if batch:
        parser.add_argument("--targets-dir", dest="targets_dir",
                            help="directory of target meshes (ground-truth CSVs matched by stem)")
        parser.add_argument("--jobs", type=int, help="parallel worker slots (default 1)")
        parser.add_argument("--max-failures", dest="max_failures", type=int,
                            help="exit 4 when more than this many models fail (default: only when all fail)")
    else:
        parser.add_argument("--target", help="target mesh to predict landmarks on")
        parser.add_argument("--truth", help="optional ground-truth landmark CSV for the target")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--config", help="key=value file supplying defaults for any flag")
    parser.add_argument("--nodes", type=int, help="deformation node count (default 500)")
    parser.add_argument("--k-influence", dest="k_influence", type=int,
                        help="nodes influencing each vertex (default 10)")
    parser.add_argument("--k-node", dest="k_node", type=int,
                        help="neighbors per node in the smoothness graph (default 6)")
    parser.add_argument("--alpha", type=float, help="alignment weight (default 2000)")
    parser.add_argument("--max-iters", dest="max_iters", type=int,
                        help="outer iteration cap (default 50)")
    parser.add_argument("--tol", type=float,
                        help="relative total-energy convergence tolerance (default 1e-5)")
    parser.add_argument("--reject-multiplier", dest="reject_multiplier", type=float,
                        help="drop pairs farther than this multiple of the median (default off)")
    parser.add_argument("--cpd-w", dest="cpd_w", type=float,
                        help="CPD outlier weight (default 0.1)")
    parser.add_argument("--cpd-subsample", dest="cpd_subsample", type=int,
                        help="CPD per-cloud point cap, 0 disables (default 3000)")
    parser.add_argument("--seed", type=int, help="RNG seed (default 0)")
    parser.add_argument("--no-rigid-init", dest="no_rigid_init", action="store_true",
                        default=False, help="skip CPD for pre-aligned inputs")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="defmark",
        description="Predict landmarks on a 3D scan by deforming an annotated source model onto it.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_register = sub.add_parser("register", help="register one source onto one target")
    _add_common_options(p_register)
    p_register.set_defaults(func=run_register)

    p_evaluate = sub.add_parser("evaluate", help="compare predicted vs ground-truth landmarks")
    p_evaluate.add_argument("predicted", help="predicted landmark CSV")
    p_evaluate.add_argument("truth", help="ground-truth landmark CSV")
    p_evaluate.add_argument("--out", help="also write a report JSON here")
    p_evaluate.set_defaults(func=run_evaluate)

    p_batch = sub.add_parser("batch", help="register one source against a directory of targets")
    _add_common_options(p_batch, batch=True)
    p_batch.set_defaults(func=run_batch)
    return parser


def _configure_logging():
    level_name = os.environ.get("DEFMARK_LOG", "warning").strip().lower()
    level = {
        "debug": logging.DEBUG,
        "info": logging.INFO,
        "warning": logging.WARNING,
        "error": logging.ERROR,
    }.get(level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _configure_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DegenerateGeometryError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DefmarkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
