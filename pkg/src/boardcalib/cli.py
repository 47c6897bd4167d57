"""Command line front end: ``boardcalib simulate | calibrate | eval | grid-trial | alpha-sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import CalibrationError, IoFailure
from .evaluation import (
    PR_THRESHOLDS,
    alpha_sweep,
    convergence_summary,
    euler_error_deg,
    grid_trials,
    precision_recall,
    projection_error_px,
    std_table,
    std_vs_distance,
    translation_error_m,
)
from .io import (
    build_report,
    generate_dataset,
    load_dataset,
    read_report,
    transform_from_dict,
    transform_to_dict,
    write_csv,
    write_json,
    write_report,
)
from .pipeline import METHODS, calibrate, detect_all
from .search import coarse_grid_search, generate_candidates

log = logging.getLogger("boardcalib")

LOG_ENV = "BOARDCALIB_LOG_LEVEL"


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {out}: {exc}") from exc
    return out


def _pipeline_config(args, dataset):
    doc = cfgmod.load_config(args.config)
    cfg = cfgmod.pipeline_from_dict(doc.get("pipeline", {}), dataset.nominal_extrinsic())
    over = {}
    if getattr(args, "method", None):
        over["method"] = args.method
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "threads", None):
        over["threads"] = args.threads
    return replace(cfg, **over) if over else cfg


def _detections(dataset, cfg):
    frames, reports, _ = detect_all(dataset.pairs(), dataset.camera, dataset.geometry, cfg)
    return frames, reports


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    doc = cfgmod.load_config(args.config)
    scen = dict(doc.get("scenario", {}))
    if args.seed is not None:
        scen["seed"] = args.seed
    cfg = cfgmod.scenario_from_dict(scen)
    record = dict(scen, seed=cfg.seed, nominal_extrinsic=transform_to_dict(cfgmod.nominal_extrinsic(cfg, scen)))
    out = generate_dataset(cfg, args.out, scenario=record)
    print(f"wrote {len(cfg.trajectory)} frames to {out}")
    return 0


def detection_stats(frames, reports) -> dict:
    return {
        "frames": len(frames),
        "clusters": int(sum(len(r.scores) for r in reports)),
        "accepted_clusters": int(sum(sum(r.accepted) for r in reports)),
        "camera_targets": int(sum(len(f.target_ids) for f in frames)),
        "frames_with_both": int(sum(bool(f.clusters and f.board_poses) for f in frames)),
    }


def cmd_calibrate(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = _pipeline_config(args, ds)
    out = _out_dir(args.out)
    result = calibrate(ds.pairs(), ds.camera, ds.geometry, cfg)
    doc = build_report(result, detection_stats(result.detections, result.frame_reports))
    path = write_report(doc, out)
    e = doc["extrinsic"]["euler_deg"]
    print(
        f"{doc['method']}: roll {e['roll_deg']:.4f} pitch {e['pitch_deg']:.4f} yaw {e['yaw_deg']:.4f} deg, "
        f"t = {np.round(doc['extrinsic']['translation_m'], 4).tolist()} m -> {path}"
    )
    return 0 if doc["converged"] else 5


def _error_rows(ds, report):
    truth = ds.true_extrinsic()
    tframes = ds.truth_frames()
    rows = []
    for method, res in report["results"].items():
        est = transform_from_dict(res["extrinsic"], f"results.{method}.extrinsic")
        e = euler_error_deg(est, truth)
        t = translation_error_m(est, truth)
        proj = projection_error_px(est, tframes, ds.camera)
        rows.append([str(ds.root), method, *e.tolist(), *t.tolist(), float(proj.mean()) if len(proj) else float("nan")])
    return rows


def cmd_eval(args) -> int:
    datasets = [load_dataset(p) for p in args.dataset]
    for ds in datasets:
        if not ds.has_truth:
            raise IoFailure(f"dataset {ds.root} has no ground truth to evaluate against")
    out = _out_dir(args.out)
    summary = {}
    if args.report:
        if len(args.report) != len(datasets):
            raise IoFailure("--report must be given once per --dataset")
        rows = []
        for ds, rp in zip(datasets, args.report):
            rows += _error_rows(ds, read_report(rp))
        header = ["dataset", "method", "roll_error_deg", "pitch_error_deg", "yaw_error_deg",
                  "tx_error_m", "ty_error_m", "tz_error_m", "projection_error_px"]
        write_csv(out / "errors.csv", header, rows)
        std_rows = []
        for method in sorted({r[1] for r in rows}):
            s = std_table([r[2:5] for r in rows if r[1] == method])
            n = sum(r[1] == method for r in rows)
            std_rows += [[method, axis, n, s[axis]] for axis in ("roll", "pitch", "yaw")]
        write_csv(out / "std.csv", ["method", "axis", "runs", "std_deg"], std_rows)
        summary["errors"] = len(rows)
    if args.pr:
        pr_reports, pr_labels = [], []
        for ds in datasets:
            cfg = _pipeline_config(args, ds)
            _, reports = _detections(ds, cfg)
            pr_reports += reports
            pr_labels += [ds.labels(k) for k in range(len(ds))]
        pts = precision_recall(pr_reports, pr_labels, PR_THRESHOLDS)
        write_csv(out / "pr.csv", ["threshold", "precision", "recall", "tp", "fp", "fn"],
                  [[p.threshold, p.precision, p.recall, p.tp, p.fp, p.fn] for p in pts])
        summary["pr_points"] = len(pts)
    if args.intervals:
        runs = []
        for k, ds in enumerate(datasets):
            cfg = _pipeline_config(args, ds)
            frames, _ = _detections(ds, cfg)
            init = cfg.initial_extrinsic
            if args.report:
                init = transform_from_dict(read_report(args.report[k])["coarse_extrinsic"], "coarse_extrinsic")
            runs.append((frames, init, ds.true_extrinsic()))
        cfg = _pipeline_config(args, datasets[0])
        rows = std_vs_distance(runs, datasets[0].camera, datasets[0].geometry, cfg, args.intervals)
        write_csv(out / "std_vs_distance.csv", ["interval_m", "method", "runs", "roll_std_deg", "pitch_std_deg", "yaw_std_deg"], rows)
        summary["std_vs_distance_rows"] = len(rows)
    write_json(out / "eval.json", summary)
    print(json.dumps(summary))
    return 0


def cmd_grid_trial(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = _pipeline_config(args, ds)
    out = _out_dir(args.out)
    rows = []
    if args.trials > 0:
        frames, _ = _detections(ds, cfg)
        rows = grid_trials(frames, ds.true_extrinsic(), ds.camera, ds.geometry, cfg, args.trials,
                           args.perturb_deg, seed=cfg.seed)
    header = list(asdict(rows[0]).keys()) if rows else [
        "trial", "grid_search", "init_roll_deg", "init_pitch_deg", "init_yaw_deg",
        "final_error_deg", "translation_error_m", "converged", "failure",
    ]
    write_csv(out / "grid_trials.csv", header, [list(asdict(r).values()) for r in rows])
    summary = {"trials": args.trials, **convergence_summary(rows)}
    write_json(out / "grid_trials.json", summary)
    print(json.dumps(summary))
    return 0


def cmd_alpha_sweep(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = _pipeline_config(args, ds)
    out = _out_dir(args.out)
    frames, _ = _detections(ds, cfg)
    init = cfg.initial_extrinsic
    if cfg.grid_search:
        init = coarse_grid_search(frames, generate_candidates(init, cfg.search), cfg.board, ds.geometry, cfg.search).extrinsic
    rows = alpha_sweep(frames, init, ds.true_extrinsic(), ds.truth_frames(), ds.camera, cfg, args.alphas)
    header = list(asdict(rows[0]).keys()) if rows else ["alpha_m"]
    write_csv(out / "alpha_sweep.csv", header, [list(asdict(r).values()) for r in rows])
    for r in rows:
        print(f"alpha {r.alpha_m:.3f} m: projection error {r.projection_error_px:.3f} px")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boardcalib", description="Target-based LiDAR-camera extrinsic calibration.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True, out=True):
        sp.add_argument("--config", type=Path, help="JSON config with 'scenario' and/or 'pipeline' sections")
        if dataset:
            sp.add_argument("--dataset", type=Path, required=True)
        if out:
            sp.add_argument("--out", type=Path, required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--method", choices=METHODS)
        sp.add_argument("--threads", type=int)

    s = sub.add_parser("simulate", help="write a simulated dataset")
    common(s, dataset=False)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate", help="run the full pipeline on a dataset")
    common(s)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("eval", help="score reports and detections against ground truth")
    s.add_argument("--config", type=Path)
    s.add_argument("--dataset", type=Path, nargs="+", required=True)
    s.add_argument("--report", type=Path, nargs="+", help="one report (file or directory) per dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--pr", action="store_true", help="emit the detection precision/recall curve")
    s.add_argument("--intervals", type=float, nargs="+", help="down-sampling distances (m) for the STD table")
    s.add_argument("--seed", type=int)
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grid-trial", help="convergence from random initial rotations, with and without grid search")
    common(s)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--perturb-deg", type=float, default=10.0)
    s.set_defaults(func=cmd_grid_trial)

    s = sub.add_parser("alpha-sweep", help="indirect-method projection error per box thickness")
    common(s)
    s.add_argument("--alphas", type=float, nargs="+", default=[round(0.01 * k, 2) for k in range(11)])
    s.set_defaults(func=cmd_alpha_sweep)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CalibrationError as exc:
        payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(payload), file=sys.stderr)
        out = getattr(args, "out", None)
        if out is not None and Path(out).is_dir():
            write_json(Path(out) / "error.json", payload)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
