"""Experiment protocols against simulator ground truth.

Covers detection precision/recall over a threshold sweep, extrinsic errors,
standard deviations across repeated trajectories, grid-search convergence
trials, the alpha sweep, and robustness to distance down-sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CalibrationError
from .geom import PinholeCamera, RigidTransform, euler_to_matrix, project_unchecked, rotation_error_euler
from .pipeline import PipelineConfig, optimize_extrinsic, select_by_distance
from .search import coarse_grid_search, generate_candidates

PR_THRESHOLDS = np.round(np.arange(0.70, 0.99 + 1e-9, 0.01), 2)


# ---------------------------------------------------------------- detection


@dataclass
class PRPoint:
    threshold: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def _majority(labels):
    vals, counts = np.unique(labels, return_counts=True)
    return int(vals[np.argmax(counts)])


def precision_recall(frame_reports, frame_labels, thresholds=PR_THRESHOLDS, min_points: int = 30) -> list[PRPoint]:
    """Board detection precision and recall at each threshold.

    A cluster is a true board detection when most of its points carry one
    board label.  Recall counts every board with at least ``min_points``
    returns in a frame, so boards lost by segmentation count as misses.
    Precision is over accepted clusters.
    """
    records = []  # (score, board id or -1) per cluster
    visible = []  # set of board ids per frame
    for rep, labels in zip(frame_reports, frame_labels):
        labels = np.asarray(labels)
        ids, counts = np.unique(labels[labels >= 0], return_counts=True)
        visible.append({int(i) for i, c in zip(ids, counts) if c >= min_points})
        frame_recs = []
        for idx, score in zip(rep.cluster_indices, rep.scores):
            lab = _majority(labels[idx])
            frame_recs.append((score, lab if lab >= 0 else -1))
        records.append(frame_recs)
    out = []
    for th in thresholds:
        tp = fp = fn = 0
        for recs, vis in zip(records, visible):
            found = set()
            for score, lab in recs:
                if score >= th:
                    if lab >= 0 and lab not in found:
                        found.add(lab)
                        tp += 1
                    else:
                        fp += 1
            fn += len(vis - found)
        prec = tp / (tp + fp) if tp + fp else 1.0
        rec = tp / (tp + fn) if tp + fn else 1.0
        out.append(PRPoint(float(th), prec, rec, tp, fp, fn))
    return out


# ---------------------------------------------------------------- errors


def euler_error_deg(estimate: RigidTransform, truth: RigidTransform) -> np.ndarray:
    return np.degrees(rotation_error_euler(estimate.rotation, truth.rotation))


def translation_error_m(estimate: RigidTransform, truth: RigidTransform) -> np.ndarray:
    return estimate.translation - truth.translation


def projection_error_px(extrinsic: RigidTransform, truth_frames, cam: PinholeCamera) -> np.ndarray:
    """Per-frame mean pixel distance between true corners and true LiDAR vertices projected with ``extrinsic``.

    ``truth_frames`` items need ``vertices_lidar_m`` and ``corners_px`` mappings
    keyed by board id; boards whose true corners leave the image are skipped.
    """
    to_cam = extrinsic.inverse()
    out = []
    for tf in truth_frames:
        errs = []
        for k, verts in tf["vertices_lidar_m"].items():
            corners = np.asarray(tf["corners_px"][k])
            pc = to_cam.apply(np.asarray(verts)[1:])
            if np.any(pc[:, 2] <= 0.1) or not np.all(cam.contains(corners)):
                continue
            errs.append(np.linalg.norm(project_unchecked(cam, pc) - corners, axis=1).mean())
        if errs:
            out.append(float(np.mean(errs)))
    return np.array(out)


def truth_frames_from_sim(cfg, frames) -> list[dict]:
    """Truth dictionaries (as stored on disk) straight from a scenario."""
    from .sim import board_to_camera

    out = []
    to_world = [b.pose for b in cfg.boards]
    for i in frames:
        to_lidar = cfg.lidar_pose(i).inverse()
        verts, corners = {}, {}
        for k, b in enumerate(cfg.boards):
            verts[k] = to_lidar.apply(to_world[k].apply(b.model.vertices))
            corners[k] = project_unchecked(cfg.camera, board_to_camera(cfg, i, k).apply(b.model.corners))
        out.append({"index": i, "vertices_lidar_m": verts, "corners_px": corners})
    return out


def std_table(errors_deg) -> dict[str, float]:
    """Sample standard deviation (ddof=1) of Euler errors across repeated runs."""
    e = np.asarray(errors_deg, dtype=float).reshape(-1, 3)
    if len(e) < 2:
        return {"roll": float("nan"), "pitch": float("nan"), "yaw": float("nan")}
    s = e.std(axis=0, ddof=1)
    return {"roll": float(s[0]), "pitch": float(s[1]), "yaw": float(s[2])}


# ---------------------------------------------------------------- experiments


def perturb(truth: RigidTransform, rng: np.random.Generator, max_deg: float, max_trans: float = 0.0):
    """``truth`` with a uniform random Euler perturbation (and optional translation jitter)."""
    d = np.radians(rng.uniform(-max_deg, max_deg, 3))
    t = rng.uniform(-max_trans, max_trans, 3) if max_trans > 0 else np.zeros(3)
    return RigidTransform(euler_to_matrix(*d) @ truth.rotation, truth.translation + t), np.degrees(d)


def run_solver(frames, init: RigidTransform, cam, geometry, cfg: PipelineConfig, grid: bool):
    """Grid search (optional) plus optimization; returns results by method, or raises."""
    coarse = init
    if grid:
        cands = generate_candidates(init, cfg.search)
        coarse = coarse_grid_search(frames, cands, cfg.board, geometry, cfg.search).extrinsic
    return optimize_extrinsic(frames, coarse, cam, cfg)


@dataclass
class TrialRow:
    trial: int
    grid_search: bool
    init_roll_deg: float
    init_pitch_deg: float
    init_yaw_deg: float
    final_error_deg: float
    translation_error_m: float
    converged: bool
    failure: str


def grid_trials(
    frames,
    truth: RigidTransform,
    cam,
    geometry,
    cfg: PipelineConfig,
    n_trials: int,
    perturb_deg: float = 10.0,
    seed: int = 0,
    tol_deg: float = 0.5,
    tol_m: float = 0.1,
) -> list[TrialRow]:
    """Convergence of the direct solver from random initial rotations.

    Every trial's perturbation is solved twice, with and without the grid
    search.  A run converges when it finishes without error and lands within
    ``tol_deg`` per Euler axis and ``tol_m`` translation of the truth.
    """
    rng = np.random.default_rng(seed)
    cfg = replace(cfg, method="direct")
    rows = []
    for k in range(n_trials):
        init, d = perturb(truth, rng, perturb_deg)
        for grid in (True, False):
            err, terr, ok, why = float("nan"), float("nan"), False, ""
            try:
                res = run_solver(frames, init, cam, geometry, cfg, grid)["direct"]
                e = euler_error_deg(res.extrinsic, truth)
                err = float(np.abs(e).max())
                terr = float(np.linalg.norm(translation_error_m(res.extrinsic, truth)))
                ok = err <= tol_deg and terr <= tol_m
            except CalibrationError as exc:
                why = type(exc).__name__
            rows.append(TrialRow(k, grid, *map(float, d), err, terr, ok, why))
    return rows


def convergence_summary(rows) -> dict[str, float]:
    out = {}
    for grid, name in ((True, "with_grid_search"), (False, "without_grid_search")):
        sel = [r.converged for r in rows if r.grid_search == grid]
        out[name] = float(np.mean(sel)) if sel else float("nan")
    return out


@dataclass
class AlphaRow:
    alpha_m: float
    projection_error_px: float
    residual_px: float
    roll_error_deg: float
    pitch_error_deg: float
    yaw_error_deg: float


def alpha_sweep(frames, init: RigidTransform, truth: RigidTransform, truth_frames, cam, cfg: PipelineConfig, alphas) -> list[AlphaRow]:
    """Indirect calibration at each box half-thickness ``alpha`` (meters)."""
    rows = []
    for a in alphas:
        res = optimize_extrinsic(frames, init, cam, replace(cfg, method="indirect", alpha=float(a)))["indirect"]
        e = euler_error_deg(res.extrinsic, truth)
        proj = projection_error_px(res.extrinsic, truth_frames, cam)
        rows.append(AlphaRow(float(a), float(proj.mean()), float(res.residuals.mean()), *map(float, e)))
    return rows


def std_vs_distance(runs, cam, geometry, cfg: PipelineConfig, intervals, methods=("direct", "indirect")):
    """STD of Euler errors across runs after down-sampling frames by camera travel.

    ``runs`` holds ``(frames, init, truth)`` per trajectory.  Returns rows of
    ``(interval_m, method, n_runs, roll, pitch, yaw)``; failed runs are left out.
    """
    rows = []
    for interval in intervals:
        errs = {m: [] for m in methods}
        for frames, init, truth in runs:
            sel = select_by_distance(frames, interval)
            for m in methods:
                try:
                    res = optimize_extrinsic(sel, init, cam, replace(cfg, method=m))[m]
                except CalibrationError:
                    continue
                errs[m].append(euler_error_deg(res.extrinsic, truth))
        for m in methods:
            s = std_table(errs[m])
            rows.append((float(interval), m, len(errs[m]), s["roll"], s["pitch"], s["yaw"]))
    return rows
