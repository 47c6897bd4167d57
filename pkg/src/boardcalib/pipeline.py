"""End-to-end calibration: detection, grid search, association and optimization."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import BoardModel, FramePair, solve_planar_pnp
from .cloud import RangeImageGeometry, build_range_image, remove_ground, segment
from .descriptor import DescriptorConfig, build_references, describe, match_clusters
from .errors import CalibrationError, DegenerateCluster, NoDetections
from .geom import PinholeCamera, RigidTransform, rotation_angle
from .optimize import (
    BoxCostParams,
    CalibrationResult,
    OptimizerSettings,
    associate_all,
    direct_calibrate,
    indirect_calibrate,
)
from .search import FrameDetections, SearchConfig, SearchResult, coarse_grid_search, generate_candidates

log = logging.getLogger(__name__)

METHODS = ("direct", "indirect", "both")


@dataclass(frozen=True)
class PipelineConfig:
    initial_extrinsic: RigidTransform
    board: BoardModel = BoardModel()
    search: SearchConfig = SearchConfig()
    grid_search: bool = True
    alpha: float = 0.0
    optimizer: OptimizerSettings = OptimizerSettings()
    descriptor: DescriptorConfig | None = None
    threshold: float = 0.94
    method: str = "direct"
    downsample_m: float = 0.0
    search_all_segments: bool = False
    reassociate_rounds: int = 2
    beta_thresh_deg: float = 10.0
    min_cluster_points: int = 30
    outlier_k: float = 3.0
    max_pnp_rms: float = 10.0
    ransac_inlier_px: float = 3.0
    ransac_iterations: int = 200
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.alpha < 0 or self.downsample_m < 0:
            raise ValueError("alpha and downsample_m must be non-negative")
        if not 0 < self.beta_thresh_deg < 90:
            raise ValueError("beta_thresh_deg must lie in (0, 90)")
        if self.min_cluster_points < 3 or self.threads < 1 or self.reassociate_rounds < 0:
            raise ValueError("min_cluster_points >= 3, threads >= 1, reassociate_rounds >= 0")

    @property
    def descriptor_config(self) -> DescriptorConfig:
        return self.descriptor or DescriptorConfig.for_board(self.board.side_length)

    def with_overrides(self, **kw) -> PipelineConfig:
        return replace(self, **kw)


@dataclass
class FrameReport:
    """Per-frame detection outcome, kept for precision/recall evaluation."""

    index: int
    cluster_indices: list[np.ndarray]
    scores: list[float]
    accepted: list[bool]


@dataclass
class PipelineOutput:
    results: dict[str, CalibrationResult]
    coarse: RigidTransform
    search: SearchResult | None
    detections: list[FrameDetections]
    frame_reports: list[FrameReport]
    timings_ms: dict[str, float] = field(default_factory=dict)

    @property
    def primary(self) -> CalibrationResult:
        return self.results.get("direct") or self.results["indirect"]


def detect_lidar(pair: FramePair, geometry: RangeImageGeometry, references, cfg: PipelineConfig):
    """Segment one scan and keep the clusters whose descriptor matches a board."""
    cloud = pair.cloud
    if len(cloud) == 0:
        return [], FrameReport(pair.index, [], [], [])
    img = build_range_image(cloud, geometry, outlier_k=cfg.outlier_k)
    ground = remove_ground(img, cloud)
    clusters = segment(img, cloud, ground, np.radians(cfg.beta_thresh_deg), cfg.min_cluster_points)
    descs, kept = [], []
    for c in clusters:
        try:
            descs.append(describe(cloud.points[c.point_indices], cfg.descriptor_config))
            kept.append(c)
        except DegenerateCluster:
            continue
    matches = match_clusters(descs, references, cfg.threshold) if descs else []
    report = FrameReport(
        pair.index, [c.point_indices for c in kept], [m.score for m in matches], [m.accepted for m in matches]
    )
    chosen = kept if cfg.search_all_segments else [c for c, m in zip(kept, matches) if m.accepted]
    return [cloud.points[c.point_indices] for c in chosen], report


def detect_camera(pair: FramePair, cam: PinholeCamera, cfg: PipelineConfig):
    poses, ids, corners = [], [], []
    for det in pair.detections:
        try:
            pose, rms = solve_planar_pnp(det.corners, cfg.board, cam, cfg.max_pnp_rms)
        except CalibrationError as exc:
            log.debug("frame %d target %d: PnP failed (%s)", pair.index, det.target_id, exc)
            continue
        det.pose, det.rms = pose, rms
        poses.append(pose)
        ids.append(det.target_id)
        corners.append(det.corners)
    return poses, ids, corners


def select_by_distance(frames, interval: float):
    """Keep a frame once the camera has moved ``interval`` meters since the last kept one.

    Displacement is measured from camera positions in the frame of a board
    seen in both frames; frames without targets are skipped.
    """
    if interval <= 0:
        return list(frames)
    kept, last = [], None
    for f in frames:
        if not f.board_poses:
            continue
        here = {tid: p.inverse().translation for tid, p in zip(f.target_ids, f.board_poses)}
        if last is None:
            kept.append(f)
            last = here
            continue
        common = sorted(set(here) & set(last))
        if not common:
            kept.append(f)
            last = here
            continue
        moved = np.mean([np.linalg.norm(here[t] - last[t]) for t in common])
        if moved >= interval:
            kept.append(f)
            last = here
    return kept


def default_references(cfg: PipelineConfig):
    return build_references(cfg.board.side_length, cfg=cfg.descriptor_config)


def detect_all(pairs, cam: PinholeCamera, geometry: RangeImageGeometry, cfg: PipelineConfig, references=None):
    """Run LiDAR and camera detection on every pair; returns detections, reports and timings."""
    references = references or default_references(cfg)
    pairs = list(pairs)

    def lidar(pair):
        return detect_lidar(pair, geometry, references, cfg)

    t0 = time.perf_counter()
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            lidar_out = list(pool.map(lidar, pairs))
    else:
        lidar_out = [lidar(p) for p in pairs]
    t1 = time.perf_counter()
    cam_out = [detect_camera(p, cam, cfg) for p in pairs]
    t2 = time.perf_counter()
    frames = [
        FrameDetections(p.index, clusters, poses, ids, corners)
        for p, (clusters, _), (poses, ids, corners) in zip(pairs, lidar_out, cam_out)
    ]
    reports = [r for _, r in lidar_out]
    return frames, reports, {"lidar_detection_ms": 1e3 * (t1 - t0), "camera_detection_ms": 1e3 * (t2 - t1)}


def optimize_extrinsic(frames, coarse: RigidTransform, cam: PinholeCamera, cfg: PipelineConfig):
    """Associate targets with clusters and run the configured solver(s)."""
    params = BoxCostParams.for_board(cfg.board, cfg.alpha)
    results = {}
    methods = ("direct", "indirect") if cfg.method == "both" else (cfg.method,)
    for method in methods:
        ext = coarse
        targets = associate_all(frames, ext, cfg.board)
        for _ in range(cfg.reassociate_rounds + 1):
            if not targets:
                raise NoDetections("no camera target could be paired with a LiDAR cluster")
            # each round restarts from the latest estimate, so board fits see a better init
            if method == "direct":
                res = direct_calibrate(targets, ext, params, cfg.optimizer, cam)
            else:
                res = indirect_calibrate(
                    targets, ext, cam, cfg.board, params, cfg.optimizer,
                    cfg.ransac_inlier_px, cfg.ransac_iterations, cfg.seed,
                )
            step = res.extrinsic.inverse() @ ext
            ext = res.extrinsic
            before = [(t.frame, t.target_id, len(t.points)) for t in targets]
            targets = associate_all(frames, ext, cfg.board)
            settled = np.degrees(rotation_angle(step.rotation)) < 1e-3 and np.linalg.norm(step.translation) < 1e-4
            if settled and [(t.frame, t.target_id, len(t.points)) for t in targets] == before:
                break
        results[method] = res
    return results


def calibrate(pairs, cam: PinholeCamera, geometry: RangeImageGeometry, cfg: PipelineConfig, references=None):
    """Full pipeline over synchronized frame pairs."""
    frames, reports, timings = detect_all(pairs, cam, geometry, cfg, references)
    frames = select_by_distance(frames, cfg.downsample_m)
    t0 = time.perf_counter()
    search = None
    coarse = cfg.initial_extrinsic
    if cfg.grid_search:
        cands = generate_candidates(coarse, cfg.search)
        search = coarse_grid_search(frames, cands, cfg.board, geometry, cfg.search)
        coarse = search.extrinsic
    elif not any(f.clusters and f.board_poses for f in frames):
        raise NoDetections("no frame has both camera targets and LiDAR board clusters")
    t1 = time.perf_counter()
    results = optimize_extrinsic(frames, coarse, cam, cfg)
    t2 = time.perf_counter()
    timings["grid_search_ms"] = 1e3 * (t1 - t0)
    timings["optimization_ms"] = 1e3 * (t2 - t1)
    return PipelineOutput(results, coarse, search, frames, reports, timings)
