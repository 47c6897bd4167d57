"""Coarse grid search over rotation perturbations of the initial extrinsic.

Each candidate maps the camera-detected board centers into the LiDAR frame;
its score is the number of detected LiDAR board points whose range-image
pixel falls inside the bounding rectangle of a board-sized cube around each
mapped center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import BoardModel
from .cloud import RangeImageGeometry
from .errors import AllZeroScores, NoDetections, OutOfFov
from .geom import RigidTransform, euler_to_matrix


@dataclass(frozen=True)
class SearchConfig:
    range_deg: float = 9.0
    step_deg: float = 1.5
    range_gate: bool = False
    chunk: int = 64

    def __post_init__(self):
        if self.range_deg < 0 or self.step_deg <= 0:
            raise ValueError("search range must be >= 0 and step > 0")
        if self.range_deg > 0 and self.step_deg > self.range_deg:
            raise ValueError("step_deg must not exceed range_deg")

    @property
    def steps(self) -> np.ndarray:
        n = int(round(self.range_deg / self.step_deg)) if self.range_deg > 0 else 0
        return np.radians(np.arange(-n, n + 1) * self.step_deg)


@dataclass(eq=False)
class CandidateSet:
    """Perturbed extrinsics ``euler(d) @ R_init`` sharing the initial translation."""

    initial: RigidTransform
    perturbations: np.ndarray  # (N, 3) roll, pitch, yaw in radians
    rotations: np.ndarray  # (N, 3, 3)
    scores: np.ndarray | None = None

    def __len__(self):
        return len(self.perturbations)

    def candidate(self, i: int) -> RigidTransform:
        return RigidTransform(self.rotations[i], self.initial.translation)

    @property
    def candidates(self) -> list[RigidTransform]:
        return [self.candidate(i) for i in range(len(self))]

    def magnitudes(self) -> np.ndarray:
        """Geodesic angle of each perturbation rotation (radians)."""
        d = euler_to_matrix(*self.perturbations.T)
        c = (np.trace(d, axis1=1, axis2=2) - 1.0) / 2.0
        return np.arccos(np.clip(c, -1.0, 1.0))


@dataclass
class FrameDetections:
    """Detections of one frame after segmentation and matching.

    ``clusters`` hold LiDAR points (frame-local) of descriptor-accepted
    clusters; ``board_poses`` are camera PnP poses (board -> camera) of the
    targets seen in the image, with their ``target_ids``.
    """

    index: int
    clusters: list[np.ndarray] = field(default_factory=list)
    board_poses: list[RigidTransform] = field(default_factory=list)
    target_ids: list[int] = field(default_factory=list)
    corners: list[np.ndarray] = field(default_factory=list)

    def cluster_points(self) -> np.ndarray:
        if not self.clusters:
            return np.empty((0, 3))
        return np.concatenate(self.clusters, axis=0)


@dataclass
class SearchResult:
    extrinsic: RigidTransform
    index: int
    score: int
    candidates: CandidateSet


def generate_candidates(initial: RigidTransform, cfg: SearchConfig = SearchConfig()) -> CandidateSet:
    s = cfg.steps
    r, p, y = np.meshgrid(s, s, s, indexing="ij")
    pert = np.stack([r.ravel(), p.ravel(), y.ravel()], axis=1)
    rots = euler_to_matrix(*pert.T) @ initial.rotation
    # the zero perturbation must reproduce the initial rotation exactly
    rots[np.all(pert == 0, axis=1)] = initial.rotation
    return CandidateSet(initial, pert, rots)


def _cube_offsets(side: float) -> np.ndarray:
    h = side / 2.0
    return np.array([[sx, sy, sz] for sx in (-h, h) for sy in (-h, h) for sz in (-h, h)])


def _roi_bounds(vertices, geometry: RangeImageGeometry):
    """Cell bounds of the 8-vertex footprint; returns unclamped (r0, r1, c0, c1)."""
    rf, cf = geometry.pixel_float(vertices)
    r0 = np.floor(rf.min(axis=-1)).astype(np.int64)
    r1 = np.floor(rf.max(axis=-1)).astype(np.int64)
    c0 = np.floor(cf.min(axis=-1)).astype(np.int64)
    c1 = np.floor(cf.max(axis=-1)).astype(np.int64)
    return r0, r1, c0, c1


def calculate_roi(center, side: float, geometry: RangeImageGeometry) -> tuple[int, int, int, int]:
    """Inclusive ``(row_min, row_max, col_min, col_max)`` covering the cube's projection.

    The cube is axis-aligned in the LiDAR frame with edge ``side`` and is
    centered at ``center``.  Bounds are clamped to the image.
    """
    center = np.asarray(center, dtype=float)
    verts = center + _cube_offsets(side)
    rf, cf = geometry.pixel_float(verts)
    inside = (rf >= 0) & (rf < geometry.rows) & (cf >= 0) & (cf < geometry.cols)
    if not inside.any():
        raise OutOfFov("no cube vertex projects into the range image")
    r0, r1, c0, c1 = _roi_bounds(verts, geometry)
    return (
        int(max(r0, 0)), int(min(r1, geometry.rows - 1)),
        int(max(c0, 0)), int(min(c1, geometry.cols - 1)),
    )


def _summed_area(points, geometry: RangeImageGeometry) -> np.ndarray:
    rows, cols = geometry.rows, geometry.cols
    sat = np.zeros((rows + 1, cols + 1), dtype=np.int64)
    if len(points):
        r, c = geometry.pixel(points)
        ok = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
        counts = np.bincount(r[ok] * cols + c[ok], minlength=rows * cols).reshape(rows, cols)
        sat[1:, 1:] = counts.cumsum(axis=0).cumsum(axis=1)
    return sat


def _targets(frames):
    """Flatten (frame slot, board center in camera frame) over usable frames."""
    slots, centers, used = [], [], []
    for f in frames:
        if not f.clusters or not f.board_poses:
            continue
        k = len(used)
        used.append(f)
        for pose in f.board_poses:
            slots.append(k)
            centers.append(pose.translation)
    return used, np.array(slots, dtype=np.int64), np.array(centers).reshape(-1, 3)


def roi_scores(
    frames,
    candidates: CandidateSet,
    board: BoardModel,
    geometry: RangeImageGeometry,
    cfg: SearchConfig = SearchConfig(),
) -> np.ndarray:
    """Point count per candidate, summed over every target of every frame."""
    used, slots, centers = _targets(frames)
    if not used:
        raise NoDetections("no frame has both camera targets and LiDAR board clusters")
    rows, cols = geometry.rows, geometry.cols
    offsets = _cube_offsets(board.side_length)
    t = candidates.initial.translation
    rots = candidates.rotations
    scores = np.zeros(len(candidates), dtype=np.int64)
    if cfg.range_gate:
        # one table per target, gated around the range of the unperturbed center
        sats = []
        for k, c in zip(slots, centers):
            pts = used[k].cluster_points()
            rng = np.linalg.norm(candidates.initial.apply(c))
            keep = np.abs(np.linalg.norm(pts, axis=1) - rng) <= board.side_length
            sats.append(_summed_area(pts[keep], geometry))
        sat_idx = np.arange(len(slots))
    else:
        sats = [_summed_area(f.cluster_points(), geometry) for f in used]
        sat_idx = slots
    sats = np.stack(sats)
    for a in range(0, len(centers), cfg.chunk):
        c = centers[a:a + cfg.chunk]
        idx = sat_idx[a:a + cfg.chunk]
        mapped = np.einsum("nij,kj->nki", rots, c) + t  # (N, K, 3)
        verts = mapped[:, :, None, :] + offsets  # (N, K, 8, 3)
        r0, r1, c0, c1 = _roi_bounds(verts, geometry)
        r0c = np.clip(r0, 0, rows - 1)
        r1c = np.clip(r1, 0, rows - 1) + 1
        c0c = np.clip(c0, 0, cols - 1)
        c1c = np.clip(c1, 0, cols - 1) + 1
        empty = (r1 < 0) | (r0 >= rows) | (c1 < 0) | (c0 >= cols)
        f = np.broadcast_to(idx, r0.shape)
        s = sats[f, r1c, c1c] - sats[f, r0c, c1c] - sats[f, r1c, c0c] + sats[f, r0c, c0c]
        scores += np.where(empty, 0, s).sum(axis=1)
    return scores


def radius_scores(frames, candidates: CandidateSet, board: BoardModel, radius: float | None = None) -> np.ndarray:
    """Brute-force oracle: cluster points within ``radius`` (default l/2) of each mapped center."""
    radius = board.half_side if radius is None else radius
    used, slots, centers = _targets(frames)
    if not used:
        raise NoDetections("no frame has both camera targets and LiDAR board clusters")
    t = candidates.initial.translation
    scores = np.zeros(len(candidates), dtype=np.int64)
    for k, c in zip(slots, centers):
        pts = used[k].cluster_points()
        mapped = candidates.rotations @ c + t  # (N, 3)
        d2 = ((mapped[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        scores += (d2 <= radius * radius).sum(axis=1)
    return scores


def select_best(candidates: CandidateSet, scores) -> int:
    """Index of the highest score; ties go to the smallest perturbation, then lowest index."""
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(len(scores)), candidates.magnitudes(), -scores))
    return int(order[0])


def coarse_grid_search(
    frames,
    candidates: CandidateSet,
    board: BoardModel,
    geometry: RangeImageGeometry,
    cfg: SearchConfig = SearchConfig(),
) -> SearchResult:
    scores = roi_scores(frames, candidates, board, geometry, cfg)
    if not np.any(scores):
        raise AllZeroScores("no candidate places any board ROI over detected LiDAR points")
    candidates.scores = scores
    best = select_best(candidates, scores)
    return SearchResult(candidates.candidate(best), best, int(scores[best]), candidates)
