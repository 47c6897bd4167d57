"""Ground-truthed scene simulator: boards, clutter, a moving vehicle and its sensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import BoardModel, CameraDetection, FramePair
from .cloud import PointCloud, RangeImageGeometry
from .geom import (
    CAMERA_TO_LIDAR_AXES,
    PinholeCamera,
    RigidTransform,
    euler_to_matrix,
    project_unchecked,
)

GROUND = -1
CLUTTER = -2

# board frame (x right, y down, z away) for a board facing a viewer looking along world +x
BOARD_FACING_MINUS_X = CAMERA_TO_LIDAR_AXES


@dataclass(frozen=True)
class ScanPattern:
    """Ray layout of a scanner archetype.

    ``mechanical``: ``rings`` evenly spaced over ``vfov_deg`` at every
    ``azimuth_step_deg`` inside ``hfov_deg``.
    ``mems``: a ``rows x cols`` raster over the field of view whose rays are
    jittered by up to ``jitter`` of the grid spacing, re-drawn every frame.
    """

    kind: str = "mechanical"
    hfov_deg: tuple[float, float] = (-60.0, 60.0)
    vfov_deg: tuple[float, float] = (-16.0, 8.0)
    rings: int = 128
    azimuth_step_deg: float = 0.1
    rows: int = 125
    cols: int = 1000
    jitter: float = 0.35
    max_range: float = 150.0
    image_h_res_deg: float = 0.2
    image_v_res_deg: float = 0.4

    def __post_init__(self):
        if self.kind not in ("mechanical", "mems"):
            raise ValueError(f"unknown scan pattern {self.kind!r}")

    def angular_resolution(self) -> tuple[float, float]:
        """Nominal (horizontal, vertical) ray spacing in radians."""
        if self.kind == "mechanical":
            v = (self.vfov_deg[1] - self.vfov_deg[0]) / (self.rings - 1)
            return np.radians(self.azimuth_step_deg), np.radians(v)
        return (
            np.radians((self.hfov_deg[1] - self.hfov_deg[0]) / self.cols),
            np.radians((self.vfov_deg[1] - self.vfov_deg[0]) / self.rows),
        )

    def range_image_geometry(self) -> RangeImageGeometry:
        pad = 0.5
        return RangeImageGeometry.from_degrees(
            self.image_h_res_deg,
            self.image_v_res_deg,
            (self.hfov_deg[0] - pad, self.hfov_deg[1] + pad),
            (self.vfov_deg[0] - pad, self.vfov_deg[1] + pad),
        )

    def ray_angles(self, rng: np.random.Generator):
        """Azimuth and elevation (radians) of every ray, plus its ring/row index."""
        if self.kind == "mechanical":
            el = np.radians(np.linspace(self.vfov_deg[0], self.vfov_deg[1], self.rings))
            az = np.radians(np.arange(self.hfov_deg[0], self.hfov_deg[1] + 1e-9, self.azimuth_step_deg))
            az, el_g = np.meshgrid(az, el)
            ring = np.broadcast_to(np.arange(self.rings)[:, None], az.shape)
            return az.ravel(), el_g.ravel(), ring.ravel().copy()
        dh = (self.hfov_deg[1] - self.hfov_deg[0]) / self.cols
        dv = (self.vfov_deg[1] - self.vfov_deg[0]) / self.rows
        az = self.hfov_deg[0] + (np.arange(self.cols) + 0.5) * dh
        el = self.vfov_deg[0] + (np.arange(self.rows) + 0.5) * dv
        az, el = np.meshgrid(az, el)
        az = az + rng.uniform(-self.jitter, self.jitter, az.shape) * dh
        el = el + rng.uniform(-self.jitter, self.jitter, el.shape) * dv
        ring = np.broadcast_to(np.arange(self.rows)[:, None], az.shape)
        return np.radians(az.ravel()), np.radians(el.ravel()), ring.ravel().copy()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hfov_deg": list(self.hfov_deg),
            "vfov_deg": list(self.vfov_deg),
            "rings": self.rings,
            "azimuth_step_deg": self.azimuth_step_deg,
            "rows": self.rows,
            "cols": self.cols,
            "jitter": self.jitter,
            "max_range_m": self.max_range,
            "image_h_res_deg": self.image_h_res_deg,
            "image_v_res_deg": self.image_v_res_deg,
        }

    @classmethod
    def from_dict(cls, d) -> ScanPattern:
        return cls(
            kind=d["kind"],
            hfov_deg=tuple(d["hfov_deg"]),
            vfov_deg=tuple(d["vfov_deg"]),
            rings=int(d["rings"]),
            azimuth_step_deg=float(d["azimuth_step_deg"]),
            rows=int(d["rows"]),
            cols=int(d["cols"]),
            jitter=float(d["jitter"]),
            max_range=float(d["max_range_m"]),
            image_h_res_deg=float(d["image_h_res_deg"]),
            image_v_res_deg=float(d["image_v_res_deg"]),
        )


def mechanical_pattern(**kw) -> ScanPattern:
    return ScanPattern(kind="mechanical", **kw)


def mems_pattern(**kw) -> ScanPattern:
    kw.setdefault("hfov_deg", (-50.0, 50.0))
    kw.setdefault("vfov_deg", (-12.5, 12.5))
    return ScanPattern(kind="mems", **kw)


@dataclass(frozen=True)
class Box:
    """Yawed box standing on the ground; ``size`` is full length, width, height."""

    center_xy: tuple[float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0


@dataclass(frozen=True)
class Pole:
    center_xy: tuple[float, float]
    radius: float
    height: float


@dataclass(frozen=True)
class BoardPlacement:
    pose: RigidTransform  # board -> world
    model: BoardModel = BoardModel()


@dataclass(frozen=True)
class NoiseModel:
    range_sigma: float = 0.0
    pixel_sigma: float = 0.0
    dropout: float = 0.0


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    boards: tuple[BoardPlacement, ...]
    extrinsic: RigidTransform  # camera -> lidar (ground truth)
    camera: PinholeCamera
    trajectory: tuple[RigidTransform, ...]  # vehicle -> world per frame
    timestamps: tuple[float, ...]
    pattern: ScanPattern = ScanPattern()
    noise: NoiseModel = NoiseModel()
    boxes: tuple[Box, ...] = ()
    poles: tuple[Pole, ...] = ()
    lidar_mount: RigidTransform = field(
        default_factory=lambda: RigidTransform(np.eye(3), [1.2, 0.0, 1.9])
    )  # lidar -> vehicle
    seed: int = 0

    def __post_init__(self):
        if len(self.trajectory) != len(self.timestamps):
            raise ValueError("trajectory and timestamps differ in length")

    def lidar_pose(self, i: int) -> RigidTransform:
        """LiDAR -> world at frame ``i``."""
        return self.trajectory[i] @ self.lidar_mount

    def camera_pose(self, i: int) -> RigidTransform:
        """Camera -> world at frame ``i``."""
        return self.lidar_pose(i) @ self.extrinsic

    def frame_rng(self, i: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, i, stream])


@dataclass
class FrameTruth:
    labels: np.ndarray
    board_ids: list[int]
    vertices_lidar: dict[int, np.ndarray]
    corners_px: dict[int, np.ndarray]
    board_to_camera: dict[int, RigidTransform]


# ---------------------------------------------------------------- ray casting


def _hit_ground(o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[2] / d[:, 2]
    return np.where(d[:, 2] < -1e-12, t, np.inf)


def _near_rays(o, d, center, radius):
    """Indices of rays passing within ``radius`` of ``center`` in front of the origin."""
    v = np.asarray(center, dtype=float) - o
    proj = d @ v
    perp2 = v @ v - proj**2
    return np.flatnonzero((proj > -radius) & (perp2 <= radius * radius))


def _hit_board(o, d, placement: BoardPlacement):
    h = placement.model.half_side
    out = np.full(len(d), np.inf)
    idx = _near_rays(o, d, placement.pose.translation, h * np.sqrt(2) + 1e-6)
    r = placement.pose.rotation
    ob = r.T @ (o - placement.pose.translation)
    db = d[idx] @ r
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -ob[2] / db[:, 2]
    x = ob[0] + t * db[:, 0]
    y = ob[1] + t * db[:, 1]
    ok = (t > 0) & (np.abs(x) <= h) & (np.abs(y) <= h) & np.isfinite(t)
    out[idx[ok]] = t[ok]
    return out


def _hit_box(o, d, box: Box):
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    half = np.array(box.size, dtype=float) / 2
    center = np.array([box.center_xy[0], box.center_xy[1], half[2]])
    out = np.full(len(d), np.inf)
    idx = _near_rays(o, d, center, float(np.linalg.norm(half)) + 1e-6)
    ob = rz.T @ (o - center)
    db = d[idx] @ rz
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / db
        t1 = (-half - ob) * inv
        t2 = (half - ob) * inv
    tn = np.nanmax(np.minimum(t1, t2), axis=1)
    tf = np.nanmin(np.maximum(t1, t2), axis=1)
    ok = (tn <= tf) & (tn > 0)
    out[idx[ok]] = tn[ok]
    return out


def _hit_pole(o, d, pole: Pole):
    out = np.full(len(d), np.inf)
    center = [pole.center_xy[0], pole.center_xy[1], pole.height / 2]
    idx = _near_rays(o, d, center, float(np.hypot(pole.radius, pole.height / 2)) + 1e-6)
    d = d[idx]
    px, py = o[0] - pole.center_xy[0], o[1] - pole.center_xy[1]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (px * d[:, 0] + py * d[:, 1])
    cc = px**2 + py**2 - pole.radius**2
    disc = b * b - 4 * a * cc
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    z = o[2] + t * d[:, 2]
    ok = (disc >= 0) & (a > 1e-12) & (t > 0) & (z >= 0) & (z <= pole.height)
    out[idx[ok]] = t[ok]
    return out


def scan_lidar(cfg: ScenarioConfig, frame: int):
    """Cast the scan pattern from the LiDAR pose of ``frame``.

    Returns the cloud in the LiDAR frame and integer labels (board index,
    :data:`GROUND` or :data:`CLUTTER`).  Range noise and dropout come from a
    random stream derived from ``(seed, frame)``.
    """
    rng = cfg.frame_rng(frame, 0)
    az, el, ring = cfg.pattern.ray_angles(rng)
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
    pose = cfg.lidar_pose(frame)
    o = pose.translation
    dw = dirs @ pose.rotation.T

    best = _hit_ground(o, dw)
    label = np.full(len(dirs), GROUND, dtype=np.int32)
    for i, b in enumerate(cfg.boards):
        t = _hit_board(o, dw, b)
        closer = t < best
        best = np.where(closer, t, best)
        label[closer] = i
    for obj in cfg.boxes:
        t = _hit_box(o, dw, obj)
        closer = t < best
        best = np.where(closer, t, best)
        label[closer] = CLUTTER
    for obj in cfg.poles:
        t = _hit_pole(o, dw, obj)
        closer = t < best
        best = np.where(closer, t, best)
        label[closer] = CLUTTER

    hit = np.isfinite(best) & (best <= cfg.pattern.max_range)
    noise = rng.standard_normal(len(dirs)) * cfg.noise.range_sigma
    keep = hit & (rng.random(len(dirs)) >= cfg.noise.dropout)
    rngs = best[keep] + noise[keep]
    pts = dirs[keep] * rngs[:, None]
    return PointCloud(pts.astype(np.float32).astype(float), rings=ring[keep]), label[keep]


def board_to_camera(cfg: ScenarioConfig, frame: int, board: int) -> RigidTransform:
    return cfg.camera_pose(frame).inverse() @ cfg.boards[board].pose


def render_detections(cfg: ScenarioConfig, frame: int) -> list[CameraDetection]:
    """Project visible, front-facing boards into the image with pixel noise."""
    rng = cfg.frame_rng(frame, 1)
    out = []
    for i, placement in enumerate(cfg.boards):
        t_bc = board_to_camera(cfg, frame, i)
        pc = t_bc.apply(placement.model.corners)
        cam_in_board = t_bc.inverse().translation
        noise = rng.standard_normal((4, 2)) * cfg.noise.pixel_sigma
        if np.any(pc[:, 2] <= 0.1) or cam_in_board[2] >= 0:
            continue
        uv = project_unchecked(cfg.camera, pc) + noise
        if not np.all(cfg.camera.contains(uv)):
            continue
        out.append(CameraDetection(i, uv))
    return out


def frame_truth(cfg: ScenarioConfig, frame: int, labels: np.ndarray) -> FrameTruth:
    to_lidar = cfg.lidar_pose(frame).inverse()
    verts, corners, poses, ids = {}, {}, {}, []
    for i, placement in enumerate(cfg.boards):
        t_bc = board_to_camera(cfg, frame, i)
        verts[i] = to_lidar.apply(placement.pose.apply(placement.model.vertices))
        pc = t_bc.apply(placement.model.corners)
        corners[i] = project_unchecked(cfg.camera, pc)
        poses[i] = t_bc
        if np.any(labels == i):
            ids.append(i)
    return FrameTruth(labels, ids, verts, corners, poses)


def simulate_frame(cfg: ScenarioConfig, frame: int):
    """One synchronized LiDAR/camera frame plus its ground truth."""
    cloud, labels = scan_lidar(cfg, frame)
    dets = render_detections(cfg, frame)
    pair = FramePair(cfg.timestamps[frame], cloud, dets, index=frame)
    return pair, frame_truth(cfg, frame, labels)


# ---------------------------------------------------------------- scenarios


def default_camera() -> PinholeCamera:
    return PinholeCamera(1900.0, 1900.0, 1920.0, 960.0, 3840, 1920)


def default_extrinsic() -> RigidTransform:
    """Camera -> LiDAR: a camera 30 cm below the LiDAR with a small mounting tilt."""
    tilt = euler_to_matrix(*np.radians([0.8, -1.2, 0.5]))
    return RigidTransform(tilt @ CAMERA_TO_LIDAR_AXES, [0.15, 0.05, -0.3])


def make_scenario(
    seed: int = 0,
    n_frames: int = 200,
    pattern: str | ScanPattern = "mechanical",
    n_boards: int = 2,
    distance: tuple[float, float] = (6.0, 30.0),
    board_height: tuple[float, float] = (1.2, 1.9),
    lateral_spread: float = 3.0,
    range_sigma: float = 0.0,
    pixel_sigma: float = 0.0,
    dropout: float = 0.0,
    clutter: float = 1.0,
    duration: float = 20.0,
    extrinsic: RigidTransform | None = None,
    board: BoardModel = BoardModel(),
) -> ScenarioConfig:
    """A randomized but seed-determined calibration drive.

    ``n_boards`` boards stand about 50 m down the road facing the vehicle,
    which drives back and forth so that the LiDAR-to-board distance sweeps
    ``distance`` once per ``duration``.  ``clutter`` scales the number of
    parked boxes and poles along the roadside; a wall stands behind the boards
    whenever clutter is non-zero.
    """
    rng = np.random.default_rng([seed, 7919])
    if isinstance(pattern, str):
        pattern = mechanical_pattern() if pattern == "mechanical" else mems_pattern()
    x_board = 50.0
    boards = []
    if n_boards:
        slots = np.linspace(-lateral_spread, lateral_spread, n_boards) if n_boards > 1 else np.zeros(1)
        for k in range(n_boards):
            y = slots[k] + rng.uniform(-0.3, 0.3)
            z = rng.uniform(*board_height)
            yaw = np.radians(rng.uniform(-15, 15))
            tilt = np.radians(rng.uniform(-5, 5))
            spin = np.radians(rng.uniform(-10, 10))
            r = euler_to_matrix(0.0, tilt, yaw) @ BOARD_FACING_MINUS_X @ euler_to_matrix(0.0, 0.0, spin)
            boards.append(BoardPlacement(RigidTransform(r, [x_board + rng.uniform(-0.5, 0.5), y, z]), board))

    extrinsic = extrinsic or default_extrinsic()
    mount = RigidTransform(np.eye(3), [1.2, 0.0, 1.9])
    ts = np.arange(n_frames) * (duration / max(n_frames, 1))
    phase = rng.uniform(0, 2 * np.pi)
    d_mid = 0.5 * (distance[0] + distance[1])
    d_amp = 0.5 * (distance[1] - distance[0])
    traj = []
    for t in ts:
        w = 2 * np.pi * t / duration
        d = d_mid + d_amp * np.cos(w + phase)
        y = 0.4 * np.sin(0.5 * w + phase)
        yaw = np.radians(2.0) * np.sin(w + 2 * phase)
        traj.append(RigidTransform(euler_to_matrix(0.0, 0.0, yaw), [x_board - d - mount.translation[0], y, 0.0]))

    boxes, poles = [], []
    n_box = int(round(6 * clutter))
    n_pole = int(round(6 * clutter))
    for _ in range(n_box):
        side = rng.choice([-1.0, 1.0])
        boxes.append(
            Box(
                (rng.uniform(x_board - 45, x_board + 10), side * rng.uniform(5.0, 12.0)),
                (rng.uniform(3.8, 4.8), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.8)),
                np.radians(rng.uniform(-20, 20)),
            )
        )
    for _ in range(n_pole):
        side = rng.choice([-1.0, 1.0])
        poles.append(
            Pole((rng.uniform(x_board - 45, x_board + 10), side * rng.uniform(4.5, 12.0)),
                 rng.uniform(0.08, 0.2), rng.uniform(2.5, 5.0))
        )
    if clutter > 0:
        boxes.append(Box((x_board + 12.0, 0.0), (0.5, 30.0, 4.0), 0.0))

    return ScenarioConfig(
        boards=tuple(boards),
        extrinsic=extrinsic,
        camera=default_camera(),
        trajectory=tuple(traj),
        timestamps=tuple(float(t) for t in ts),
        pattern=pattern,
        noise=NoiseModel(range_sigma, pixel_sigma, dropout),
        boxes=tuple(boxes),
        poles=tuple(poles),
        lidar_mount=mount,
        seed=seed,
    )


def simulate(cfg: ScenarioConfig, frames=None):
    """Yield ``(FramePair, FrameTruth)`` for the requested frame indices."""
    frames = range(len(cfg.trajectory)) if frames is None else frames
    for i in frames:
        yield simulate_frame(cfg, i)
