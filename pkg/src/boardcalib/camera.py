"""Board model, camera detections and PnP pose estimation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import DegenerateConfiguration, DivergedRefinement, TooFewInliers
from .geom import PinholeCamera, RigidTransform, nearest_rotation, project_unchecked


@dataclass(frozen=True)
class BoardModel:
    """Square calibration board.

    Vertex order: center, then top-left, top-right, bottom-right, bottom-left
    in the board frame (x right, y down, z away from the viewer).
    """

    side_length: float = 0.6
    tag_length: float = 0.48

    def __post_init__(self):
        if self.side_length <= 0 or self.tag_length <= 0:
            raise ValueError("board dimensions must be positive")

    @property
    def half_side(self) -> float:
        return self.side_length / 2.0

    @property
    def vertices(self) -> np.ndarray:
        h = self.half_side
        return np.array([[0, 0, 0], [-h, -h, 0], [h, -h, 0], [h, h, 0], [-h, h, 0]], dtype=float)

    @property
    def corners(self) -> np.ndarray:
        return self.vertices[1:]

    def to_dict(self) -> dict:
        return {"side_length_m": self.side_length, "tag_length_m": self.tag_length}

    @classmethod
    def from_dict(cls, d) -> BoardModel:
        return cls(float(d["side_length_m"]), float(d.get("tag_length_m", 0.48)))


@dataclass
class CameraDetection:
    """Corners of one target in an image, in board vertex order."""

    target_id: int
    corners: np.ndarray
    pose: RigidTransform | None = None
    rms: float | None = None

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=float).reshape(4, 2)


@dataclass
class FramePair:
    timestamp: float
    cloud: object
    detections: list[CameraDetection] = field(default_factory=list)
    index: int = 0


def _rodrigues(w):
    th = np.sqrt(w @ w)
    k = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if th < 1e-12:
        return np.eye(3) + k
    k /= th
    return np.eye(3) + np.sin(th) * k + (1.0 - np.cos(th)) * (k @ k)


def refine_pose(obj, img, cam: PinholeCamera, init: RigidTransform, max_iters: int = 200):
    """Levenberg-Marquardt on the reprojection error, started at ``init``.

    Returns the refined pose and its reprojection RMS in pixels.
    """
    obj = np.ascontiguousarray(obj, dtype=np.float64).reshape(-1, 3)
    img = np.ascontiguousarray(img, dtype=np.float64).reshape(-1, 2)
    rvec = cv2.Rodrigues(np.array(init.rotation))[0]
    tvec = np.array(init.translation, dtype=np.float64).reshape(3, 1)
    crit = (cv2.TERM_CRITERIA_EPS + cv2.TERM_CRITERIA_COUNT, max_iters, 1e-15)
    rvec, tvec = cv2.solvePnPRefineLM(obj, img, cam.matrix, None, rvec, tvec, crit)
    pose = RigidTransform(cv2.Rodrigues(rvec)[0], tvec.ravel())
    err = reprojection_errors(obj, img, cam, pose)
    return pose, float(np.sqrt(np.mean(err**2)))


def reprojection_errors(obj, img, cam: PinholeCamera, pose: RigidTransform) -> np.ndarray:
    """Per-point pixel error; points at or behind the camera get ``inf``."""
    pc = pose.apply(obj)
    err = np.linalg.norm(project_unchecked(cam, pc) - img, axis=-1)
    return np.where(pc[..., 2] > 1e-6, err, np.inf)


def _check_corners(corners):
    for tri in itertools.combinations(range(4), 3):
        a, b, c = corners[list(tri)]
        area2 = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        scale = max(np.sum((b - a) ** 2), np.sum((c - a) ** 2), np.sum((c - b) ** 2))
        if scale == 0 or area2 < 1e-6 * scale:
            raise DegenerateConfiguration(f"corners {tri} are collinear")


def _homography(src, dst):
    def normalise(p):
        c = p.mean(axis=0)
        s = np.sqrt(2) / max(np.mean(np.linalg.norm(p - c, axis=1)), 1e-12)
        return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])

    ns, nd = normalise(src), normalise(dst)
    sh = np.c_[src, np.ones(len(src))] @ ns.T
    dh = np.c_[dst, np.ones(len(dst))] @ nd.T
    rows = []
    for (x, y, w), (u, v, q) in zip(sh, dh):
        rows.append([0, 0, 0, -q * x, -q * y, -q * w, v * x, v * y, v * w])
        rows.append([q * x, q * y, q * w, 0, 0, 0, -u * x, -u * y, -u * w])
    _, _, vt = np.linalg.svd(np.array(rows))
    h = vt[-1].reshape(3, 3)
    return np.linalg.inv(nd) @ h @ ns


def homography_pose(corners, board: BoardModel, cam: PinholeCamera) -> RigidTransform:
    """Closed-form board pose from the plane-to-image homography."""
    kinv = np.linalg.inv(cam.matrix)
    normed = np.c_[corners, np.ones(4)] @ kinv.T
    h = _homography(board.corners[:, :2], normed[:, :2] / normed[:, 2:])
    lam = 2.0 / (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    if h[2, 2] < 0:
        lam = -lam
    r1, r2, t = lam * h[:, 0], lam * h[:, 1], lam * h[:, 2]
    r = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    return RigidTransform(r, t)


def solve_planar_pnp(corners, board: BoardModel, cam: PinholeCamera, max_rms: float = 10.0):
    """Pose of a board (board -> camera) from its four ordered image corners.

    The homography solution and its mirrored-normal twin are both refined;
    the lower reprojection RMS wins, and on a tie the one whose normal points
    away from the camera (printed side visible) is kept.

    Returns ``(pose, rms_px)``.
    """
    corners = np.asarray(corners, dtype=float).reshape(4, 2)
    _check_corners(corners)
    init = homography_pose(corners, board, cam)
    v = init.translation / np.linalg.norm(init.translation)
    flip = 2.0 * np.outer(v, v) - np.eye(3)
    twin = RigidTransform(flip @ init.rotation @ np.diag([-1.0, -1.0, 1.0]), init.translation)
    sols = [refine_pose(board.corners, corners, cam, p) for p in (init, twin)]

    def facing(pose):
        return pose.rotation[:, 2] @ pose.translation > 0

    sols.sort(key=lambda s: s[1])
    best = sols[0]
    if abs(sols[0][1] - sols[1][1]) <= 1e-9 + 1e-6 * sols[0][1] and not facing(best[0]) and facing(sols[1][0]):
        best = sols[1]
    pose, rms = best
    if not np.isfinite(rms) or rms > max_rms or pose.translation[2] <= 0:
        raise DivergedRefinement(f"planar PnP refinement ended at {rms:.3g} px")
    return pose, rms


def ransac_pnp(
    points,
    pixels,
    cam: PinholeCamera,
    inlier_px: float = 3.0,
    iterations: int = 200,
    confidence: float = 0.999,
    seed: int = 0,
):
    """Robust pose (points frame -> camera) from 3D-2D correspondences.

    Minimal 4-point hypotheses are solved with SQPnP, scored by inlier count,
    and the best consensus set is refined with Levenberg-Marquardt.

    Returns ``(pose, inlier_mask)``.
    """
    obj = np.asarray(points, dtype=float).reshape(-1, 3)
    img = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = len(obj)
    if n < 4:
        raise TooFewInliers(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    k = cam.matrix
    best = None
    best_key = (-1, np.inf)
    needed = iterations
    it = 0
    while it < min(iterations, needed):
        it += 1
        sample = rng.choice(n, 4, replace=False)
        try:
            ok, rvec, tvec = cv2.solvePnP(obj[sample], img[sample], k, None, flags=cv2.SOLVEPNP_SQPNP)
        except cv2.error:
            continue
        if not ok:
            continue
        pose = RigidTransform(cv2.Rodrigues(rvec)[0], tvec.ravel())
        err = reprojection_errors(obj, img, cam, pose)
        inl = err < inlier_px
        key = (int(inl.sum()), float(np.sum(np.minimum(err, inlier_px))))
        if key[0] > best_key[0] or (key[0] == best_key[0] and key[1] < best_key[1]):
            best_key, best = key, pose
            w = key[0] / n
            if w >= 1.0:
                needed = 0
            elif w > 0:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - w**4)))
    if best is None or best_key[0] < 4:
        raise TooFewInliers(f"best hypothesis has {max(best_key[0], 0)} inliers")
    pose = best
    inl = reprojection_errors(obj, img, cam, pose) < inlier_px
    for _ in range(2):
        pose, _ = refine_pose(obj[inl], img[inl], cam, pose)
        new = reprojection_errors(obj, img, cam, pose) < inlier_px
        if new.sum() < 4:
            break
        if np.array_equal(new, inl):
            break
        inl = new
    return pose, inl
