"""Box-shaped board cost, per-board pose fitting and the two extrinsic solvers.

The indirect solver fits every LiDAR board cluster separately, reads off its
four corners and runs RANSAC-PnP against the camera corners.  The direct solver
moves the extrinsic itself so that every cluster lands inside its camera-posed
board box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .camera import BoardModel, _rodrigues, ransac_pnp, reprojection_errors
from .errors import Diverged, NoDetections, TooFewInliers
from .geom import PinholeCamera, RigidTransform, project_unchecked


@dataclass(frozen=True)
class BoxCostParams:
    half_side: float = 0.3
    alpha: float = 0.0

    def __post_init__(self):
        if self.half_side <= 0:
            raise ValueError("half_side must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @classmethod
    def for_board(cls, board: BoardModel, alpha: float = 0.0) -> BoxCostParams:
        return cls(board.half_side, alpha)


@dataclass(frozen=True)
class OptimizerSettings:
    """Nelder-Mead settings over ``(rotvec, translation)`` local coordinates."""

    max_iters: int = 4000
    rot_scale: float = np.radians(1.0)
    trans_scale: float = 0.05
    xatol: float = 1e-5
    fatol: float = 1e-5
    restarts: int = 1
    diverge_cost: float = 0.05  # mean per-point board-fit cost (m) that counts as failure
    # the joint cost also carries camera pose error, about 0.25 m per point at 30 m
    direct_diverge_cost: float = 0.5
    smoothing: float = 0.0  # Huber width (m) easing the band edges; 0 keeps the exact cost
    max_points: int = 400  # per board fit, evenly strided
    point_budget: int = 60000  # direct method total; one common stride keeps per-target weights

    def __post_init__(self):
        if min(self.rot_scale, self.trans_scale, self.xatol, self.fatol, self.diverge_cost, self.direct_diverge_cost) <= 0:
            raise ValueError("optimizer scales and tolerances must be positive")
        if self.max_iters < 1 or self.restarts < 0 or self.smoothing < 0 or min(self.max_points, self.point_budget) < 1:
            raise ValueError("invalid optimizer iteration settings")


@dataclass
class BoardTarget:
    """One camera target paired with its LiDAR cluster."""

    frame: int
    target_id: int
    points: np.ndarray  # LiDAR frame
    board_pose: RigidTransform  # board -> camera
    corners: np.ndarray  # pixels, board vertex order


@dataclass
class CalibrationResult:
    extrinsic: RigidTransform  # camera -> LiDAR
    residuals: np.ndarray  # per frame, pixels
    frames: np.ndarray
    converged: bool
    iterations: int
    method: str = ""
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    cost_history: list[float] = field(default_factory=list)
    n_targets: int = 0
    vertices: dict = field(default_factory=dict)  # (frame, target) -> LiDAR vertices, indirect only


# ---------------------------------------------------------------- cost


def box_cost(lam, alpha):
    """Distance of ``lam`` outside the band ``[-alpha, alpha]``."""
    return np.maximum(np.abs(lam) - alpha, 0.0)


def box_cost_literal(lam, alpha):
    """Unreduced form: zero inside the band, else ``min(|lam - alpha|, |lam + alpha|)``."""
    lam = np.asarray(lam, dtype=float)
    outside = np.minimum(np.abs(lam - alpha), np.abs(lam + alpha))
    return np.where(np.abs(lam) > alpha, outside, 0.0)


def _huber(e, width):
    if width <= 0:
        return e
    return np.where(e < width, e * e / (2 * width), e - width / 2)


def _box_terms(pb, params: BoxCostParams, smoothing: float = 0.0):
    """Per-point sum of the three axis costs."""
    lim = np.array([params.half_side, params.half_side, params.alpha])
    e = np.maximum(np.abs(pb) - lim, 0.0)
    return _huber(e, smoothing).sum(axis=-1)


def _box_total(pb, lim, smoothing):
    e = np.abs(pb)
    e -= lim
    np.maximum(e, 0.0, out=e)
    if smoothing > 0:
        e = _huber(e, smoothing)
    return float(e.sum())


def board_cost(pose: RigidTransform, points, params: BoxCostParams, smoothing: float = 0.0) -> float:
    """Summed box cost of ``points`` mapped into the board frame by ``pose`` (LiDAR -> board)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return float(np.sum(_box_terms(pose.apply(pts), params, smoothing)))


def _local(x, base: RigidTransform) -> RigidTransform:
    return RigidTransform(_rodrigues(np.asarray(x[:3], dtype=float)) @ base.rotation, base.translation + x[3:])


def _nelder_mead(fun, settings: OptimizerSettings):
    """Simplex search from the origin, restarted from the best vertex."""
    scales = np.array([settings.rot_scale] * 3 + [settings.trans_scale] * 3)
    x = np.zeros(6)
    f0 = float(fun(x))
    history = [f0]
    iters = 0
    success = False

    def record(intermediate_result):
        history.append(float(intermediate_result.fun))

    for attempt in range(settings.restarts + 1):
        simplex = np.vstack([x, x + np.diag(scales)])
        res = minimize(
            fun, x, method="Nelder-Mead", callback=record,
            options={
                "initial_simplex": simplex, "maxiter": settings.max_iters,
                "maxfev": 2 * settings.max_iters, "xatol": settings.xatol, "fatol": settings.fatol,
            },
        )
        iters += int(res.nit)
        if res.fun <= fun(x):
            x = res.x
        success = bool(res.success)
        scales = scales * 0.1
    fx = float(fun(x))
    history.append(fx)
    return x, f0, fx, iters, success, np.minimum.accumulate(history).tolist()


def _subsample(points, n):
    if len(points) <= n:
        return points
    return points[np.linspace(0, len(points) - 1, n).round().astype(np.int64)]


def fit_board_pose(
    points,
    init: RigidTransform,
    params: BoxCostParams,
    settings: OptimizerSettings = OptimizerSettings(),
) -> tuple[RigidTransform, float]:
    """Local minimum of :func:`board_cost` (LiDAR -> board) near ``init``.

    Returns the pose and its mean per-point cost.  The square's 90 degree
    symmetry is resolved by staying near the camera-derived ``init``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise Diverged("cannot fit a board to an empty cluster")
    pts = _subsample(pts, settings.max_points)
    # parameterize around the board origin so rotation and translation decouple
    local = pts @ init.rotation.T + init.translation

    lim = np.array([params.half_side, params.half_side, params.alpha])

    def fun(x):
        return _box_total(local @ _rodrigues(x[:3]).T + x[3:], lim, settings.smoothing)

    x, _, fx, _, _, _ = _nelder_mead(fun, settings)
    pose = RigidTransform.from_rotvec(x[:3], x[3:]) @ init
    mean = float(np.sum(_box_terms(pose.apply(pts), params))) / len(pts)
    if not np.isfinite(mean) or mean > settings.diverge_cost:
        raise Diverged(f"board fit ended at {mean:.3f} m mean cost")
    return pose, mean


# ---------------------------------------------------------------- association


def associate(frame, extrinsic: RigidTransform, board: BoardModel, gate: float | None = None) -> list[BoardTarget]:
    """Pair camera targets with LiDAR clusters by predicted board center.

    Each target's center is mapped into the LiDAR frame with ``extrinsic`` and
    matched to the nearest unused cluster centroid no farther than ``gate``
    (default: the board side).
    """
    gate = board.side_length if gate is None else gate
    if not frame.clusters or not frame.board_poses:
        return []
    cents = np.array([np.mean(c, axis=0) for c in frame.clusters])
    pred = extrinsic.apply(np.array([p.translation for p in frame.board_poses]))
    d = np.linalg.norm(pred[:, None, :] - cents[None, :, :], axis=2)
    pairs = []
    used_t, used_c = set(), set()
    for flat in np.argsort(d, axis=None, kind="stable"):
        ti, ci = np.unravel_index(flat, d.shape)
        if d[ti, ci] > gate:
            break
        if ti in used_t or ci in used_c:
            continue
        used_t.add(ti)
        used_c.add(ci)
        pairs.append((int(ti), int(ci)))
    pairs.sort()
    corners = frame.corners if frame.corners else [None] * len(frame.board_poses)
    return [
        BoardTarget(frame.index, frame.target_ids[ti], frame.clusters[ci], frame.board_poses[ti], corners[ti])
        for ti, ci in pairs
    ]


def associate_all(frames, extrinsic: RigidTransform, board: BoardModel, gate: float | None = None) -> list[BoardTarget]:
    out = []
    for f in frames:
        out.extend(associate(f, extrinsic, board, gate))
    return out


# ---------------------------------------------------------------- residuals


def _quad_distance(uv, quad):
    """Pixel distance from each point to a convex quadrilateral (0 inside)."""
    quad = np.asarray(quad, dtype=float)
    a = quad
    b = np.roll(quad, -1, axis=0)
    e = b - a
    rel = uv[:, None, :] - a[None, :, :]
    cross = e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]
    inside = np.all(cross >= 0, axis=1) | np.all(cross <= 0, axis=1)
    s = np.clip(np.einsum("nkj,kj->nk", rel, e) / np.einsum("kj,kj->k", e, e), 0.0, 1.0)
    closest = a[None] + s[..., None] * e[None]
    dist = np.linalg.norm(uv[:, None, :] - closest, axis=2).min(axis=1)
    return np.where(inside, 0.0, dist)


def _per_frame(frames_of, values):
    frames_of = np.asarray(frames_of)
    values = np.asarray(values, dtype=float)
    idx = np.unique(frames_of)
    return idx, np.array([values[frames_of == f].mean() for f in idx])


def outside_residuals(targets, extrinsic: RigidTransform, cam: PinholeCamera):
    """Per-frame mean pixel distance of projected cluster points outside the detected board."""
    to_cam = extrinsic.inverse()
    fr, vals = [], []
    for t in targets:
        if t.corners is None:
            continue
        pc = to_cam.apply(t.points)
        front = pc[:, 2] > 1e-6
        if not front.any():
            continue
        uv = project_unchecked(cam, pc[front])
        fr.append(t.frame)
        vals.append(float(np.mean(_quad_distance(uv, t.corners))))
    if not fr:
        return np.empty(0, dtype=int), np.empty(0)
    return _per_frame(fr, vals)


# ---------------------------------------------------------------- indirect


def indirect_calibrate(
    targets,
    coarse: RigidTransform,
    cam: PinholeCamera,
    board: BoardModel,
    params: BoxCostParams | None = None,
    settings: OptimizerSettings = OptimizerSettings(),
    inlier_px: float = 3.0,
    ransac_iterations: int = 200,
    seed: int = 0,
) -> CalibrationResult:
    """Fit each board, extract its LiDAR corners, then RANSAC-PnP against the image corners."""
    params = params or BoxCostParams.for_board(board)
    if len(targets) < 4:
        raise TooFewInliers(f"need at least 4 board targets, got {len(targets)}")
    obj, img, owner, verts = [], [], [], {}
    for t in targets:
        init = (coarse @ t.board_pose).inverse()
        try:
            pose, _ = fit_board_pose(t.points, init, params, settings)
        except Diverged:
            continue
        v = pose.inverse().apply(board.vertices)
        verts[(t.frame, t.target_id)] = v
        obj.append(v[1:])
        img.append(np.asarray(t.corners, dtype=float))
        owner.extend([t.frame] * 4)
    if len(verts) < 4:
        raise TooFewInliers(f"only {len(verts)} board fits succeeded")
    obj = np.concatenate(obj)
    img = np.concatenate(img)
    l_to_c, inl = ransac_pnp(obj, img, cam, inlier_px=inlier_px, iterations=ransac_iterations, seed=seed)
    ext = l_to_c.inverse()
    err = reprojection_errors(obj, img, cam, l_to_c)
    frames, res = _per_frame(owner, err)
    return CalibrationResult(
        extrinsic=ext, residuals=res, frames=frames, converged=True, iterations=len(verts),
        method="indirect", n_targets=len(verts), vertices=verts,
        initial_cost=float(np.mean(reprojection_errors(obj, img, cam, coarse.inverse()))),
        final_cost=float(np.mean(err[inl])),
    )


# ---------------------------------------------------------------- direct


@dataclass(eq=False)
class _Stacked:
    """All target points flattened, with the owning target of each point."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    owner: np.ndarray
    rot_t: np.ndarray  # (K, 3, 3) transposed camera -> board rotation
    trans: np.ndarray  # (K, 3)

    @classmethod
    def build(cls, targets, budget):
        total = sum(len(t.points) for t in targets)
        stride = max(1, -(-total // budget))
        sub = [np.asarray(t.points, dtype=float)[::stride] for t in targets]
        pts = np.concatenate(sub)
        owner = np.repeat(np.arange(len(sub)), [len(p) for p in sub])
        inv = [t.board_pose.inverse() for t in targets]
        rot_t = np.stack([i.rotation.T for i in inv])
        trans = np.stack([i.translation for i in inv])
        return cls(pts[:, 0].copy(), pts[:, 1].copy(), pts[:, 2].copy(), owner, rot_t, trans)

    @property
    def count(self) -> int:
        return len(self.x)

    def board_points(self, extrinsic: RigidTransform):
        # LiDAR -> camera -> board, folded into one affine map per target
        m = extrinsic.rotation @ self.rot_t  # (K, 3, 3), row-vector convention
        c = self.trans - extrinsic.translation @ m  # (K, 3)
        coef = np.concatenate([m.reshape(-1, 9), c], axis=1)[self.owner]  # (N, 12)
        return [
            self.x * coef[:, j] + self.y * coef[:, 3 + j] + self.z * coef[:, 6 + j] + coef[:, 9 + j]
            for j in range(3)
        ]

    def cost(self, extrinsic: RigidTransform, lim, smoothing: float = 0.0) -> float:
        total = 0.0
        for j, pj in enumerate(self.board_points(extrinsic)):
            e = np.abs(pj)
            e -= lim[j]
            np.maximum(e, 0.0, out=e)
            if smoothing > 0:
                e = _huber(e, smoothing)
            total += float(np.sum(e))
        return total


def direct_cost(extrinsic: RigidTransform, targets, params: BoxCostParams) -> float:
    """Sum of board costs with each cluster mapped LiDAR -> camera -> board."""
    if not targets:
        raise NoDetections("direct cost needs at least one target")
    total = 0.0
    for t in targets:
        total += board_cost((extrinsic @ t.board_pose).inverse(), t.points, params)
    return total


def direct_calibrate(
    targets,
    coarse: RigidTransform,
    params: BoxCostParams,
    settings: OptimizerSettings = OptimizerSettings(),
    cam: PinholeCamera | None = None,
) -> CalibrationResult:
    """Minimize the joint box cost over the 6-DOF extrinsic, starting at ``coarse``."""
    if not targets:
        raise NoDetections("direct calibration needs at least one associated target")
    stack = _Stacked.build(targets, settings.point_budget)
    n = stack.count
    lim = np.array([params.half_side, params.half_side, params.alpha])

    def fun(x):
        return stack.cost(_local(x, coarse), lim, settings.smoothing)

    x, f0, _, iters, success, history = _nelder_mead(fun, settings)
    ext = _local(x, coarse)
    final = stack.cost(ext, lim)
    if not np.isfinite(final) or final / n > settings.direct_diverge_cost:
        raise Diverged(f"direct optimization ended at {final / n:.3f} m mean cost")
    if cam is not None:
        frames, res = outside_residuals(targets, ext, cam)
    else:
        frames, res = np.empty(0, dtype=int), np.empty(0)
    return CalibrationResult(
        extrinsic=ext, residuals=res, frames=frames, converged=success and history[-1] <= f0,
        iterations=iters, method="direct", initial_cost=f0 / n, final_cost=final / n,
        cost_history=[h / n for h in history], n_targets=len(targets),
    )
