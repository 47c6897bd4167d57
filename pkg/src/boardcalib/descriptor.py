"""Multi-plane projection descriptors for recognising board-shaped clusters.

Each cluster is moved into its principal-axis frame, projected onto
``p_az * q_el`` planes through the centroid, and histogrammed into polar bins.
The stacked histograms form a feature matrix whose leading left and right
singular vectors, concatenated, are the descriptor.  Similarity between
descriptors is the Pearson correlation coefficient clamped at zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConstantVector, DegenerateCluster, ZeroMatrix


@dataclass(frozen=True)
class DescriptorConfig:
    l_bins: int = 8
    t_bins: int = 16
    p_az: int = 4
    q_el: int = 16
    max_radius_mode: str = "adaptive"
    max_radius: float | None = None
    oversample: int = 5
    power_iters: int = 2
    seed: int = 0
    max_points: int = 2048  # larger clusters are evenly strided down before histogramming

    def __post_init__(self):
        if self.max_points < 3:
            raise ValueError("max_points must be at least 3")
        if min(self.l_bins, self.t_bins, self.p_az, self.q_el) < 2:
            raise ValueError("descriptor bin and plane counts must be >= 2")
        if self.max_radius_mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown max_radius_mode {self.max_radius_mode!r}")
        if self.max_radius_mode == "fixed" and not (self.max_radius and self.max_radius > 0):
            raise ValueError("fixed radius mode needs a positive max_radius")

    @property
    def length(self) -> int:
        return self.l_bins * self.t_bins + self.p_az * self.q_el

    @classmethod
    def for_board(cls, side: float, **kw) -> DescriptorConfig:
        """Fixed-radius layout sized to a square board of the given side.

        A fixed outer radius keeps absolute size in the signature, so large
        planar faces (walls, vehicle sides) do not resemble a board.
        """
        return cls(max_radius_mode="fixed", max_radius=1.2 * side / np.sqrt(2.0), **kw)


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class MatchResult:
    cluster_id: int
    score: float
    accepted: bool


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def pca_align(points, skew_tol: float = 1e-8) -> np.ndarray:
    """Express points in their centered principal-axis frame.

    Axes are ordered by decreasing variance.  Each axis is oriented so that the
    third moment of the projections is non-negative; near-symmetric axes fall
    back to pointing into the +x (then +y, +z) half-space of the input frame.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateCluster(f"need at least 3 points, got {len(pts)}")
    centered = pts - pts.mean(axis=0)
    vals, vecs = np.linalg.eigh(centered.T @ centered / len(pts))
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if vals[0] <= 1e-18 or vals[1] <= 1e-10 * vals[0]:
        raise DegenerateCluster("cluster is collinear or a single point")
    proj = centered @ vecs
    skew = np.mean(proj**3, axis=0)
    scale = np.maximum(vals, 1e-300) ** 1.5
    for k in range(3):
        s = skew[k]
        if abs(s) <= skew_tol * scale[k]:
            axis = vecs[:, k]
            lead = np.flatnonzero(np.abs(axis) > 1e-9)
            s = axis[lead[0]] if len(lead) else 1.0
        if s < 0:
            proj[:, k] = -proj[:, k]
    return proj


def _plane_bases(p_az: int, q_el: int):
    az = (np.arange(p_az) + 0.5) * np.pi / p_az
    el = np.arange(q_el) * (np.pi / 2) / q_el
    az, el = np.meshgrid(az, el, indexing="ij")
    az, el = az.ravel(), el.ravel()
    normal = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
    ex = np.array([1.0, 0.0, 0.0])
    u = ex - (normal @ ex)[:, None] * normal
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(normal, u)
    return u, v


def feature_matrix(aligned, cfg: DescriptorConfig) -> np.ndarray:
    """Row-normalised polar histograms, one row per projection plane."""
    pts = np.asarray(aligned, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise DegenerateCluster("empty cluster")
    u, v = _plane_bases(cfg.p_az, cfg.q_el)
    x = pts @ u.T
    y = pts @ v.T
    r = np.hypot(x, y)
    if cfg.max_radius_mode == "fixed":
        rmax = cfg.max_radius
    else:
        rmax = float(np.linalg.norm(pts, axis=1).max())
    if rmax > 0:
        ring = np.floor(cfg.l_bins * (r / rmax) ** 2).astype(np.int64)
    else:
        ring = np.zeros_like(r, dtype=np.int64)
    ring = np.clip(ring, 0, cfg.l_bins - 1)
    # sectors are centred on the plane's x axis, where edge-on planar clusters project
    theta = np.arctan2(y, x) + np.pi / cfg.t_bins
    sector = np.floor(theta / (2 * np.pi) * cfg.t_bins).astype(np.int64) % cfg.t_bins
    nbin = cfg.l_bins * cfg.t_bins
    rows = x.shape[1]
    flat = (np.arange(rows) * nbin)[None, :] + ring * cfg.t_bins + sector
    a = np.bincount(flat.ravel(), minlength=rows * nbin).reshape(rows, nbin)
    return a / n


def rsvd_rank1(a, oversample: int = 5, power_iters: int = 2, seed: int = 0):
    """Leading singular triplet of ``a`` by randomized range finding.

    Returns ``(u1, s1, v1)`` with the sign of each vector fixed so its largest
    magnitude entry is positive.
    """
    a = np.asarray(a, dtype=float)
    if not np.any(a):
        raise ZeroMatrix("feature matrix is all zeros")
    m, n = a.shape
    k = min(1 + oversample, m, n)
    omega = np.random.default_rng(seed).standard_normal((n, k))
    q, _ = np.linalg.qr(a @ omega)
    for _ in range(power_iters):
        z, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ z)
    b = q.T @ a
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    return _fix_sign(q @ ub[:, 0]), float(s[0]), _fix_sign(vt[0])


def compute_m2dp(aligned, cfg: DescriptorConfig = DescriptorConfig()) -> Descriptor:
    a = feature_matrix(aligned, cfg)
    u, _, v = rsvd_rank1(a, cfg.oversample, cfg.power_iters, cfg.seed)
    return Descriptor(np.concatenate([u, v]))


def describe(points, cfg: DescriptorConfig = DescriptorConfig()) -> Descriptor:
    """PCA alignment followed by :func:`compute_m2dp`."""
    aligned = pca_align(points)
    if len(aligned) > cfg.max_points:
        # histogram rows are normalized, so an even stride keeps the shape
        aligned = aligned[np.linspace(0, len(aligned) - 1, cfg.max_points).round().astype(np.int64)]
    return compute_m2dp(aligned, cfg)


def pcc(x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("pcc needs two vectors of equal length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = dx @ dx
    syy = dy @ dy
    if sxx <= 0 or syy <= 0:
        raise ConstantVector("zero variance input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def match_score(desc: Descriptor, references: Sequence[Descriptor], similarity: Callable = pcc) -> float:
    best = max(similarity(desc.values, ref.values) for ref in references)
    return max(0.0, best)


def match_clusters(
    descriptors: Sequence[Descriptor],
    references: Sequence[Descriptor],
    threshold: float = 0.94,
    similarity: Callable = pcc,
) -> list[MatchResult]:
    """Score each cluster descriptor against the reference set."""
    if not references:
        raise ValueError("reference set is empty")
    out = []
    for i, desc in enumerate(descriptors):
        score = match_score(desc, references, similarity)
        out.append(MatchResult(i, score, score >= threshold))
    return out


def board_grid(side: float, nx: int, ny: int | None = None, angle: float = 0.0) -> np.ndarray:
    """Regular ``nx * ny`` grid filling a square board in its own plane (z = 0)."""
    ny = nx if ny is None else ny
    xs = (np.arange(nx) + 0.5) / nx * side - side / 2
    ys = (np.arange(ny) + 0.5) / ny * side - side / 2
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    c, s = np.cos(angle), np.sin(angle)
    return pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T


def build_references(
    side: float,
    densities: Sequence[int] = (10, 20, 40),
    ranges: Sequence[float] = (),
    resolution: tuple[float, float] | None = None,
    in_plane_angles: Sequence[float] = (0.0,),
    noise_sigmas: Sequence[float] = (0.0, 0.01, 0.02),
    cfg: DescriptorConfig | None = None,
    seed: int = 0,
) -> list[Descriptor]:
    """Descriptors of simulated planar boards.

    ``densities`` gives points per side of square sampling grids.  For each
    entry of ``ranges`` (meters) a grid is added whose spacing matches a
    scanner with angular ``resolution = (horizontal, vertical)`` radians at that
    distance.  Every grid is repeated for each in-plane rotation angle and each
    out-of-plane Gaussian noise level in ``noise_sigmas`` (meters), the latter
    mimicking range noise of real scans.
    """
    if side <= 0:
        raise ValueError("board side must be positive")
    cfg = cfg or DescriptorConfig.for_board(side)
    grids = [(n, n) for n in densities]
    if ranges:
        if resolution is None:
            raise ValueError("ranges need a scanner resolution")
        for rng in ranges:
            nx = max(3, int(round(side / (rng * resolution[0]))))
            ny = max(3, int(round(side / (rng * resolution[1]))))
            grids.append((nx, ny))
    refs = []
    k = 0
    for nx, ny in grids:
        for ang in in_plane_angles:
            base = board_grid(side, nx, ny, ang)
            for sigma in noise_sigmas or (0.0,):
                pts = base.copy()
                if sigma > 0:
                    pts[:, 2] += np.random.default_rng([seed, k]).standard_normal(len(pts)) * sigma
                k += 1
                refs.append(describe(pts, cfg))
    return refs
