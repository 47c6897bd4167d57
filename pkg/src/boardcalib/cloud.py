"""Range-image construction, ground labelling and connected-component segmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import EmptyCloud


@dataclass(frozen=True, eq=False)
class PointCloud:
    """LiDAR points in the sensor frame (meters), with optional per-point metadata."""

    points: np.ndarray
    rings: np.ndarray | None = None
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class RangeImageGeometry:
    """Cylindrical grid layout. Angles in radians; row 0 is the lowest elevation."""

    h_res: float
    v_res: float
    az_min: float
    az_max: float
    el_min: float
    el_max: float

    @classmethod
    def from_degrees(cls, h_res=0.2, v_res=0.4, hfov=(-60.0, 60.0), vfov=(-16.0, 8.0)):
        return cls(*np.radians([h_res, v_res, hfov[0], hfov[1], vfov[0], vfov[1]]).tolist())

    @property
    def rows(self) -> int:
        return int(np.ceil((self.el_max - self.el_min) / self.v_res - 1e-9))

    @property
    def cols(self) -> int:
        return int(np.ceil((self.az_max - self.az_min) / self.h_res - 1e-9))

    def angles(self, points):
        points = np.asarray(points, dtype=float)
        az = np.arctan2(points[..., 1], points[..., 0])
        el = np.arctan2(points[..., 2], np.hypot(points[..., 0], points[..., 1]))
        return az, el

    def pixel_float(self, points):
        """Continuous (row, col) coordinates; integer part is the cell index."""
        az, el = self.angles(points)
        return (el - self.el_min) / self.v_res, (az - self.az_min) / self.h_res

    def pixel(self, points):
        r, c = self.pixel_float(points)
        return np.floor(r).astype(np.int64), np.floor(c).astype(np.int64)

    def cell_direction(self, row, col) -> np.ndarray:
        el = self.el_min + (np.asarray(row) + 0.5) * self.v_res
        az = self.az_min + (np.asarray(col) + 0.5) * self.h_res
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)

    def to_dict(self) -> dict:
        h, v, a0, a1, e0, e1 = np.degrees(
            [self.h_res, self.v_res, self.az_min, self.az_max, self.el_min, self.el_max]
        ).tolist()
        return {"h_res_deg": h, "v_res_deg": v, "hfov_deg": [a0, a1], "vfov_deg": [e0, e1]}

    @classmethod
    def from_dict(cls, d) -> RangeImageGeometry:
        return cls.from_degrees(d["h_res_deg"], d["v_res_deg"], tuple(d["hfov_deg"]), tuple(d["vfov_deg"]))


@dataclass(frozen=True, eq=False)
class RangeImage:
    """Points binned into a :class:`RangeImageGeometry` grid.

    ``point_row``/``point_col`` are -1 for points outside the image.  Points
    flagged as frustum outliers keep their pixel coordinates but belong to no
    cell.  Cell membership is stored CSR style: the inlier points of linear cell
    ``k`` are ``cell_points[cell_ptr[k]:cell_ptr[k + 1]]``.
    """

    geometry: RangeImageGeometry
    point_row: np.ndarray
    point_col: np.ndarray
    inlier: np.ndarray
    mean_range: np.ndarray
    count: np.ndarray
    mean_point: np.ndarray
    cell_ptr: np.ndarray
    cell_points: np.ndarray

    @property
    def rows(self) -> int:
        return self.geometry.rows

    @property
    def cols(self) -> int:
        return self.geometry.cols

    def cell_indices(self, row: int, col: int) -> np.ndarray:
        k = row * self.cols + col
        return self.cell_points[self.cell_ptr[k]:self.cell_ptr[k + 1]]

    def point_cell(self) -> np.ndarray:
        """Linear cell index of every point, -1 when not stored in a cell."""
        lin = self.point_row * self.cols + self.point_col
        return np.where(self.inlier, lin, -1)


def _group_starts(sorted_keys):
    flags = np.ones(len(sorted_keys), dtype=bool)
    flags[1:] = sorted_keys[1:] != sorted_keys[:-1]
    starts = np.flatnonzero(flags)
    counts = np.diff(np.append(starts, len(sorted_keys)))
    return starts, counts


def build_range_image(
    cloud: PointCloud,
    geometry: RangeImageGeometry,
    outlier_k: float = 3.0,
    outlier_floor: float = 0.2,
) -> RangeImage:
    """Project a cloud onto a cylindrical range image.

    Within each cell, points farther than ``low_median + max(outlier_k * MAD,
    outlier_floor)`` are treated as frustum outliers and excluded from the cell
    mean and membership.  The low median (lower middle element) is used so that
    a cell holding one near and one far return keeps the near one.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise EmptyCloud("cannot build a range image from an empty cloud")
    rows, cols = geometry.rows, geometry.cols
    rng = np.linalg.norm(pts, axis=1)
    r, c = geometry.pixel(pts)
    valid = (r >= 0) & (r < rows) & (c >= 0) & (c < cols) & (rng > 1e-6)
    point_row = np.where(valid, r, -1)
    point_col = np.where(valid, c, -1)

    idx = np.flatnonzero(valid)
    lin = r[idx] * cols + c[idx]
    # one sort on a composite key: cell major, range minor
    span = float(rng[idx].max()) * 2.0 + 1.0 if len(idx) else 1.0
    order = np.argsort(lin * span + rng[idx])
    idx, lin = idx[order], lin[order]
    rs = rng[idx]
    starts, counts = _group_starts(lin)
    group = np.repeat(np.arange(len(starts)), counts)
    med = rs[starts + (counts - 1) // 2]
    dev = np.abs(rs - med[group])
    dspan = float(dev.max()) * 2.0 + 1.0 if len(dev) else 1.0
    dev_sorted = dev[np.argsort(group * dspan + dev)]
    mad = dev_sorted[starts + (counts - 1) // 2]
    thresh = med + np.maximum(outlier_k * mad, outlier_floor)
    keep = rs <= thresh[group] + 1e-12

    inlier = np.zeros(n, dtype=bool)
    inlier[idx[keep]] = True
    kept_idx, kept_lin = idx[keep], lin[keep]
    ncell = rows * cols
    count = np.bincount(kept_lin, minlength=ncell)
    sum_r = np.bincount(kept_lin, weights=rng[kept_idx], minlength=ncell)
    mean_range = np.divide(sum_r, count, out=np.zeros(ncell), where=count > 0)
    mean_point = np.zeros((ncell, 3))
    for k in range(3):
        s = np.bincount(kept_lin, weights=pts[kept_idx, k], minlength=ncell)
        mean_point[:, k] = np.divide(s, count, out=np.zeros(ncell), where=count > 0)
    cell_ptr = np.zeros(ncell + 1, dtype=np.int64)
    np.cumsum(count, out=cell_ptr[1:])
    # kept_idx is already grouped by cell; sort members by point index within each cell
    cell_points = kept_idx[np.argsort(kept_lin * np.int64(n) + kept_idx)]
    return RangeImage(
        geometry=geometry,
        point_row=point_row,
        point_col=point_col,
        inlier=inlier,
        mean_range=mean_range.reshape(rows, cols),
        count=count.reshape(rows, cols),
        mean_point=mean_point.reshape(rows, cols, 3),
        cell_ptr=cell_ptr,
        cell_points=cell_points,
    )


def _neighbour_fill(occ, direction):
    """For every row, the index of the nearest occupied row strictly below (+1) or above (-1)."""
    rows, cols = occ.shape
    out = np.full((rows, cols), -1, dtype=np.int64)
    last = np.full(cols, -1, dtype=np.int64)
    rng = range(rows) if direction > 0 else range(rows - 1, -1, -1)
    for i in rng:
        out[i] = last
        last = np.where(occ[i], i, last)
    return out


def remove_ground(
    img: RangeImage,
    cloud: PointCloud | None = None,
    angle_thresh: float = np.radians(5.0),
    height_tol: float = 0.3,
    slope: float = 0.03,
    resume_tol: float = 0.15,
) -> np.ndarray:
    """Label ground points with a column-wise inclination test.

    Each column is walked upward from its lowest occupied cell.  A cell
    continues the ground when the segment from the ground cell below it is
    inclined less than ``angle_thresh`` from horizontal and its height is
    within ``height_tol + slope * horizontal_gap`` of that ground cell.  Above
    an obstacle, ground may resume only within the tighter ``resume_tol``.  The
    lowest cell of a column is checked against the median height of all
    columns' lowest cells.

    Points of a ground cell, frustum outliers included, are labelled when
    their height is within ``height_tol`` of the cell's median.  Returns a boolean mask over the cloud (True = ground).
    """
    occ = img.count > 0
    lin = img.point_row * img.cols + img.point_col
    in_img = img.point_row >= 0
    if not occ.any():
        return np.zeros(len(lin), dtype=bool)
    rows, cols = occ.shape
    z = img.mean_point[..., 2]
    rho = np.hypot(img.mean_point[..., 0], img.mean_point[..., 1])

    below = _neighbour_fill(occ, +1)
    above = _neighbour_fill(occ, -1)
    colidx = np.broadcast_to(np.arange(cols), (rows, cols))

    def flat(nb):
        has = nb >= 0
        nbz = z[np.where(has, nb, 0), colidx]
        nbr = rho[np.where(has, nb, 0), colidx]
        incl = np.arctan2(np.abs(nbz - z), np.abs(nbr - rho))
        return has & (incl < angle_thresh), has

    flat_b, has_b = flat(below)
    flat_a, has_a = flat(above)

    lowest = np.argmax(occ, axis=0)
    any_occ = occ.any(axis=0)
    z_seed = np.median(z[lowest[any_occ], np.flatnonzero(any_occ)])
    z_ref = np.full(cols, z_seed)
    rho_ref = np.zeros(cols)
    prev_ground = np.zeros(cols, dtype=bool)
    ground_cell = np.zeros((rows, cols), dtype=bool)
    for i in range(rows):
        dz = np.abs(z[i] - z_ref)
        drho = np.abs(rho[i] - rho_ref)
        first = occ[i] & ~has_b[i]
        cont = occ[i] & has_b[i] & prev_ground
        resume = occ[i] & has_b[i] & ~prev_ground
        # ground recedes as elevation rises; a nearer cell above ground is an occluder
        cont &= rho[i] > rho_ref - resume_tol
        ok = (
            (first & (flat_a[i] | ~has_a[i]) & (dz < height_tol))
            | (cont & flat_b[i] & (dz < height_tol + slope * drho))
            | (resume & (flat_a[i] | flat_b[i]) & (dz < resume_tol + slope * drho))
        )
        ground_cell[i] = ok
        z_ref = np.where(ok, z[i], z_ref)
        rho_ref = np.where(ok, rho[i], rho_ref)
        prev_ground = np.where(occ[i], ok, prev_ground)

    label = in_img & ground_cell.ravel()[np.where(in_img, lin, 0)]
    if cloud is None or not label.any():
        return label
    # a ground cell can still hold a near return from an obstacle standing on it;
    # keep only points near the cell's median height
    pz = (cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float).reshape(-1, 3))[:, 2]
    idx = np.flatnonzero(label)
    key = lin[idx]
    zspan = float(np.abs(pz[idx]).max()) * 2.0 + 1.0
    order = np.argsort(key * zspan + (pz[idx] + zspan / 2.0))
    starts, counts = _group_starts(key[order])
    med = pz[idx[order]][starts + (counts - 1) // 2]
    cell_med = np.repeat(med, counts)
    keep = np.abs(pz[idx[order]] - cell_med) < height_tol
    label[idx[order][~keep]] = False
    return label


@dataclass(frozen=True, eq=False)
class Cluster:
    point_indices: np.ndarray
    centroid: np.ndarray
    extent: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __len__(self):
        return len(self.point_indices)


def pca_extent(points: np.ndarray) -> np.ndarray:
    """Half-sizes of the point set along its principal axes, largest first."""
    centered = points - points.mean(axis=0)
    if len(points) < 2:
        return np.zeros(3)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    proj = centered @ vecs[:, ::-1]
    return (proj.max(axis=0) - proj.min(axis=0)) / 2.0


def make_cluster(points_all: np.ndarray, indices) -> Cluster:
    indices = np.sort(np.asarray(indices, dtype=np.int64))
    pts = points_all[indices]
    return Cluster(indices, pts.mean(axis=0), pca_extent(pts))


def segment(
    img: RangeImage,
    cloud: PointCloud,
    ground: np.ndarray | None = None,
    beta_thresh: float = np.radians(10.0),
    min_cluster_points: int = 30,
) -> list[Cluster]:
    """Four-neighbour connected components over non-ground cells.

    Two adjacent cells join when the angle beta between the longer range ray
    and the line through both range endpoints exceeds ``beta_thresh``.
    Clusters are ordered by their smallest point index.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    rows, cols = img.rows, img.cols
    lin_pt = img.point_cell()
    if ground is not None:
        lin_pt = np.where(ground, -1, lin_pt)
    member = lin_pt >= 0
    if not member.any():
        return []
    active = np.zeros(rows * cols, dtype=bool)
    active[lin_pt[member]] = True
    active = active.reshape(rows, cols)
    d = img.mean_range
    g = img.geometry

    def links(a_mask, da, db, psi):
        d1 = np.maximum(da, db)
        d2 = np.minimum(da, db)
        beta = np.arctan2(d2 * np.sin(psi), d1 - d2 * np.cos(psi))
        return a_mask & (beta > beta_thresh)

    lin = np.arange(rows * cols).reshape(rows, cols)
    h_ok = links(active[:, :-1] & active[:, 1:], d[:, :-1], d[:, 1:], g.h_res)
    v_ok = links(active[:-1, :] & active[1:, :], d[:-1, :], d[1:, :], g.v_res)
    src = np.concatenate([lin[:, :-1][h_ok], lin[:-1, :][v_ok]])
    dst = np.concatenate([lin[:, 1:][h_ok], lin[1:, :][v_ok]])
    ncell = rows * cols
    graph = coo_matrix((np.ones(len(src)), (src, dst)), shape=(ncell, ncell))
    _, labels = connected_components(graph, directed=False)

    pidx = np.flatnonzero(member)
    comp = labels[lin_pt[pidx]]
    order = np.argsort(comp, kind="stable")
    comp_sorted = comp[order]
    starts, counts = _group_starts(comp_sorted)
    clusters = []
    for s, n in zip(starts, counts):
        if n < min_cluster_points:
            continue
        clusters.append(make_cluster(pts, pidx[order[s:s + n]]))
    clusters.sort(key=lambda cl: int(cl.point_indices[0]))
    return clusters
