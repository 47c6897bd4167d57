import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boardcalib.cloud import PointCloud, RangeImageGeometry, build_range_image, remove_ground, segment
from boardcalib.errors import EmptyCloud
from boardcalib.sim import GROUND, make_scenario, simulate_frame

GEOM = RangeImageGeometry.from_degrees(0.2, 0.4, (-60, 60), (-16, 8))


def scene(n_boards=2, distance=10.0, spread=1.5, seed=0, **kw):
    cfg = make_scenario(seed=seed, n_frames=1, n_boards=n_boards, distance=(distance, distance),
                        lateral_spread=spread, clutter=0.0, **kw)
    pair, truth = simulate_frame(cfg, 0)
    return cfg, pair.cloud, truth


def pipeline(cloud, geometry):
    img = build_range_image(cloud, geometry)
    ground = remove_ground(img, cloud)
    return img, ground, segment(img, cloud, ground)


def test_single_point_on_boresight():
    geom = RangeImageGeometry.from_degrees(1.0, 1.0, (-10, 10), (-10, 10))
    img = build_range_image(PointCloud([[7.0, 0.0, 0.0]]), geom)
    assert (img.point_row[0], img.point_col[0]) == (10, 10)
    assert img.mean_range[10, 10] == pytest.approx(7.0)


def test_two_returns_same_direction_average():
    geom = RangeImageGeometry.from_degrees(1.0, 1.0, (-10, 10), (-10, 10))
    d = np.array([1.0, 0.01, 0.02]) / np.linalg.norm([1.0, 0.01, 0.02])
    img = build_range_image(PointCloud([10.0 * d, 10.01 * d]), geom)
    r, c = img.point_row[0], img.point_col[0]
    assert img.count[r, c] == 2
    assert img.mean_range[r, c] == pytest.approx(10.005)


def test_point_outside_fov_dropped():
    geom = RangeImageGeometry.from_degrees(1.0, 1.0, (-10, 10), (-10, 10))
    base = build_range_image(PointCloud([[5.0, 0.0, 0.0]]), geom)
    img = build_range_image(PointCloud([[5.0, 0.0, 0.0], [1.0, 0.0, 5.0]]), geom)
    assert img.point_row[1] == -1
    assert np.array_equal(base.mean_range, img.mean_range)


def test_far_return_in_cell_rejected():
    geom = RangeImageGeometry.from_degrees(1.0, 1.0, (-10, 10), (-10, 10))
    d = np.array([1.0, 0.0, 0.0])
    img = build_range_image(PointCloud([5.0 * d, 5.01 * d, 20.0 * d]), geom)
    assert img.mean_range[10, 10] == pytest.approx(5.005)
    assert not img.inlier[2]


def test_empty_cloud_raises():
    with pytest.raises(EmptyCloud):
        build_range_image(PointCloud(np.zeros((0, 3))), GEOM)


def test_cells_hold_each_point_once():
    _, cloud, _ = scene()
    img = build_range_image(cloud, GEOM)
    assert len(np.unique(img.cell_points)) == len(img.cell_points)
    assert np.all(img.mean_range[img.count > 0] > 0)
    assert img.cell_points.max() < len(cloud)


def test_cell_centers_reproject_within_one_cell():
    _, cloud, _ = scene()
    img = build_range_image(cloud, GEOM)
    ok = img.point_row >= 0
    r, c = GEOM.pixel_float(GEOM.cell_direction(img.point_row[ok], img.point_col[ok]))
    rf, cf = GEOM.pixel_float(cloud.points[ok])
    assert np.all(np.abs(r - rf) <= 1.0) and np.all(np.abs(c - cf) <= 1.0)


def test_flat_ground_labelled():
    _, cloud, truth = scene(n_boards=0)
    img = build_range_image(cloud, GEOM)
    ground = remove_ground(img, cloud)
    assert np.all(truth.labels == GROUND)
    assert ground.mean() >= 0.99
    assert segment(img, cloud, ground) == []


def test_board_points_not_ground():
    _, cloud, truth = scene(n_boards=1)
    img = build_range_image(cloud, GEOM)
    ground = remove_ground(img, cloud)
    assert not np.any(ground[truth.labels == 0])


def test_two_boards_two_clusters():
    _, cloud, truth = scene()
    img, ground, clusters = pipeline(cloud, GEOM)
    assert len(clusters) == 2
    for board in (0, 1):
        members = np.flatnonzero(truth.labels == board)
        best = max(np.isin(members, c.point_indices).mean() for c in clusters)
        assert best >= 0.95


def test_single_board_centroid():
    cfg, cloud, truth = scene(n_boards=1)
    _, _, clusters = pipeline(cloud, GEOM)
    assert len(clusters) == 1
    # the returns cover the board face, so their mean should sit on its center
    center = truth.vertices_lidar[0][0]
    assert np.linalg.norm(clusters[0].centroid - center) < 0.02


def test_segmentation_partition_and_determinism():
    cfg = make_scenario(seed=3, n_frames=1, distance=(8.0, 8.0), range_sigma=0.02)
    pair, _ = simulate_frame(cfg, 0)
    geom = cfg.pattern.range_image_geometry()
    _, _, a = pipeline(pair.cloud, geom)
    _, _, b = pipeline(pair.cloud, geom)
    allidx = np.concatenate([c.point_indices for c in a])
    assert len(np.unique(allidx)) == len(allidx)
    assert [c.point_indices.tolist() for c in a] == [c.point_indices.tolist() for c in b]
    firsts = [c.point_indices.min() for c in a]
    assert firsts == sorted(firsts)
    for c in a:
        assert len(c) >= 30
        assert np.allclose(c.centroid, pair.cloud.points[c.point_indices].mean(axis=0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(50, 400))
def test_random_clouds_partition(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.uniform([-2, -20, -3], [40, 20, 3], (n, 3))
    cloud = PointCloud(pts)
    img, ground, clusters = pipeline(cloud, GEOM)
    allidx = np.concatenate([c.point_indices for c in clusters]) if clusters else np.empty(0, int)
    assert len(np.unique(allidx)) == len(allidx)
    assert not np.any(ground[allidx])
