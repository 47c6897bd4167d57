import numpy as np
import pytest

from boardcalib.camera import BoardModel, solve_planar_pnp
from boardcalib.geom import RigidTransform, euler_to_matrix, project_unchecked, rotation_angle
from boardcalib.io import directory_digest, generate_dataset, load_dataset
from boardcalib.sim import (
    BOARD_FACING_MINUS_X,
    CLUTTER,
    GROUND,
    BoardPlacement,
    NoiseModel,
    ScenarioConfig,
    board_to_camera,
    default_camera,
    default_extrinsic,
    make_scenario,
    render_detections,
    scan_lidar,
    simulate,
)

BOARD = BoardModel()
MOUNT = RigidTransform(np.eye(3), [1.2, 0.0, 1.9])


def rig(placements, **noise):
    """A parked vehicle at the world origin looking at hand-placed boards."""
    return ScenarioConfig(
        boards=tuple(placements),
        extrinsic=default_extrinsic(),
        camera=default_camera(),
        trajectory=(RigidTransform.identity(),),
        timestamps=(0.0,),
        noise=NoiseModel(**noise),
        lidar_mount=MOUNT,
    )


def facing_lidar(dist, az_deg=0.0):
    """A board whose normal points back at the LiDAR from range ``dist`` along azimuth ``az_deg``."""
    a = np.radians(az_deg)
    center = MOUNT.translation + dist * np.array([np.cos(a), np.sin(a), 0.0])
    return BoardPlacement(RigidTransform(euler_to_matrix(0.0, 0.0, a) @ BOARD_FACING_MINUS_X, center), BOARD)


def rectangle_solid_angle(a, b, d):
    # centered a x b rectangle at perpendicular distance d
    return 4.0 * np.arcsin(a * b / np.sqrt((a * a + 4 * d * d) * (b * b + 4 * d * d)))


def test_hit_count_matches_solid_angle():
    cfg = rig([facing_lidar(10.0)])
    cloud, labels = scan_lidar(cfg, 0)
    d_az, d_el = cfg.pattern.angular_resolution()
    expected = rectangle_solid_angle(BOARD.side_length, BOARD.side_length, 10.0) / (d_az * d_el)
    hits = int(np.sum(labels == 0))
    assert abs(hits - expected) <= 0.1 * expected


def test_fov_clipping_keeps_only_inside_half():
    full = int(np.sum(scan_lidar(rig([facing_lidar(10.0)]), 0)[1] == 0))
    cfg = rig([facing_lidar(10.0, az_deg=60.0)])
    cloud, labels = scan_lidar(cfg, 0)
    pts = cloud.points[labels == 0]
    az = np.degrees(np.arctan2(pts[:, 1], pts[:, 0]))
    assert len(pts) > 0
    assert az.max() <= cfg.pattern.hfov_deg[1] + 1e-4
    assert 0.3 * full < len(pts) < 0.7 * full


def test_scan_is_deterministic():
    cfg = make_scenario(seed=4, n_frames=2, range_sigma=0.02, dropout=0.1)
    a, la = scan_lidar(cfg, 1)
    b, lb = scan_lidar(cfg, 1)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(la, lb)


def test_labels_cover_every_point(small_scene):
    cfg, _ = small_scene
    for pair, truth in simulate(cfg, [0, 3]):
        assert len(truth.labels) == len(pair.cloud)
        assert set(np.unique(truth.labels)) <= {GROUND, CLUTTER, *range(len(cfg.boards))}


def test_board_points_lie_on_board():
    sigma = 0.02
    cfg = make_scenario(seed=5, n_frames=6, range_sigma=sigma)
    half_diag = BOARD.half_side * np.sqrt(2)
    local = []
    for pair, truth in simulate(cfg):
        for k, b in enumerate(cfg.boards):
            to_board = b.pose.inverse() @ cfg.lidar_pose(pair.index)
            local.append(to_board.apply(pair.cloud.points[truth.labels == k]))
    local = np.concatenate(local)
    # noise acts along rays that meet the board almost head on, so |z| is close to N(0, sigma)
    off_plane = np.abs(local[:, 2])
    assert np.mean(off_plane <= 3 * sigma) >= 0.99
    assert off_plane.max() <= 6 * sigma
    assert np.all(np.linalg.norm(local[:, :2], axis=1) <= half_diag + 3 * sigma)


def test_on_axis_board_is_symmetric():
    cfg0 = rig([])
    pose = cfg0.camera_pose(0) @ RigidTransform(np.eye(3), [0.0, 0.0, 10.0])
    cfg = rig([BoardPlacement(pose, BOARD)])
    (det,) = render_detections(cfg, 0)
    pp = np.array([cfg.camera.cx, cfg.camera.cy])
    np.testing.assert_allclose(det.corners.mean(axis=0), pp, atol=1e-9)
    np.testing.assert_allclose(det.corners[0] + det.corners[2], 2 * pp, atol=1e-9)
    np.testing.assert_allclose(det.corners[1] + det.corners[3], 2 * pp, atol=1e-9)


def test_board_behind_camera_is_dropped():
    cfg0 = rig([])
    pose = cfg0.camera_pose(0) @ RigidTransform(np.eye(3), [0.0, 0.0, -10.0])
    assert render_detections(rig([BoardPlacement(pose, BOARD)]), 0) == []


def test_noise_free_corners_give_true_pose(small_scene):
    cfg, _ = small_scene
    for i in range(3):
        for det in render_detections(cfg, i):
            pose, _ = solve_planar_pnp(det.corners, BOARD, cfg.camera)
            truth = board_to_camera(cfg, i, det.target_id)
            assert np.linalg.norm(pose.translation - truth.translation) < 1e-4
            assert rotation_angle(pose.rotation @ truth.rotation.T) < 1e-4


def test_projection_consistency():
    sigma = 0.5
    cfg = make_scenario(seed=6, n_frames=10, pixel_sigma=sigma)
    to_cam = cfg.extrinsic.inverse()
    dev = []
    for pair, truth in simulate(cfg):
        for det in pair.detections:
            uv = project_unchecked(cfg.camera, to_cam.apply(truth.vertices_lidar[det.target_id][1:]))
            dev.append(np.abs(uv - det.corners).ravel())
    dev = np.concatenate(dev)
    assert len(dev) > 0
    # per-coordinate Gaussian noise: 99.73% within 3 sigma
    assert np.mean(dev <= 3 * sigma) >= 0.99
    assert dev.max() <= 5 * sigma


def test_scenario_is_seeded():
    a = make_scenario(seed=3, n_frames=4)
    b = make_scenario(seed=3, n_frames=4)
    c = make_scenario(seed=4, n_frames=4)
    assert [p.pose.as_matrix().tolist() for p in a.boards] == [p.pose.as_matrix().tolist() for p in b.boards]
    assert [p.pose.as_matrix().tolist() for p in a.boards] != [p.pose.as_matrix().tolist() for p in c.boards]


def test_mems_pattern_scans_boards():
    cfg = make_scenario(seed=2, n_frames=2, pattern="mems", distance=(8.0, 12.0))
    _, labels = scan_lidar(cfg, 0)
    assert np.sum(labels >= 0) > 100


def test_dataset_same_seed_byte_identical(tmp_path):
    cfg = make_scenario(seed=8, n_frames=3, range_sigma=0.02, pixel_sigma=0.5)
    a = generate_dataset(cfg, tmp_path / "a")
    b = generate_dataset(make_scenario(seed=8, n_frames=3, range_sigma=0.02, pixel_sigma=0.5), tmp_path / "b")
    assert directory_digest(a) == directory_digest(b)


def test_zero_board_dataset(tmp_path):
    cfg = make_scenario(seed=1, n_frames=3, n_boards=0)
    ds = load_dataset(generate_dataset(cfg, tmp_path / "empty"))
    assert len(ds) == 3
    for k, pair in enumerate(ds.pairs()):
        assert pair.detections == []
        assert not np.any(ds.labels(k) >= 0)


@pytest.mark.slow
def test_default_dataset_has_200_pairs(dataset200):
    ds = load_dataset(dataset200)
    assert len(ds) == 200
    for k in (0, 99, 199):
        assert len(ds.labels(k)) == len(ds.pair(k).cloud)
