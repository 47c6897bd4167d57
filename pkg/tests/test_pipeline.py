from dataclasses import replace

import numpy as np
import pytest

from boardcalib.errors import Diverged, NoDetections
from boardcalib.evaluation import euler_error_deg, perturb
from boardcalib.geom import RigidTransform, euler_to_matrix
from boardcalib.pipeline import PipelineConfig, calibrate, detect_all, optimize_extrinsic, select_by_distance
from boardcalib.search import FrameDetections
from boardcalib.sim import make_scenario, simulate


@pytest.fixture(scope="module")
def drive():
    cfg = make_scenario(seed=21, n_frames=20)
    return cfg, [p for p, _ in simulate(cfg)]


@pytest.mark.parametrize(
    "kw",
    [{"method": "fast"}, {"threshold": 1.2}, {"alpha": -1.0}, {"threads": 0}, {"beta_thresh_deg": 95}, {"min_cluster_points": 2}],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        PipelineConfig(RigidTransform.identity(), **kw)


def test_detection_finds_the_boards(drive):
    cfg, pairs = drive
    frames, reports, timings = detect_all(pairs[:6], cfg.camera, cfg.pattern.range_image_geometry(), PipelineConfig(cfg.extrinsic))
    assert set(timings) == {"lidar_detection_ms", "camera_detection_ms"}
    for f, r in zip(frames, reports):
        assert len(f.clusters) == sum(r.accepted)
        assert len(f.board_poses) == len(f.target_ids) == len(f.corners)
    assert sum(len(f.clusters) for f in frames) >= 10


def test_threads_do_not_change_detections(drive):
    cfg, pairs = drive
    geo = cfg.pattern.range_image_geometry()
    one, _, _ = detect_all(pairs[:4], cfg.camera, geo, PipelineConfig(cfg.extrinsic))
    two, _, _ = detect_all(pairs[:4], cfg.camera, geo, PipelineConfig(cfg.extrinsic, threads=2))
    for a, b in zip(one, two):
        assert len(a.clusters) == len(b.clusters)
        for x, y in zip(a.clusters, b.clusters):
            np.testing.assert_array_equal(x, y)


def _frame(index, cam_pos):
    pose = RigidTransform(np.eye(3), -np.asarray(cam_pos, dtype=float))  # board -> camera
    return FrameDetections(index, [], [pose], [0], [np.zeros((4, 2))])


def test_select_by_distance():
    frames = [_frame(k, [0.0, 0.0, -30.0 + 0.4 * k]) for k in range(20)]
    frames.insert(5, FrameDetections(99, [], [], [], []))
    assert select_by_distance(frames, 0.0) == frames
    kept = select_by_distance(frames, 1.0)
    assert [f.index for f in kept] == [0, 3, 6, 9, 12, 15, 18]
    sizes = [len(select_by_distance(frames, d)) for d in (0.5, 1.0, 2.0, 4.0)]
    assert sizes == sorted(sizes, reverse=True)


def test_no_board_scene_raises_no_detections():
    cfg = make_scenario(seed=2, n_frames=3, n_boards=0)
    pairs = [p for p, _ in simulate(cfg)]
    for grid in (True, False):
        with pytest.raises(NoDetections):
            calibrate(pairs, cfg.camera, cfg.pattern.range_image_geometry(), PipelineConfig(cfg.extrinsic, grid_search=grid))


@pytest.mark.slow
def test_calibrate_recovers_extrinsic(drive):
    cfg, pairs = drive
    init, _ = perturb(cfg.extrinsic, np.random.default_rng(0), 3.0, 0.02)
    out = calibrate(pairs, cfg.camera, cfg.pattern.range_image_geometry(), PipelineConfig(init))
    assert out.primary.converged
    assert np.abs(euler_error_deg(out.primary.extrinsic, cfg.extrinsic)).max() < 0.05
    assert np.linalg.norm(out.primary.extrinsic.translation - cfg.extrinsic.translation) < 0.005
    assert set(out.timings_ms) == {"lidar_detection_ms", "camera_detection_ms", "grid_search_ms", "optimization_ms"}
    assert out.search is not None and out.search.score > 0


@pytest.mark.slow
def test_large_init_error_without_grid_search_fails(drive):
    cfg, pairs = drive
    pc = PipelineConfig(cfg.extrinsic)
    frames, _, _ = detect_all(pairs, cfg.camera, cfg.pattern.range_image_geometry(), pc)
    init = RigidTransform(euler_to_matrix(*np.radians([8.0, 8.0, 8.0])) @ cfg.extrinsic.rotation, cfg.extrinsic.translation)
    try:
        res = optimize_extrinsic(frames, init, cfg.camera, replace(pc, grid_search=False))["direct"]
    except (Diverged, NoDetections):
        return
    assert np.abs(euler_error_deg(res.extrinsic, cfg.extrinsic)).max() > 0.5
