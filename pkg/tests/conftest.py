import numpy as np
import pytest

from boardcalib.search import FrameDetections
from boardcalib.sim import make_scenario, simulate


def truth_detections(cfg, frames=None, min_points=30):
    """Frame detections built straight from simulator labels and true camera poses."""
    out = []
    for pair, truth in simulate(cfg, frames):
        det = {d.target_id: d for d in pair.detections}
        clusters, poses, ids, corners = [], [], [], []
        for b in truth.board_ids:
            pts = pair.cloud.points[truth.labels == b]
            if b in det and len(pts) >= min_points:
                clusters.append(pts)
                poses.append(truth.board_to_camera[b])
                ids.append(b)
                corners.append(det[b].corners)
        out.append(FrameDetections(pair.index, clusters, poses, ids, corners))
    return out


@pytest.fixture(scope="session")
def small_scene():
    cfg = make_scenario(seed=11, n_frames=8, distance=(8.0, 20.0))
    return cfg, truth_detections(cfg)



NOISY = dict(range_sigma=0.02, pixel_sigma=0.5)


def cli_simulate(out, **scenario):
    """Write a dataset through ``boardcalib simulate`` so it carries a nominal extrinsic."""
    import json

    from boardcalib.cli import main

    out.mkdir(parents=True, exist_ok=True)
    cfg = out.with_suffix(".json")
    cfg.write_text(json.dumps({"scenario": scenario}))
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def dataset200(tmp_path_factory):
    """The default 200-frame noisy drive (seed 0), written once per session."""
    return cli_simulate(tmp_path_factory.mktemp("ds200") / "ds", seed=0, n_frames=200, **NOISY)


# one line per acceptance criterion, echoed after the run
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
