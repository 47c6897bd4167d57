"""Acceptance criteria 1-10, run end to end through the library and the CLI.

Each test records a single PASS/FAIL line in ``conftest.CRITERIA``; the lines
are echoed in the terminal summary.
"""

import csv
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from boardcalib.cli import main
from boardcalib.config import nominal_extrinsic
from boardcalib.evaluation import euler_error_deg, perturb, translation_error_m
from boardcalib.io import directory_digest, load_dataset, payload_digest, read_report, transform_from_dict
from boardcalib.pipeline import PipelineConfig, calibrate
from boardcalib.search import generate_candidates, radius_scores, roi_scores, select_best
from boardcalib.sim import make_scenario, simulate

from conftest import CRITERIA, NOISY, cli_simulate, truth_detections

pytestmark = pytest.mark.slow

TESTS = Path(__file__).parent


def record(n, ok, detail, part=""):
    tag = f"{n}{part}"
    line = f"criterion {tag:<3}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[n, part] = line
    print(line)
    assert ok, line


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report_errors(ds_path, report, method):
    truth = load_dataset(ds_path).true_extrinsic()
    est = transform_from_dict(report["results"][method]["extrinsic"])
    return euler_error_deg(est, truth), translation_error_m(est, truth)


@pytest.fixture(scope="module")
def calibrated200(dataset200, tmp_path_factory):
    """CLI calibration of the default 200-frame drive, with its wall time."""
    out = tmp_path_factory.mktemp("rep200")
    t0 = time.perf_counter()
    code = main(["calibrate", "--dataset", str(dataset200), "--out", str(out)])
    wall = time.perf_counter() - t0
    return code, out, wall


def test_criterion_01_noise_free_round_trip():
    cfg = make_scenario(seed=1, n_frames=20)
    pairs = [p for p, _ in simulate(cfg)]
    pc = PipelineConfig(nominal_extrinsic(cfg, {}), method="both")
    t0 = time.perf_counter()
    out = calibrate(pairs, cfg.camera, cfg.pattern.range_image_geometry(), pc)
    wall = time.perf_counter() - t0
    parts, ok = [], wall < 30.0
    for m in ("direct", "indirect"):
        e = np.abs(euler_error_deg(out.results[m].extrinsic, cfg.extrinsic)).max()
        t = np.linalg.norm(translation_error_m(out.results[m].extrinsic, cfg.extrinsic))
        ok &= e <= 0.05 and t <= 0.005
        parts.append(f"{m} {e:.4f} deg / {1e3 * t:.2f} mm")
    record(1, ok, f"{', '.join(parts)}; {wall:.1f} s (limits 0.05 deg, 5 mm, 30 s)")


def test_criterion_02_noisy_direct(calibrated200, dataset200):
    code, out, _ = calibrated200
    assert code == 0
    e, t = report_errors(dataset200, read_report(out), "direct")
    rot, trans = [np.abs(e).max()], [np.linalg.norm(t)]
    for seed in range(1, 5):
        cfg = make_scenario(seed=seed, n_frames=200, **NOISY)
        pairs = [p for p, _ in simulate(cfg)]
        res = calibrate(pairs, cfg.camera, cfg.pattern.range_image_geometry(), PipelineConfig(nominal_extrinsic(cfg, {})))
        rot.append(np.abs(euler_error_deg(res.primary.extrinsic, cfg.extrinsic)).max())
        trans.append(np.linalg.norm(translation_error_m(res.primary.extrinsic, cfg.extrinsic)))
    r, m = float(np.median(rot)), float(np.median(trans))
    record(2, r <= 0.3 and m <= 0.03,
           f"median over 5 seeds {r:.3f} deg / {100 * m:.2f} cm (limits 0.3 deg, 3 cm); per seed {np.round(rot, 3).tolist()}")


def test_criterion_03_grid_search_convergence(tmp_path):
    ds = cli_simulate(tmp_path / "ds", seed=30, n_frames=40, **NOISY)
    out = tmp_path / "gt"
    assert main(["grid-trial", "--dataset", str(ds), "--out", str(out), "--trials", "100", "--perturb-deg", "10"]) == 0
    table = rows(out / "grid_trials.csv")
    assert len(table) == 200
    with_gs = sum(r["converged"] == "True" for r in table if r["grid_search"] == "True")
    without = sum(r["converged"] == "True" for r in table if r["grid_search"] == "False")
    record(3, with_gs >= 95 and without < 30,
           f"converged {with_gs}/100 with grid search (need >= 95), {without}/100 without (need < 30)")


def test_criterion_04_roi_matches_radius_oracle():
    agree, near = 0, 0
    for s in range(20):
        rng = np.random.default_rng([s, 4])
        cfg = make_scenario(seed=1000 + s, n_frames=int(rng.integers(1, 6)))
        frames = truth_detections(cfg)
        init, _ = perturb(cfg.extrinsic, rng, 10.0)
        cands = generate_candidates(init)
        a = select_best(cands, roi_scores(frames, cands, cfg.boards[0].model, cfg.pattern.range_image_geometry()))
        b = select_best(cands, radius_scores(frames, cands, cfg.boards[0].model))
        agree += a == b
        step = np.abs(cands.perturbations[a] - cands.perturbations[b]).max()
        near += step <= np.radians(1.5) + 1e-9
    record(4, agree == 20, f"argmax agrees on {agree}/20 scenes; within one grid step on {near}/20")


def test_criterion_05_alpha_sweep(tmp_path):
    ds = cli_simulate(tmp_path / "ds", seed=40, n_frames=30, **NOISY)
    out = tmp_path / "sweep"
    assert main(["alpha-sweep", "--dataset", str(ds), "--out", str(out)]) == 0
    table = rows(out / "alpha_sweep.csv")
    alphas = [float(r["alpha_m"]) for r in table]
    err = [float(r["projection_error_px"]) for r in table]
    ok = alphas == sorted(alphas) and len(alphas) == 11 and all(np.isfinite(err)) and err[0] <= err[-1]
    record(5, ok, f"projection error {err[0]:.3f} px at alpha 0 vs {err[-1]:.3f} px at alpha 0.1; "
                  f"curve {np.round(err, 3).tolist()}")


REGIMES = {
    # boards high and near: the top rows of the scan clip them
    "close": dict(distance=[5.5, 8.5], board_height=[2.3, 2.6]),
    "far": dict(distance=[25.0, 32.0]),
}


@pytest.mark.parametrize("regime", list(REGIMES))
def test_criterion_06_direct_vs_indirect(regime, tmp_path):
    datasets, reports = [], []
    for seed in range(5):
        ds = cli_simulate(tmp_path / f"ds{seed}", seed=200 + seed, n_frames=100, **NOISY, **REGIMES[regime])
        rep = tmp_path / f"rep{seed}"
        code = main(["calibrate", "--dataset", str(ds), "--out", str(rep), "--method", "both"])
        if code != 0:
            record(6, False, f"{regime}: calibrate exited {code} on seed {seed}", "ab"[regime == "far"])
        datasets.append(str(ds))
        reports.append(str(rep))
    ev = tmp_path / "eval"
    assert main(["eval", "--dataset", *datasets, "--report", *reports, "--out", str(ev)]) == 0
    std = {(r["method"], r["axis"]): float(r["std_deg"]) for r in rows(ev / "std.csv")}
    ok = all(std["direct", a] <= std["indirect", a] for a in ("roll", "pitch"))
    detail = ", ".join(f"{a} {std['direct', a]:.4f} vs {std['indirect', a]:.4f}" for a in ("roll", "pitch", "yaw"))
    record(6, ok, f"{regime}: STD deg direct vs indirect: {detail} (yaw not asserted)", "ab"[regime == "far"])


@pytest.mark.parametrize("pattern", ["mechanical", "mems"])
def test_criterion_07_descriptor_pr(pattern, tmp_path):
    ds = cli_simulate(tmp_path / "ds", seed=50, n_frames=30, pattern=pattern, **NOISY)
    out = tmp_path / "pr"
    assert main(["eval", "--dataset", str(ds), "--out", str(out), "--pr"]) == 0
    pr = {round(float(r["threshold"]), 2): r for r in rows(out / "pr.csv")}
    p, r = float(pr[0.94]["precision"]), float(pr[0.94]["recall"])
    full = sorted(pr) == [round(0.70 + 0.01 * k, 2) for k in range(30)]
    record(7, full and p >= 0.9 and r >= 0.9,
           f"{pattern}: precision {p:.3f}, recall {r:.3f} at 0.94; {len(pr)} thresholds emitted", "ab"[pattern == "mems"])


def test_criterion_08_invariant_suites():
    keys = "pcc or reduced_form or rigid_invariance or rsvd or partition or test_geom"
    files = [str(TESTS / f) for f in ("test_geom.py", "test_descriptor.py", "test_optimize.py", "test_cloud.py")]
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-k", keys, *files],
                          capture_output=True, text=True, cwd=TESTS.parent)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record(8, proc.returncode == 0 and " passed" in summary, f"invariant suites: {summary}")


def test_criterion_09_determinism(tmp_path):
    a = cli_simulate(tmp_path / "a", seed=60, n_frames=10, **NOISY)
    b = cli_simulate(tmp_path / "b", seed=60, n_frames=10, **NOISY)
    same_data = directory_digest(a) == directory_digest(b)
    for name in ("ra", "rb"):
        assert main(["calibrate", "--dataset", str(a), "--out", str(tmp_path / name), "--method", "both"]) == 0
    same_report = payload_digest(read_report(tmp_path / "ra")) == payload_digest(read_report(tmp_path / "rb"))
    same_csv = (tmp_path / "ra" / "per_frame.csv").read_bytes() == (tmp_path / "rb" / "per_frame.csv").read_bytes()
    record(9, same_data and same_report and same_csv,
           f"dataset bytes equal: {same_data}; report payload equal: {same_report}; per-frame CSV equal: {same_csv}")


def test_criterion_10_timing(calibrated200):
    code, out, wall = calibrated200
    assert code == 0
    t = read_report(out)["timings_ms"]
    grid = t["grid_search_ms"] / 1e3
    record(10, wall < 60.0 and grid < 2.0,
           f"200-frame pipeline {wall:.1f} s (limit 60 s), grid search {grid:.2f} s (limit 2 s); "
           f"stages ms {({k: round(v) for k, v in t.items()})}")
