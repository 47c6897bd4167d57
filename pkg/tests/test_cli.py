import csv
import json

import numpy as np
import pytest

from boardcalib.cli import main
from boardcalib.io import STAGES, build_report, directory_digest, load_dataset, read_report, write_report
from boardcalib.optimize import CalibrationResult
from boardcalib.pipeline import PipelineOutput


def write_config(path, **scenario):
    path.write_text(json.dumps({"scenario": scenario}))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def noise_free(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "scen.json", seed=21, n_frames=20)
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "ds")]) == 0
    return root / "ds"


def perfect_report(ds_path, out):
    truth = load_dataset(ds_path).true_extrinsic()
    res = CalibrationResult(truth, np.zeros(0), np.zeros(0, dtype=int), True, 0, "direct")
    doc = build_report(PipelineOutput({"direct": res}, truth, None, [], [], {k: 0.0 for k in STAGES}))
    out.mkdir()
    write_report(doc, out)
    return out


def test_simulate_is_deterministic(tmp_path):
    cfg = write_config(tmp_path / "c.json", seed=5, n_frames=3, range_sigma=0.02, pixel_sigma=0.5)
    for name in ("a", "b"):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")
    ds = load_dataset(tmp_path / "a")
    assert len(ds) == 3
    assert ds.nominal_extrinsic() is not None


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path / "c.json", seed=5, n_frames=2)
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "6"])
    assert load_dataset(tmp_path / "a").manifest["scenario"]["seed"] == 6


def test_no_boards_exits_with_no_detections(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", seed=1, n_frames=3, n_boards=0)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
    code = main(["calibrate", "--dataset", str(tmp_path / "ds"), "--out", str(tmp_path / "rep")])
    assert code == 3
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload["error"] == "NoDetections" and payload["exit_code"] == 3
    assert json.loads((tmp_path / "rep" / "error.json").read_text()) == payload


def test_missing_dataset_is_io_failure(tmp_path):
    assert main(["calibrate", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 7


def test_bad_config_is_io_failure(tmp_path):
    (tmp_path / "c.json").write_text('{"scenario": {"n_frame": 3}}')
    assert main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 7


def test_bad_threads_and_usage():
    assert main(["calibrate", "--dataset", "x", "--out", "y", "--threads", "0"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["calibrate"])
    assert exc.value.code == 2


def test_calibrate_noise_free(noise_free, tmp_path):
    out = tmp_path / "rep"
    assert main(["calibrate", "--dataset", str(noise_free), "--out", str(out), "--method", "both"]) == 0
    doc = read_report(out)
    assert set(doc["results"]) == {"direct", "indirect"}
    assert set(doc["timings_ms"]) == set(STAGES)
    assert rows(out / "per_frame.csv")
    ev = tmp_path / "ev"
    assert main(["eval", "--dataset", str(noise_free), "--report", str(out), "--out", str(ev)]) == 0
    for r in rows(ev / "errors.csv"):
        assert max(abs(float(r[k])) for k in ("roll_error_deg", "pitch_error_deg", "yaw_error_deg")) < 0.05
        assert np.linalg.norm([float(r[k]) for k in ("tx_error_m", "ty_error_m", "tz_error_m")]) < 0.005


def test_eval_perfect_report_has_zero_error(noise_free, tmp_path):
    rep = perfect_report(noise_free, tmp_path / "rep")
    assert main(["eval", "--dataset", str(noise_free), "--report", str(rep), "--out", str(tmp_path / "ev")]) == 0
    (r,) = rows(tmp_path / "ev" / "errors.csv")
    for k in ("roll_error_deg", "pitch_error_deg", "yaw_error_deg", "tx_error_m", "ty_error_m", "tz_error_m"):
        assert abs(float(r[k])) < 1e-9
    assert float(r["projection_error_px"]) < 1e-6


def test_eval_std_table_shape(noise_free, tmp_path):
    rep = perfect_report(noise_free, tmp_path / "rep")
    args = ["eval", "--dataset", *[str(noise_free)] * 5, "--report", *[str(rep)] * 5, "--out", str(tmp_path / "ev")]
    assert main(args) == 0
    std = rows(tmp_path / "ev" / "std.csv")
    assert [r["axis"] for r in std] == ["roll", "pitch", "yaw"]
    assert all(r["runs"] == "5" for r in std)


def test_eval_without_truth(noise_free, tmp_path):
    import shutil

    ds = tmp_path / "ds"
    shutil.copytree(noise_free, ds)
    m = json.loads((ds / "manifest.json").read_text())
    m["truth"] = None
    (ds / "manifest.json").write_text(json.dumps(m))
    assert main(["eval", "--dataset", str(ds), "--out", str(tmp_path / "ev")]) == 7


def test_eval_pr_curve(noise_free, tmp_path):
    assert main(["eval", "--dataset", str(noise_free), "--out", str(tmp_path / "ev"), "--pr"]) == 0
    pr = rows(tmp_path / "ev" / "pr.csv")
    assert [round(float(r["threshold"]), 2) for r in pr] == [round(0.70 + 0.01 * k, 2) for k in range(30)]


def test_grid_trial_zero_is_empty(noise_free, tmp_path):
    assert main(["grid-trial", "--dataset", str(noise_free), "--out", str(tmp_path), "--trials", "0"]) == 0
    lines = (tmp_path / "grid_trials.csv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("trial,grid_search")


def test_alpha_sweep_single_alpha(noise_free, tmp_path):
    assert main(["alpha-sweep", "--dataset", str(noise_free), "--out", str(tmp_path), "--alphas", "0"]) == 0
    (r,) = rows(tmp_path / "alpha_sweep.csv")
    assert float(r["alpha_m"]) == 0.0
    # noise-free data at alpha 0: the indirect result reprojects the true vertices almost exactly
    assert float(r["projection_error_px"]) < 1.0
