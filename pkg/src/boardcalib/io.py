"""On-disk formats: point clouds, detections, datasets, truth and reports.

Every file carries a format name and an integer version.  Readers refuse
versions newer than they understand.

Point cloud binary layout (little endian)::

    magic  b"BCPC"   4 bytes
    version          uint16
    flags            uint16   bit 0: rings present, bit 1: timestamps present
    count            uint64
    xyz              count * 3 float32
    rings            count int32    (if flagged)
    timestamps       count float64  (if flagged)

The text variant starts with ``# boardcalib-cloud <version> <count> <flags>``
followed by one ``x y z [ring] [t]`` line per point.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .camera import BoardModel, CameraDetection, FramePair
from .cloud import PointCloud, RangeImageGeometry
from .errors import IoFailure, ParseError, SchemaError
from .geom import PinholeCamera, RigidTransform, rotation_to_euler

CLOUD_MAGIC = b"BCPC"
CLOUD_VERSION = 1
DETECTIONS_VERSION = 1
DATASET_VERSION = 1
TRUTH_VERSION = 1
REPORT_VERSION = 1
CORNER_ORDER = ["top_left", "top_right", "bottom_right", "bottom_left"]
STAGES = ("lidar_detection_ms", "camera_detection_ms", "grid_search_ms", "optimization_ms")

_HEADER = struct.Struct("<4sHHQ")


def _check_version(found, supported, what):
    if not isinstance(found, int) or found < 1:
        raise SchemaError("version", f"{what}: version must be a positive integer")
    if found > supported:
        raise SchemaError("version", f"{what}: version {found} is newer than supported {supported}")


def _write_bytes(path, data: bytes):
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_json(path, obj):
    _write_bytes(path, dump_json(obj).encode())


def read_json(path):
    raw = _read_bytes(path)
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg} (line {exc.lineno})", exc.pos) from exc


# ---------------------------------------------------------------- clouds


def encode_cloud(cloud: PointCloud) -> bytes:
    pts = np.asarray(cloud.points, dtype="<f4").reshape(-1, 3)
    flags = (1 if cloud.rings is not None else 0) | (2 if cloud.timestamps is not None else 0)
    parts = [_HEADER.pack(CLOUD_MAGIC, CLOUD_VERSION, flags, len(pts)), pts.tobytes()]
    if cloud.rings is not None:
        parts.append(np.asarray(cloud.rings, dtype="<i4").tobytes())
    if cloud.timestamps is not None:
        parts.append(np.asarray(cloud.timestamps, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_cloud(data: bytes) -> PointCloud:
    if len(data) < _HEADER.size:
        raise ParseError("truncated cloud header", len(data))
    magic, version, flags, count = _HEADER.unpack_from(data)
    if magic != CLOUD_MAGIC:
        raise ParseError("not a point cloud file (bad magic)", 0)
    if version > CLOUD_VERSION:
        raise ParseError(f"cloud version {version} is newer than supported {CLOUD_VERSION}", 4)
    if flags & ~3:
        raise ParseError(f"unknown cloud flags {flags:#x}", 6)
    need = _HEADER.size + count * 12 + (count * 4 if flags & 1 else 0) + (count * 8 if flags & 2 else 0)
    if len(data) != need:
        raise ParseError(f"cloud payload is {len(data)} bytes, header implies {need}", min(len(data), need))
    off = _HEADER.size
    pts = np.frombuffer(data, dtype="<f4", count=count * 3, offset=off).reshape(-1, 3)
    off += count * 12
    rings = ts = None
    if flags & 1:
        rings = np.frombuffer(data, dtype="<i4", count=count, offset=off).astype(np.int64)
        off += count * 4
    if flags & 2:
        ts = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
    try:
        return PointCloud(pts.astype(float), rings, ts)
    except ValueError as exc:
        raise ParseError(str(exc), _HEADER.size) from exc


def save_cloud(cloud: PointCloud, path):
    """Write a cloud; ``.txt`` paths use the text variant.  Coordinates are stored as float32."""
    if str(path).endswith(".txt"):
        _write_bytes(path, _encode_cloud_text(cloud).encode())
    else:
        _write_bytes(path, encode_cloud(cloud))


def load_cloud(path) -> PointCloud:
    data = _read_bytes(path)
    if str(path).endswith(".txt"):
        return _decode_cloud_text(data.decode(errors="replace"))
    return decode_cloud(data)


def _encode_cloud_text(cloud: PointCloud) -> str:
    pts = np.asarray(cloud.points, dtype=np.float32).reshape(-1, 3)
    flags = (1 if cloud.rings is not None else 0) | (2 if cloud.timestamps is not None else 0)
    lines = [f"# boardcalib-cloud {CLOUD_VERSION} {len(pts)} {flags}"]
    for i, p in enumerate(pts):
        # 9 significant digits round-trip any float32
        row = [f"{float(v):.9g}" for v in p]
        if cloud.rings is not None:
            row.append(str(int(cloud.rings[i])))
        if cloud.timestamps is not None:
            row.append(repr(float(cloud.timestamps[i])))
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def _decode_cloud_text(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty text cloud (line 1)", 1)
    head = lines[0].split()
    if len(head) != 5 or head[:2] != ["#", "boardcalib-cloud"]:
        raise ParseError("bad text cloud header (line 1)", 1)
    try:
        version, count, flags = int(head[2]), int(head[3]), int(head[4])
    except ValueError as exc:
        raise ParseError("bad text cloud header (line 1)", 1) from exc
    if version > CLOUD_VERSION:
        raise ParseError(f"cloud version {version} is newer than supported {CLOUD_VERSION}", 1)
    width = 3 + (1 if flags & 1 else 0) + (1 if flags & 2 else 0)
    body = lines[1:]
    if len(body) != count:
        raise ParseError(f"expected {count} points, found {len(body)} (line {len(lines) + 1})", len(lines) + 1)
    pts = np.empty((count, 3), dtype=np.float32)
    rings = np.empty(count, dtype=np.int64) if flags & 1 else None
    ts = np.empty(count) if flags & 2 else None
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != width:
            raise ParseError(f"expected {width} fields (line {i + 2})", i + 2)
        try:
            pts[i] = [np.float32(v) for v in parts[:3]]
            k = 3
            if rings is not None:
                rings[i] = int(parts[k])
                k += 1
            if ts is not None:
                ts[i] = float(parts[k])
        except ValueError as exc:
            raise ParseError(f"bad number (line {i + 2})", i + 2) from exc
    return PointCloud(pts.astype(float), rings, ts)


# ---------------------------------------------------------------- detections


def detections_to_dict(detections, frame: int, timestamp: float, cam: PinholeCamera) -> dict:
    return {
        "format": "boardcalib-detections",
        "version": DETECTIONS_VERSION,
        "frame": int(frame),
        "timestamp_s": float(timestamp),
        "image_size_px": [cam.width, cam.height],
        "corner_order": CORNER_ORDER,
        "targets": [
            {"target_id": int(d.target_id), "corners_px": np.asarray(d.corners, dtype=float).tolist()}
            for d in detections
        ],
    }


def save_detections(path, detections, frame: int, timestamp: float, cam: PinholeCamera):
    write_json(path, detections_to_dict(detections, frame, timestamp, cam))


def parse_detections(doc, cam: PinholeCamera | None = None) -> tuple[list[CameraDetection], float]:
    """Validate a detection document; returns the detections and the frame timestamp."""
    if not isinstance(doc, dict):
        raise SchemaError("<root>", "detection document must be an object")
    if doc.get("format") != "boardcalib-detections":
        raise SchemaError("format", "expected 'boardcalib-detections'")
    _check_version(doc.get("version"), DETECTIONS_VERSION, "detections")
    if doc.get("corner_order", CORNER_ORDER) != CORNER_ORDER:
        raise SchemaError("corner_order", f"must be {CORNER_ORDER}")
    size = doc.get("image_size_px")
    if size is None and cam is not None:
        size = [cam.width, cam.height]
    if size is not None and (not isinstance(size, list) or len(size) != 2):
        raise SchemaError("image_size_px", "must be [width, height]")
    ts = doc.get("timestamp_s", 0.0)
    if not isinstance(ts, (int, float)) or isinstance(ts, bool):
        raise SchemaError("timestamp_s", "must be a number")
    targets = doc.get("targets")
    if not isinstance(targets, list):
        raise SchemaError("targets", "must be a list")
    out, seen = [], set()
    for k, t in enumerate(targets):
        where = f"targets[{k}]"
        if not isinstance(t, dict):
            raise SchemaError(where, "must be an object")
        tid = t.get("target_id")
        if tid is None:
            raise SchemaError(f"{where}.target_id", "missing")
        if not isinstance(tid, int) or isinstance(tid, bool) or tid < 0:
            raise SchemaError(f"{where}.target_id", "must be a non-negative integer")
        if tid in seen:
            raise SchemaError(f"{where}.target_id", f"duplicate id {tid}")
        seen.add(tid)
        corners = t.get("corners_px")
        if corners is None:
            raise SchemaError(f"{where}.corners_px", "missing")
        try:
            arr = np.array(corners, dtype=float)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{where}.corners_px", "must be numbers") from exc
        if arr.shape != (4, 2) or not np.all(np.isfinite(arr)):
            raise SchemaError(f"{where}.corners_px", "must be four finite [u, v] pairs")
        if size is not None:
            w, h = size
            if np.any(arr[:, 0] < 0) or np.any(arr[:, 0] >= w) or np.any(arr[:, 1] < 0) or np.any(arr[:, 1] >= h):
                raise SchemaError(f"{where}.corners_px", "corner outside the image bounds")
        out.append(CameraDetection(tid, arr))
    return out, float(ts)


def load_detections(path, cam: PinholeCamera | None = None) -> list[CameraDetection]:
    return parse_detections(read_json(path), cam)[0]


# ---------------------------------------------------------------- transforms


def transform_to_dict(t: RigidTransform) -> dict:
    e = np.degrees(rotation_to_euler(t.rotation))
    return {
        "matrix": t.as_matrix().tolist(),
        "euler_deg": {"roll_deg": float(e[0]), "pitch_deg": float(e[1]), "yaw_deg": float(e[2])},
        "translation_m": t.translation.tolist(),
    }


def transform_from_dict(d, field: str = "transform") -> RigidTransform:
    """Accepts ``matrix`` (4x4) or ``euler_deg`` + ``translation_m``."""
    from .geom import euler_to_matrix

    if not isinstance(d, dict):
        raise SchemaError(field, "must be an object")
    try:
        if "matrix" in d:
            m = np.array(d["matrix"], dtype=float)
            if m.shape != (4, 4):
                raise SchemaError(f"{field}.matrix", "must be 4x4")
            return RigidTransform.from_matrix(m)
        e = d["euler_deg"]
        if isinstance(e, dict):
            e = [e["roll_deg"], e["pitch_deg"], e["yaw_deg"]]
        r = euler_to_matrix(*np.radians(np.array(e, dtype=float)))
        return RigidTransform(r, np.array(d.get("translation_m", [0, 0, 0]), dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(field, f"invalid transform: {exc}") from exc


# ---------------------------------------------------------------- dataset


class Dataset:
    """A loaded dataset directory: manifest, sensor profile and lazily read frames."""

    def __init__(self, root, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        prof = manifest["sensor_profile"]
        self.camera = PinholeCamera.from_dict(prof["camera"])
        self.geometry = RangeImageGeometry.from_dict(prof["range_image"])
        self.board = BoardModel.from_dict(prof["board"])
        self.frames = manifest["frames"]

    def __len__(self):
        return len(self.frames)

    def pair(self, k: int) -> FramePair:
        f = self.frames[k]
        cloud = load_cloud(self.root / f["cloud"])
        dets, ts = parse_detections(read_json(self.root / f["detections"]), self.camera)
        return FramePair(ts, cloud, dets, index=int(f["index"]))

    def pairs(self):
        for k in range(len(self)):
            yield self.pair(k)

    @property
    def has_truth(self) -> bool:
        return bool(self.manifest.get("truth"))

    def truth(self) -> dict:
        if not self.has_truth:
            raise IoFailure(f"dataset {self.root} has no ground truth")
        doc = read_json(self.root / self.manifest["truth"])
        if doc.get("format") != "boardcalib-truth":
            raise SchemaError("format", "expected 'boardcalib-truth'")
        _check_version(doc.get("version"), TRUTH_VERSION, "truth")
        return doc

    def labels(self, k: int) -> np.ndarray:
        name = self.truth_frames()[k]["labels"]
        try:
            return np.load(self.root / name)
        except OSError as exc:
            raise IoFailure(f"cannot read labels {name}: {exc}") from exc

    def truth_frames(self) -> list:
        if not hasattr(self, "_truth_frames"):
            self._truth_frames = self.truth()["frames"]
        return self._truth_frames

    def true_extrinsic(self) -> RigidTransform:
        return transform_from_dict(self.truth()["extrinsic"], "extrinsic")

    def nominal_extrinsic(self) -> RigidTransform | None:
        """Coarse design-time extrinsic recorded with the dataset, if any."""
        d = self.manifest.get("scenario", {}).get("nominal_extrinsic")
        return None if d is None else transform_from_dict(d, "scenario.nominal_extrinsic")


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise IoFailure(f"no manifest.json in {root}")
    m = read_json(path)
    if m.get("format") != "boardcalib-dataset":
        raise SchemaError("format", "expected 'boardcalib-dataset'")
    _check_version(m.get("version"), DATASET_VERSION, "dataset")
    for key in ("sensor_profile", "frames"):
        if key not in m:
            raise SchemaError(key, "missing")
    for k, f in enumerate(m["frames"]):
        for key in ("index", "cloud", "detections"):
            if key not in f:
                raise SchemaError(f"frames[{k}].{key}", "missing")
        for key in ("cloud", "detections"):
            if not (root / f[key]).exists():
                raise IoFailure(f"frames[{k}].{key}: {f[key]} does not exist")
    if m.get("truth") and not (root / m["truth"]).exists():
        raise IoFailure(f"truth file {m['truth']} does not exist")
    try:
        return Dataset(root, m)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError("sensor_profile", str(exc)) from exc


def generate_dataset(cfg, out_dir, frames=None, scenario: dict | None = None) -> Path:
    """Simulate ``cfg`` and write frames, truth and manifest under ``out_dir``."""
    from .sim import simulate

    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
        (out / "truth").mkdir(exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    board = cfg.boards[0].model if cfg.boards else BoardModel()
    entries, truth_frames = [], []
    for pair, truth in simulate(cfg, frames):
        i = pair.index
        cloud_name = f"frames/{i:06d}.bin"
        det_name = f"frames/{i:06d}.json"
        lab_name = f"truth/labels_{i:06d}.npy"
        save_cloud(pair.cloud, out / cloud_name)
        save_detections(out / det_name, pair.detections, i, pair.timestamp, cfg.camera)
        try:
            with open(out / lab_name, "wb") as fh:
                np.save(fh, truth.labels.astype(np.int32))
        except OSError as exc:
            raise IoFailure(f"cannot write labels: {exc}") from exc
        entries.append({"index": i, "timestamp_s": pair.timestamp, "cloud": cloud_name, "detections": det_name})
        truth_frames.append({
            "index": i,
            "labels": lab_name,
            "board_ids": [int(b) for b in truth.board_ids],
            "vertices_lidar_m": {str(k): v.tolist() for k, v in truth.vertices_lidar.items()},
            "corners_px": {str(k): v.tolist() for k, v in truth.corners_px.items()},
            "board_to_camera": {str(k): v.as_matrix().tolist() for k, v in truth.board_to_camera.items()},
        })
    write_json(out / "truth.json", {
        "format": "boardcalib-truth",
        "version": TRUTH_VERSION,
        "extrinsic": transform_to_dict(cfg.extrinsic),
        "labels_legend": {"ground": -1, "clutter": -2, "board": "index >= 0"},
        "frames": truth_frames,
    })
    write_json(out / "manifest.json", {
        "format": "boardcalib-dataset",
        "version": DATASET_VERSION,
        "sensor_profile": {
            "camera": cfg.camera.to_dict(),
            "range_image": cfg.pattern.range_image_geometry().to_dict(),
            "scan_pattern": cfg.pattern.to_dict(),
            "board": board.to_dict(),
        },
        "scenario": scenario or {"seed": cfg.seed},
        "frames": entries,
        "truth": "truth.json",
    })
    return out


# ---------------------------------------------------------------- reports


def result_to_dict(result) -> dict:
    return {
        "method": result.method,
        "extrinsic": transform_to_dict(result.extrinsic),
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "targets": int(result.n_targets),
        "initial_cost": float(result.initial_cost),
        "final_cost": float(result.final_cost),
        "frames": [
            {"index": int(f), "projection_error_px": float(r)} for f, r in zip(result.frames, result.residuals)
        ],
    }


def build_report(output, detection_stats: dict | None = None) -> dict:
    """Report document for a :class:`~boardcalib.pipeline.PipelineOutput`."""
    primary = output.primary
    doc = {
        "format": "boardcalib-report",
        "version": REPORT_VERSION,
        "method": primary.method,
        "extrinsic": transform_to_dict(primary.extrinsic),
        "coarse_extrinsic": transform_to_dict(output.coarse),
        "converged": bool(primary.converged),
        "timings_ms": {k: float(output.timings_ms.get(k, 0.0)) for k in STAGES},
        "results": {k: result_to_dict(r) for k, r in output.results.items()},
    }
    if output.search is not None:
        doc["grid_search"] = {
            "score": int(output.search.score),
            "perturbation_deg": np.degrees(output.search.candidates.perturbations[output.search.index]).tolist(),
            "candidates": len(output.search.candidates),
        }
    if detection_stats is not None:
        doc["detection"] = detection_stats
    return doc


def write_report(doc: dict, out_dir) -> Path:
    """Write ``report.json`` plus ``per_frame.csv`` into an existing directory."""
    out = Path(out_dir)
    if not out.is_dir():
        raise IoFailure(f"output directory {out} does not exist")
    for key in STAGES:
        if key not in doc.get("timings_ms", {}):
            raise IoFailure(f"report lacks stage timing {key}")
    write_json(out / "report.json", doc)
    rows = []
    for method, res in doc.get("results", {}).items():
        for f in res["frames"]:
            rows.append([method, f["index"], f["projection_error_px"]])
    write_csv(out / "per_frame.csv", ["method", "frame", "projection_error_px"], rows)
    return out / "report.json"


def read_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    doc = read_json(path)
    if doc.get("format") != "boardcalib-report":
        raise SchemaError("format", "expected 'boardcalib-report'")
    _check_version(doc.get("version"), REPORT_VERSION, "report")
    return doc


def payload_digest(doc: dict) -> str:
    """SHA-256 of a report without its wall-clock timings."""
    clean = {k: v for k, v in doc.items() if k != "timings_ms"}
    return hashlib.sha256(dump_json(clean).encode()).hexdigest()


def write_csv(path, header, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def directory_digest(root) -> str:
    """SHA-256 over relative paths and bytes of every file below ``root``."""
    h = hashlib.sha256()
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(_read_bytes(p))
    return h.hexdigest()
