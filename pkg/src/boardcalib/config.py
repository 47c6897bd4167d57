"""JSON run configuration: scenario section for ``simulate``, pipeline section for the solvers.

A config file is one object with optional ``scenario`` and ``pipeline``
members.  Unknown keys are rejected so that typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .camera import BoardModel
from .descriptor import DescriptorConfig
from .errors import SchemaError
from .evaluation import perturb
from .geom import RigidTransform
from .io import read_json, transform_from_dict
from .optimize import OptimizerSettings
from .pipeline import PipelineConfig
from .search import SearchConfig
from .sim import ScanPattern, ScenarioConfig, make_scenario, mechanical_pattern, mems_pattern

SCENARIO_KEYS = {
    "seed", "n_frames", "pattern", "n_boards", "distance", "board_height", "lateral_spread",
    "range_sigma", "pixel_sigma", "dropout", "clutter", "duration",
}
# ``init_error_deg`` sets how far the simulated "design" extrinsic is from the truth
SCENARIO_EXTRA = {"init_error_deg", "init_error_m"}


def load_config(path) -> dict:
    if path is None:
        return {}
    doc = read_json(Path(path))
    if not isinstance(doc, dict):
        raise SchemaError("config", "must be a JSON object")
    extra = set(doc) - {"scenario", "pipeline"}
    if extra:
        raise SchemaError("config", f"unknown sections {sorted(extra)}")
    return doc


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise SchemaError(where, "must be an object")
    extra = set(d) - set(allowed)
    if extra:
        raise SchemaError(where, f"unknown keys {sorted(extra)}")


def _build(cls, d, where, **fixed):
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(d, names, where)
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**kw, **fixed)
    except (TypeError, ValueError) as exc:
        raise SchemaError(where, str(exc)) from exc


def _pattern(spec) -> ScanPattern:
    if isinstance(spec, str):
        if spec not in ("mechanical", "mems"):
            raise SchemaError("scenario.pattern", f"unknown pattern {spec!r}")
        return mechanical_pattern() if spec == "mechanical" else mems_pattern()
    if not isinstance(spec, dict):
        raise SchemaError("scenario.pattern", "must be a name or an object")
    spec = dict(spec)
    kind = spec.pop("kind", "mechanical")
    if "max_range_m" in spec:
        spec["max_range"] = spec.pop("max_range_m")
    base = mechanical_pattern() if kind == "mechanical" else mems_pattern()
    try:
        return dataclasses.replace(base, **{k: tuple(v) if isinstance(v, list) else v for k, v in spec.items()})
    except (TypeError, ValueError) as exc:
        raise SchemaError("scenario.pattern", str(exc)) from exc


def scenario_from_dict(d: dict) -> ScenarioConfig:
    _check_keys(d, SCENARIO_KEYS | SCENARIO_EXTRA, "scenario")
    kw = {k: v for k, v in d.items() if k in SCENARIO_KEYS}
    if "pattern" in kw:
        kw["pattern"] = _pattern(kw["pattern"])
    for k in ("distance", "board_height"):
        if k in kw:
            kw[k] = tuple(float(v) for v in kw[k])
            if len(kw[k]) != 2 or kw[k][0] > kw[k][1]:
                raise SchemaError(f"scenario.{k}", "must be [low, high]")
    for k in ("range_sigma", "pixel_sigma", "dropout", "clutter"):
        if kw.get(k, 0) < 0:
            raise SchemaError(f"scenario.{k}", "must be non-negative")
    if kw.get("n_frames", 1) < 0 or kw.get("n_boards", 1) < 0:
        raise SchemaError("scenario", "n_frames and n_boards must be non-negative")
    try:
        return make_scenario(**kw)
    except (TypeError, ValueError) as exc:
        raise SchemaError("scenario", str(exc)) from exc


def nominal_extrinsic(cfg: ScenarioConfig, d: dict) -> RigidTransform:
    """The coarse "mechanical design" extrinsic handed to the pipeline for a simulated rig."""
    deg = float(d.get("init_error_deg", 3.0))
    trans = float(d.get("init_error_m", 0.02))
    rng = np.random.default_rng([cfg.seed, 104729])
    return perturb(cfg.extrinsic, rng, deg, trans)[0]


PIPELINE_NESTED = {"board", "search", "optimizer", "descriptor", "initial_extrinsic"}


def pipeline_from_dict(d: dict, initial: RigidTransform | None = None) -> PipelineConfig:
    """Build a :class:`PipelineConfig`; ``initial`` fills in a missing ``initial_extrinsic``."""
    names = {f.name for f in dataclasses.fields(PipelineConfig)}
    _check_keys(d, names, "pipeline")
    kw = {k: v for k, v in d.items() if k not in PIPELINE_NESTED}
    if "initial_extrinsic" in d:
        initial = transform_from_dict(d["initial_extrinsic"], "pipeline.initial_extrinsic")
    if initial is None:
        raise SchemaError("pipeline.initial_extrinsic", "missing and the dataset provides no nominal extrinsic")
    if "board" in d:
        kw["board"] = BoardModel.from_dict(d["board"])
    if "search" in d:
        kw["search"] = _build(SearchConfig, d["search"], "pipeline.search")
    if "optimizer" in d:
        opt = dict(d["optimizer"])
        if "rot_scale_deg" in opt:
            opt["rot_scale"] = float(np.radians(opt.pop("rot_scale_deg")))
        kw["optimizer"] = _build(OptimizerSettings, opt, "pipeline.optimizer")
    if "descriptor" in d:
        kw["descriptor"] = _build(DescriptorConfig, d["descriptor"], "pipeline.descriptor")
    try:
        return PipelineConfig(initial, **kw)
    except (TypeError, ValueError) as exc:
        raise SchemaError("pipeline", str(exc)) from exc
