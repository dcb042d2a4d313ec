"""Run configuration: one YAML file with nested sections, validated against a schema.

Precedence is command-line flag > config file > built-in default. Unknown
sections or keys are rejected, and every effective value ends up in the run
manifest.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

import yaml

from .errors import ConfigError
from .signals import HEURISTICS

__all__ = ["Config", "SCHEMA", "load_config", "parse_override"]

Check = Callable[[Any], bool]


def _num(lo=-math.inf, hi=math.inf, lo_open=False, hi_open=False) -> Tuple[Check, str]:
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            return False
        return (v > lo if lo_open else v >= lo) and (v < hi if hi_open else v <= hi)

    lb = "(" if lo_open else "["
    rb = ")" if hi_open else "]"
    return check, f"a number in {lb}{lo}, {hi}{rb}"


def _int(lo=0, hi=None) -> Tuple[Check, str]:
    def check(v):
        return isinstance(v, int) and not isinstance(v, bool) and v >= lo and (hi is None or v <= hi)

    return check, f"an integer >= {lo}" + (f" and <= {hi}" if hi is not None else "")


def _opt(inner: Tuple[Check, str]) -> Tuple[Check, str]:
    return (lambda v: v is None or inner[0](v)), inner[1] + " or null"


_BOOL = (lambda v: isinstance(v, bool), "true or false")
_STR = (lambda v: isinstance(v, str) and bool(v), "a non-empty string")
_OPT_STR = (lambda v: v is None or (isinstance(v, str) and bool(v)), "a string or null")
_UNIT = _num(0.0, 1.0)
_POS = _num(0.0, lo_open=True)


def _choice(*options) -> Tuple[Check, str]:
    return (lambda v: v in options), "one of " + ", ".join(map(str, options))


def _tolerances(v) -> bool:
    return isinstance(v, list) and len(v) > 0 and all(isinstance(e, int) and not isinstance(e, bool) and e >= 0
                                                      for e in v)


def _enables(v) -> bool:
    return isinstance(v, dict) and set(v) <= set(HEURISTICS) and all(isinstance(b, bool) for b in v.values())


def _weights(v) -> bool:
    return v is None or (isinstance(v, dict) and set(v) <= set(HEURISTICS) and all(
        isinstance(a, (int, float)) and not isinstance(a, bool) and a >= 0 for a in v.values())
        and abs(math.fsum(v.values()) - 1.0) <= 1e-9)


SCHEMA: Dict[str, Dict[str, Tuple[Any, Tuple[Check, str]]]] = {
    "stage1": {
        "query_frames": (8, _int(1)),
        "iou_thresh": (0.5, _UNIT),
        "match_iou": (0.5, _UNIT),
        "objectness_iou": (0.5, _UNIT),
        "objectness_floor": (0.1, _UNIT),
    },
    "fusion": {
        "min_area_frac": (0.2, _UNIT),
        "mad_k": (2.5, _POS),
        "eps_frac": (0.05, _POS),
        "min_pts": (2, _int(1)),
    },
    "geometry": {
        "focal_scale": (0.8, _POS),
        "fx": (None, _opt(_POS)),
        "fy": (None, _opt(_POS)),
        "cx": (None, _opt(_num())),
        "cy": (None, _opt(_num())),
        "stride": (2, _int(1)),
        "outlier_k": (8, _int(0)),
        "outlier_std": (2.0, _POS),
        "plane_inlier": (0.05, _POS),
        "depth_search": (5, _int(0)),
    },
    "signals": {
        "disp_thresh": (0.05, _num(0.0, 1.0, lo_open=True)),
        "flow_thresh": (2.0, _POS),
        "flow_min_frames": (3, _int(1)),
        "center_smoothing": (5, _int(1)),
        "graded_movement": (False, _BOOL),
        "tau_rel": (0.05, _num(0.0)),
        "neighbor_radius": (0.35, _POS),
        "overlap_min": (0.3, _UNIT),
        "inside_scale": (1.05, _num(1.0)),
        "gripper_base_thresh": (0.04, _POS),
        "gripper_ref_size": (0.1, _POS),
        "gripper_run": (3, _int(1)),
        "state_window": (5, _int(1)),
        "occlusion_iou": (0.15, _UNIT),
        "crop_padding": (0.1, _num(0.0)),
        "synonym_diversity": (False, _BOOL),
        "synonym_seed": (0, _int(0)),
    },
    "keystates": {
        "theta": (0.25, _UNIT),
        "window": (8, _int(0)),
        "enabled": ({h: True for h in HEURISTICS}, (_enables, "a map of heuristic name to true/false")),
        "weights": (None, (_weights, "null or a map of heuristic weights summing to 1")),
        "renormalize": ("enabled", _choice("enabled", "available")),
    },
    "labeler": {
        "min_conf": (6.0, _num(0.0, 10.0)),
        "noisy": (False, _BOOL),
        "boundary_slack": (8, _int(0)),
        "max_in_flight": (1, _int(1)),
    },
    "eval": {
        "tolerances": ([8, 16], (_tolerances, "a non-empty list of integers >= 0")),
        "task_length_factor": (None, _opt(_POS)),
    },
    "client": {
        "endpoint": ("http://localhost:8000/v1/chat", _STR),
        "model": ("default", _STR),
        "timeout": (60.0, _POS),
        "attempts": (3, _int(1)),
        "backoff": (1.0, _num(0.0)),
        "mock": (False, _BOOL),
        "mock_rules": (None, _OPT_STR),
    },
    "run": {
        "workers": (1, _int(1)),
    },
}


def _defaults() -> Dict[str, Dict[str, Any]]:
    return {sec: {k: copy.deepcopy(d) for k, (d, _) in keys.items()} for sec, keys in SCHEMA.items()}


class Config:
    """Validated nested configuration. ``cfg["signals"]["tau_rel"]`` style access."""

    def __init__(self, values: Optional[Mapping[str, Mapping[str, Any]]] = None):
        self._data = _defaults()
        if values:
            self.update(values)

    def update(self, values: Mapping[str, Mapping[str, Any]]) -> "Config":
        if not isinstance(values, Mapping):
            raise ConfigError("configuration must be a mapping of sections", key="")
        for sec, keys in values.items():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown config section {sec!r}", key=str(sec))
            if keys is None:
                continue
            if not isinstance(keys, Mapping):
                raise ConfigError(f"section {sec!r} must be a mapping", key=str(sec))
            for k, v in keys.items():
                self.set(f"{sec}.{k}", v)
        return self

    def set(self, dotted: str, value: Any) -> None:
        sec, _, key = dotted.partition(".")
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section {sec!r}", key=dotted)
        if key not in SCHEMA[sec]:
            raise ConfigError(f"unknown config key {dotted!r}", key=dotted)
        check, desc = SCHEMA[sec][key][1]
        if isinstance(value, int) and not isinstance(value, bool) and isinstance(SCHEMA[sec][key][0], float):
            value = float(value)
        if not check(value):
            raise ConfigError(f"{dotted} must be {desc}, got {value!r}", key=dotted)
        if sec == "keystates" and key == "enabled":
            merged = {h: True for h in HEURISTICS}
            merged.update(value)
            if not any(merged.values()):
                raise ConfigError("at least one heuristic must stay enabled", key=dotted)
            value = merged
        self._data[sec][key] = copy.deepcopy(value)

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self._data[section]

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self._data)

    def digest(self) -> str:
        blob = json.dumps(self._data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def min_conf(self) -> Optional[float]:
        return None if self["labeler"]["noisy"] else self["labeler"]["min_conf"]


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> Config:
    """Defaults, then the YAML file, then dotted ``overrides``."""
    cfg = Config()
    if path is not None:
        p = Path(path)
        try:
            data = yaml.safe_load(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}", key="") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {p} is not valid YAML: {exc}", key="") from None
        if data is not None:
            cfg.update(data)
    for dotted, value in (overrides or {}).items():
        cfg.set(dotted, value)
    return cfg


def parse_override(text: str) -> Tuple[str, Any]:
    """``section.key=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value", key=text)
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    return key.strip(), value
