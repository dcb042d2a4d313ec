"""End-to-end processing of one episode: registry, tracks, signals, keystates, labels."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .client import LabelClient
from .config import Config
from .fusion import build_tracks
from .keystates import Keystate, default_weights, detect_keystates, save_keystates
from .labeler import LabeledSegment, label_episode, save_labels
from .numerics import Intrinsics
from .registry import ObjectRegistry, assign_properties, build_registry, save_registry
from .signals import HEURISTICS, Signals, SignalParams, extract_signals, save_observations
from .stream import Episode

log = logging.getLogger(__name__)

__all__ = ["EpisodeResult", "signal_params", "heuristic_weights", "run_episode", "write_outputs",
           "client_from_config"]


@dataclass
class EpisodeResult:
    episode_id: str
    registry: ObjectRegistry
    signals: Signals
    keystates: List[Keystate]
    labels: List[LabeledSegment]
    weights: Dict[str, float]
    label_errors: List[Tuple[int, str]] = field(default_factory=list)


def signal_params(cfg: Config, image_size: Tuple[int, int]) -> SignalParams:
    g, s = cfg["geometry"], cfg["signals"]
    w, h = image_size
    base = Intrinsics.default(w, h, g["focal_scale"])
    intr = Intrinsics(
        g["fx"] if g["fx"] is not None else base.fx,
        g["fy"] if g["fy"] is not None else base.fy,
        g["cx"] if g["cx"] is not None else base.cx,
        g["cy"] if g["cy"] is not None else base.cy,
    )
    return SignalParams(
        disp_thresh=s["disp_thresh"],
        flow_thresh=s["flow_thresh"],
        flow_min_frames=s["flow_min_frames"],
        center_smoothing=s["center_smoothing"],
        graded_movement=s["graded_movement"],
        tau_rel=s["tau_rel"],
        neighbor_radius=s["neighbor_radius"],
        overlap_min=s["overlap_min"],
        inside_scale=s["inside_scale"],
        gripper_base_thresh=s["gripper_base_thresh"],
        gripper_ref_size=s["gripper_ref_size"],
        gripper_run=s["gripper_run"],
        state_window=s["state_window"],
        occlusion_iou=s["occlusion_iou"],
        crop_padding=s["crop_padding"],
        depth_search=g["depth_search"],
        synonym_diversity=s["synonym_diversity"],
        synonym_seed=s["synonym_seed"],
        stride=g["stride"],
        outlier_k=g["outlier_k"],
        outlier_std=g["outlier_std"],
        plane_inlier_dist=g["plane_inlier"],
        intrinsics=intr,
    )


def available_heuristics(registry: ObjectRegistry, signals: Signals) -> List[str]:
    out = ["object_movement", "relation_change"]
    if signals.notes.get("gripper_state"):
        out.append("gripper_close")
    if signals.notes.get("gripper_region"):
        out.append("gripper_near")
    if any(len(e.properties.states) >= 2 for e in registry.entries):
        out.append("state_change")
    return [h for h in HEURISTICS if h in out]


def heuristic_weights(cfg: Config, available: Optional[List[str]] = None) -> Dict[str, float]:
    ks = cfg["keystates"]
    if ks["weights"] is not None:
        return dict(ks["weights"])
    enabled = [h for h in HEURISTICS if ks["enabled"].get(h, True)]
    if ks["renormalize"] == "available" and available is not None:
        usable = [h for h in enabled if h in available]
        enabled = usable or enabled
    return default_weights(enabled)


def run_episode(ep: Episode, cfg: Config, client: LabelClient) -> EpisodeResult:
    st, fu = cfg["stage1"], cfg["fusion"]
    registry = build_registry(ep, st["query_frames"], st["iou_thresh"], st["match_iou"], st["objectness_iou"],
                              st["objectness_floor"])
    registry = assign_properties(registry, client)
    tracks = build_tracks(ep, registry, fu["min_area_frac"], fu["mad_k"], fu["eps_frac"], fu["min_pts"])
    enabled = {h: cfg["keystates"]["enabled"].get(h, True) for h in HEURISTICS}
    sig = extract_signals(ep, registry, tracks, signal_params(cfg, ep.image_size), enabled)
    weights = heuristic_weights(cfg, available_heuristics(registry, sig))
    ks = detect_keystates(sig.candidates, cfg["keystates"]["theta"], cfg["keystates"]["window"], weights=weights)
    first = ep.frames[0].frame_index if ep.frames else 0
    labels, errors = label_episode(sig.observations, ks, first, client, cfg.min_conf,
                                   cfg["labeler"]["boundary_slack"], cfg["labeler"]["max_in_flight"])
    return EpisodeResult(ep.episode_id, registry, sig, ks, labels, weights, errors)


def write_outputs(result: EpisodeResult, out_dir) -> Path:
    d = Path(out_dir) / result.episode_id
    d.mkdir(parents=True, exist_ok=True)
    save_registry(result.registry, d / "registry.tsv")
    save_observations(result.signals.observations, d / "observations.tsv")
    save_keystates(result.keystates, d / "keystates.tsv")
    save_labels(result.labels, d / "labels.tsv")
    return d


def client_from_config(cfg: Config, episode_dir: Optional[Path] = None) -> LabelClient:
    c = cfg["client"]
    if c["mock"]:
        from .synth import RuleClient

        rules_path = Path(c["mock_rules"]) if c["mock_rules"] else None
        if rules_path is None and episode_dir is not None:
            rules_path = Path(episode_dir) / "mock_rules.json"
        rules = {}
        if rules_path is not None and rules_path.is_file():
            rules = json.loads(rules_path.read_text(encoding="utf-8"))
        return RuleClient(rules)
    return LabelClient(c["endpoint"], c["model"], c["timeout"], c["attempts"], c["backoff"])
