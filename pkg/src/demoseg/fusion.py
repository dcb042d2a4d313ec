"""Stage 2a: per-object tracks with temporally robust boxes and clean masks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import Box, Mask, connected_components, dbscan
from .registry import ObjectRegistry, combine_alignment
from .stream import Episode

__all__ = [
    "StaticBox",
    "ObjectTrack",
    "refine_static_box",
    "clean_mask",
    "merge_same_class",
    "resolve_track_class",
    "build_tracks",
]


@dataclass(frozen=True)
class StaticBox:
    object_id: int
    box: Box
    support: int
    confidence: float


@dataclass
class ObjectTrack:
    object_id: int
    frame_indices: List[int]
    boxes: List[Optional[Box]]
    masks: List[Optional[Mask]]
    present: np.ndarray
    scores: List[Optional[float]]
    flow: List[Optional[float]]
    state_scores: List[Optional[Dict[str, float]]]
    class_history: Dict[str, List[float]] = field(default_factory=dict)
    static_box: Optional[StaticBox] = None

    def __len__(self):
        return len(self.frame_indices)

    @property
    def present_count(self) -> int:
        return int(self.present.sum())

    def present_positions(self) -> np.ndarray:
        return np.flatnonzero(self.present)


# MAD scaled to agree with the standard deviation of normal data
_MAD_SCALE = 1.4826
# sub-pixel deviations are never treated as outliers
_MAD_FLOOR = 0.5


def _median_outlier_keep(centers: np.ndarray, k: float) -> np.ndarray:
    med = np.median(centers, axis=0)
    dev = np.abs(centers - med)
    mad = np.maximum(_MAD_SCALE * np.median(dev, axis=0), _MAD_FLOOR)
    keep = np.all(dev <= k * mad, axis=1)
    return keep if keep.any() else np.ones(len(centers), dtype=bool)


def refine_static_box(
    boxes: Sequence[Tuple[Box, float]],
    diagonal: float,
    mad_k: float = 2.5,
    eps_frac: float = 0.05,
    min_pts: int = 2,
    object_id: int = -1,
) -> StaticBox:
    """Most representative box of a static object over time.

    Centre outliers (more than ``mad_k`` scaled MADs from the median centre on
    either axis) are dropped, the rest clustered with DBSCAN on ``(x1, y1, x2, y2)``;
    the cluster with the largest summed confidence is averaged.
    """
    if not boxes:
        raise ValueError("refine_static_box needs at least one box")
    # canonical order makes every float reduction independent of input order
    items = sorted(((b.as_tuple(), float(c)) for b, c in boxes))
    coords = np.array([t for t, _ in items], dtype=np.float64)
    confs = np.array([c for _, c in items])
    if len(items) == 1:
        return StaticBox(object_id, Box(*coords[0]), 1, float(confs[0]))
    centers = np.stack([(coords[:, 0] + coords[:, 2]) / 2, (coords[:, 1] + coords[:, 3]) / 2], axis=1)
    keep = _median_outlier_keep(centers, mad_k)
    coords, confs = coords[keep], confs[keep]
    if len(coords) == 1:
        return StaticBox(object_id, Box(*coords[0]), 1, float(confs[0]))
    labels = dbscan(coords, eps_frac * diagonal, min_pts)
    clusters = sorted(set(labels.tolist()) - {-1})
    if not clusters:
        best = min(range(len(coords)), key=lambda i: (-confs[i], tuple(coords[i])))
        return StaticBox(object_id, Box(*coords[best]), 1, float(confs[best]))

    def rank(c):
        idx = labels == c
        mean_box = tuple(coords[idx].mean(axis=0))
        return (-math.fsum(confs[idx]), -int(idx.sum()), mean_box)

    win = min(clusters, key=rank)
    idx = labels == win
    return StaticBox(object_id, Box(*coords[idx].mean(axis=0)), int(idx.sum()), float(confs[idx].mean()))


def clean_mask(m: Mask, min_area_frac: float = 0.2) -> Mask:
    """Drop 4-connected components smaller than ``min_area_frac`` of the largest one."""
    comps = connected_components(m)
    if len(comps) <= 1:
        return m
    floor = min_area_frac * comps[0][1]
    kept = [c for c, area in comps if area >= floor]
    if len(kept) == len(comps):
        return m
    out = kept[0]
    for c in kept[1:]:
        out = out.union(c)
    return out


def merge_same_class(masks: Sequence[Tuple[Mask, str]]) -> Dict[str, Mask]:
    out: Dict[str, Mask] = {}
    for m, cls in masks:
        out[cls] = m if cls not in out else out[cls].union(m)
    return out


def resolve_track_class(history: Dict[str, Sequence[float]]) -> Tuple[str, float]:
    """Class with the highest mean score over the frames it was seen in."""
    scored = [(n, float(np.mean(v))) for n, v in history.items() if len(v)]
    if not scored:
        raise ValueError("empty class history")
    return min(scored, key=lambda t: (-t[1], t[0]))


def build_tracks(
    ep: Episode,
    registry: ObjectRegistry,
    min_area_frac: float = 0.2,
    mad_k: float = 2.5,
    eps_frac: float = 0.05,
    min_pts: int = 2,
) -> List[ObjectTrack]:
    """Bind each frame's best matching detection to every registry entry."""
    names = registry.name_index()
    n = len(ep.frames)
    tracks = [
        ObjectTrack(
            object_id=e.object_id,
            frame_indices=[fr.frame_index for fr in ep.frames],
            boxes=[None] * n,
            masks=[None] * n,
            present=np.zeros(n, dtype=bool),
            scores=[None] * n,
            flow=[None] * n,
            state_scores=[None] * n,
        )
        for e in registry.entries
    ]
    for pos, fr in enumerate(ep.frames):
        best: Dict[int, Tuple[float, int]] = {}
        for di, det in enumerate(fr.detections):
            oid = names.get(det.name)
            if oid is None:
                continue
            score = combine_alignment(det.confidence, det.alignment)
            tracks[oid].class_history.setdefault(det.name, []).append(score)
            if oid not in best or score > best[oid][0]:
                best[oid] = (score, di)
        for oid, (score, di) in best.items():
            tr = tracks[oid]
            det = fr.detections[di]
            tr.present[pos] = True
            tr.boxes[pos] = det.box
            tr.scores[pos] = score
            frame_masks = fr.masks_for(di)
            if frame_masks:
                merged = frame_masks[0]
                for extra in frame_masks[1:]:
                    merged = merged.union(extra)
                tr.masks[pos] = clean_mask(merged, min_area_frac)
        for tr in tracks:
            entry = registry.entries[tr.object_id]
            bound = fr.detections[best[tr.object_id][1]].name if tr.object_id in best else None
            lookup = ([bound] if bound else []) + list(entry.names)
            if fr.flow:
                tr.flow[pos] = next((fr.flow[k] for k in lookup if k in fr.flow), None)
            if fr.state_scores:
                tr.state_scores[pos] = next((fr.state_scores[k] for k in lookup if k in fr.state_scores), None)
    diag = ep.diagonal
    for tr in tracks:
        entry = registry.entries[tr.object_id]
        if entry.properties.movable or not tr.present.any():
            continue
        pairs = [(tr.boxes[p], tr.scores[p]) for p in tr.present_positions()]
        tr.static_box = refine_static_box(pairs, diag, mad_k, eps_frac, min_pts, tr.object_id)
        tr.boxes = [tr.static_box.box] * n
    return tracks
