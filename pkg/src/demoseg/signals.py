"""Stage 2b: object-centric signals and their templated observations.

Four signal families are monitored per object: movement and relation changes,
discrete state changes, gripper proximity, and gripper release. Each fired
signal yields a :class:`Candidate` for keystate scoring and one or more
:class:`Observation` sentences rendered through fixed templates.
"""
from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import GeometryError
from .fusion import ObjectTrack
from .numerics import (
    Box,
    Intrinsics,
    Mask,
    backproject,
    fit_plane,
    fit_quadrilateral,
    grid_cell,
    homography_from_corners,
    mask_iou,
    project_point,
)
from .registry import ObjectRegistry
from .stream import Episode, GripperRecord

__all__ = [
    "RELATIONS",
    "HEURISTICS",
    "MovementEvent",
    "StateEvent",
    "SurfaceFrame",
    "SceneGraph",
    "Observation",
    "Candidate",
    "SignalParams",
    "detect_movement",
    "surface_frame",
    "object_geometry",
    "build_relation_graph",
    "surface_grid_position",
    "detect_state_changes",
    "gripper_near_scan",
    "gripper_near_events",
    "gripper_close_events",
    "depth_scaled_distance",
    "render",
    "parse_observation",
    "extract_signals",
    "save_observations",
    "load_observations",
]

RELATIONS = ("left-of", "right-of", "in-front-of", "behind", "on-top-of", "below", "inside", "next-to")
INVERSE = {
    "left-of": "right-of",
    "right-of": "left-of",
    "in-front-of": "behind",
    "behind": "in-front-of",
    "on-top-of": "below",
    "below": "on-top-of",
}
HEURISTICS = ("gripper_close", "gripper_near", "object_movement", "relation_change", "state_change")
KINDS = ("movement", "relation_change", "state_change", "gripper_near", "gripper_close", "surface_position")

# 8-way direction words, counter-clockwise from +x with image y pointing down
DIRECTIONS = (
    "right",
    "backward and to the right",
    "backward",
    "backward and to the left",
    "left",
    "forward and to the left",
    "forward",
    "forward and to the right",
)
_RELATION_DIR = {"left-of": "left", "right-of": "right", "in-front-of": "front", "behind": "back"}


@dataclass(frozen=True)
class MovementEvent:
    object_id: int
    start_frame: int
    end_frame: int
    start_box: Box
    end_box: Box
    displacement: Tuple[float, float]
    direction: str
    source: str  # "displacement", "flow" or "both"
    confidence: float = 1.0


@dataclass(frozen=True)
class StateEvent:
    object_id: int
    frame_index: int
    from_state: str
    to_state: str

    def __post_init__(self):
        if self.from_state == self.to_state:
            raise ValueError("state event needs two different states")


@dataclass(frozen=True)
class SurfaceFrame:
    origin: np.ndarray
    up: np.ndarray
    front: np.ndarray
    right: np.ndarray


@dataclass
class SceneGraph:
    frame_index: int
    nodes: List[int]
    edges: List[Tuple[int, str, int]] = field(default_factory=list)

    def relations_of(self, subject: int):
        return {(r, o) for s, r, o in self.edges if s == subject}


@dataclass(frozen=True)
class Observation:
    frame_index: int
    object_id: int
    kind: str
    text: str
    confidence: float = 1.0


@dataclass(frozen=True)
class Candidate:
    object_id: int
    frame_index: int
    heuristic: str
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("heuristic confidence must lie in [0,1]")
        if self.heuristic not in HEURISTICS:
            raise ValueError(f"unknown heuristic {self.heuristic!r}")


@dataclass
class SignalParams:
    disp_thresh: float = 0.05
    flow_thresh: float = 2.0
    flow_min_frames: int = 3
    center_smoothing: int = 5
    graded_movement: bool = False
    tau_rel: float = 0.05
    neighbor_radius: float = 0.35
    overlap_min: float = 0.3
    inside_scale: float = 1.05
    gripper_base_thresh: float = 0.04
    gripper_ref_size: float = 0.1
    gripper_run: int = 3
    state_window: int = 5
    occlusion_iou: float = 0.15
    crop_padding: float = 0.1
    depth_search: int = 5
    synonym_diversity: bool = False
    synonym_seed: int = 0
    stride: int = 2
    outlier_k: int = 8
    outlier_std: float = 2.0
    plane_inlier_dist: float = 0.05
    intrinsics: Optional[Intrinsics] = None


# --------------------------------------------------------------------------
# movement


def _median_smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < window:
        return values.copy()
    half = window // 2
    out = np.empty_like(values)
    for i in range(len(values)):
        lo, hi = max(0, i - half), min(len(values), i + half + 1)
        out[i] = np.median(values[lo:hi], axis=0)
    return out


def direction_word(dx: float, dy: float) -> str:
    angle = math.atan2(-dy, dx)
    sector = int(math.floor((angle + math.pi / 8) / (math.pi / 4))) % 8
    return DIRECTIONS[sector]


def _merge_intervals(intervals):
    out = []
    for s, e, src in sorted(intervals):
        if out and s <= out[-1][1] + 1:
            ps, pe, psrc = out[-1]
            out[-1] = (ps, max(pe, e), psrc if psrc == src else "both")
        else:
            out.append((s, e, src))
    return out


def detect_movement(
    track: ObjectTrack,
    width: int,
    disp_thresh: float = 0.05,
    flow_thresh: float = 2.0,
    flow_min_frames: int = 3,
    smoothing: int = 5,
    graded: bool = False,
) -> List[MovementEvent]:
    """Movement intervals from box-centre displacement or sustained optical flow.

    The displacement path opens an interval when the (median smoothed) centre
    leaves its resting position by ``disp_thresh * width`` and closes it once
    the centre stays within half that distance over the next two observations.
    The flow path opens one for every run of at least ``flow_min_frames``
    consecutive observations with flow ``>= flow_thresh``.
    """
    pos = track.present_positions()
    if len(pos) < 2:
        return []
    centers = np.array([track.boxes[p].center for p in pos], dtype=np.float64)
    smooth = _median_smooth(centers, smoothing)
    d_thr = disp_thresh * width
    m = len(pos)

    def dist(i, j):
        return float(np.hypot(*(smooth[i] - smooth[j])))

    def rested(u):
        if u >= m - 1:
            return True
        return all(dist(u, v) < d_thr / 2 for v in range(u + 1, min(m, u + 3)))

    intervals = []
    anchor, i = 0, 1
    while i < m:
        if dist(i, anchor) >= d_thr:
            start = anchor
            for j in range(i - 1, anchor - 1, -1):
                if dist(j, anchor) < d_thr / 2:
                    start = j
                    break
            u = i
            while not rested(u):
                u += 1
            intervals.append((start, u, "displacement"))
            anchor, i = u, u + 1
        else:
            i += 1

    flow = [track.flow[p] for p in pos]
    run_start = None
    for k in range(m + 1):
        active = k < m and flow[k] is not None and flow[k] >= flow_thresh
        if active and run_start is None:
            run_start = k
        elif not active and run_start is not None:
            if k - run_start >= flow_min_frames:
                intervals.append((max(run_start - 1, 0), k - 1, "flow"))
            run_start = None

    events = []
    for s, e, src in _merge_intervals(intervals):
        dx, dy = smooth[e] - smooth[s]
        conf = 1.0
        if graded:
            conf = min(1.0, float(np.hypot(dx, dy)) / d_thr) if d_thr > 0 else 1.0
        events.append(
            MovementEvent(
                object_id=track.object_id,
                start_frame=track.frame_indices[pos[s]],
                end_frame=track.frame_indices[pos[e]],
                start_box=track.boxes[pos[s]],
                end_box=track.boxes[pos[e]],
                displacement=(float(dx), float(dy)),
                direction=direction_word(dx, dy),
                source=src,
                confidence=conf,
            )
        )
    return events


# --------------------------------------------------------------------------
# surface frame and geometry


def surface_frame(
    surface_mask: Optional[Mask],
    depth: Optional[np.ndarray],
    intrinsics: Intrinsics,
    stride: int = 2,
    outlier_k: int = 8,
    outlier_std: float = 2.0,
    inlier_dist: float = 0.05,
) -> SurfaceFrame:
    """Coordinate frame of the support surface: up = camera-facing normal.

    ``front`` is the camera's -z axis projected onto the surface (image up
    when the surface faces the camera head-on); ``right = up x front``.
    """
    if depth is None:
        raise GeometryError("depth required for the surface frame")
    if surface_mask is None or surface_mask.is_empty():
        raise GeometryError("surface mask required for the surface frame")
    cloud = backproject(depth, intrinsics, surface_mask, stride, outlier_k, outlier_std)
    if len(cloud) < 3:
        raise GeometryError("too few surface points")
    plane = fit_plane(cloud, inlier_dist)
    up = plane.normal
    toward_camera = np.array([0.0, 0.0, -1.0])
    front = toward_camera - (toward_camera @ up) * up
    if np.linalg.norm(front) < 1e-6:
        fallback = np.array([0.0, 1.0, 0.0])
        front = fallback - (fallback @ up) * up
    front = front / np.linalg.norm(front)
    right = np.cross(up, front)
    right = right / np.linalg.norm(right)
    return SurfaceFrame(cloud.points.mean(axis=0), up, front, right)


@dataclass
class ObjectGeometry:
    object_id: int
    box: Box
    centroid: Optional[np.ndarray] = None  # camera-frame point
    depth_span: Optional[Tuple[float, float]] = None
    median_depth: Optional[float] = None


def _region(mask: Optional[Mask], box: Box, width: int, height: int) -> Mask:
    if mask is not None and not mask.is_empty():
        return mask
    return Mask.from_rect(width, height, math.floor(box.x1), math.floor(box.y1), math.ceil(box.x2),
                          math.ceil(box.y2))


def object_geometry(
    object_id: int,
    box: Box,
    mask: Optional[Mask],
    depth: Optional[np.ndarray],
    intrinsics: Intrinsics,
    stride: int = 2,
    outlier_k: int = 8,
    outlier_std: float = 2.0,
) -> ObjectGeometry:
    if depth is None:
        return ObjectGeometry(object_id, box)
    h, w = depth.shape
    region = _region(mask, box, w, h)
    use_stride = stride if region.area >= 16 * stride * stride else 1
    cloud = backproject(depth, intrinsics, region, use_stride, outlier_k if region.area > 64 else 0,
                        outlier_std)
    if len(cloud) == 0:
        return ObjectGeometry(object_id, box)
    z = cloud.points[:, 2]
    return ObjectGeometry(object_id, box, cloud.points.mean(axis=0), (float(z.min()), float(z.max())),
                          float(np.median(z)))


def _overlap_ratio(a: Box, b: Box) -> float:
    inter = a.intersection_area(b)
    return inter / min(a.area, b.area) if inter > 0 else 0.0


def build_relation_graph(
    frame_index: int,
    objects: Sequence[ObjectGeometry],
    axes: Optional[SurfaceFrame],
    registry: ObjectRegistry,
    diagonal: float,
    tau_rel: float = 0.05,
    radius: float = 0.35,
    overlap_min: float = 0.3,
    inside_scale: float = 1.05,
) -> SceneGraph:
    """Pairwise spatial relations between objects of one frame.

    With depth and a surface frame, offsets are measured along the surface
    axes in camera units; otherwise along image axes in units of the image
    diagonal (and vertical relations are not available).
    """
    nodes = sorted(o.object_id for o in objects)
    edges = set()
    related = set()
    objs = sorted(objects, key=lambda o: o.object_id)
    for a in objs:
        for b in objs:
            if a.object_id == b.object_id:
                continue
            if a.centroid is not None and b.centroid is not None and axes is not None:
                off = a.centroid - b.centroid
                r, f, u = float(off @ axes.right), float(off @ axes.front), float(off @ axes.up)
                dist = float(np.linalg.norm(off))
            else:
                (ax, ay), (bx, by) = a.box.center, b.box.center
                r, f, u = (ax - bx) / diagonal, (ay - by) / diagonal, None
                dist = math.hypot(r, f)
            if dist > radius:
                continue
            rels = []
            container = registry.entries[b.object_id]
            if (
                container.properties.is_container
                and a.box.area < b.box.area
                and b.box.scaled(inside_scale).contains(a.box)
                and (
                    a.median_depth is None
                    or b.depth_span is None
                    or b.depth_span[0] <= a.median_depth <= b.depth_span[1]
                )
            ):
                rels.append("inside")
            if r > tau_rel:
                rels.append("right-of")
            elif r < -tau_rel:
                rels.append("left-of")
            if f > tau_rel:
                rels.append("in-front-of")
            elif f < -tau_rel:
                rels.append("behind")
            if u is not None and _overlap_ratio(a.box, b.box) >= overlap_min:
                if u > tau_rel:
                    rels.append("on-top-of")
                elif u < -tau_rel:
                    rels.append("below")
            for rel in rels:
                edges.add((a.object_id, rel, b.object_id))
            if rels:
                related.add(frozenset((a.object_id, b.object_id)))
    for a in objs:
        for b in objs:
            if a.object_id == b.object_id or frozenset((a.object_id, b.object_id)) in related:
                continue
            if a.centroid is not None and b.centroid is not None and axes is not None:
                dist = float(np.linalg.norm(a.centroid - b.centroid))
            else:
                (ax, ay), (bx, by) = a.box.center, b.box.center
                dist = math.hypot(ax - bx, ay - by) / diagonal
            if dist <= radius:
                edges.add((a.object_id, "next-to", b.object_id))
    return SceneGraph(frame_index, nodes, sorted(edges))


UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def surface_grid_position(box: Box, quad, homography: Optional[np.ndarray] = None) -> str:
    """3x3 cell of the box's bottom-centre point after rectifying the surface quad."""
    H = homography if homography is not None else homography_from_corners(quad, UNIT_SQUARE)
    # box edges sit on pixel boundaries; quad corners are pixel centres
    cx = (box.x1 + box.x2) / 2.0 - 0.5
    p = project_point(H, (cx, box.y2 - 0.5))
    return grid_cell(p)


# --------------------------------------------------------------------------
# states


def _crop_box(box: Box, padding: float, width: int, height: int) -> Tuple[int, int, int, int]:
    pw, ph = box.width * padding, box.height * padding
    return (
        max(0, math.floor(box.x1 - pw)),
        max(0, math.floor(box.y1 - ph)),
        min(width, math.ceil(box.x2 + pw)),
        min(height, math.ceil(box.y2 + ph)),
    )


def _majority(states: Sequence[str], fallback: str) -> str:
    counts: Dict[str, int] = {}
    for s in states:
        counts[s] = counts.get(s, 0) + 1
    top = max(counts.values())
    winners = [s for s, c in counts.items() if c == top]
    return fallback if len(winners) > 1 and fallback in winners else winners[0]


def detect_state_changes(
    track: ObjectTrack,
    states: Sequence[str],
    robot_masks: Sequence[Optional[Mask]],
    image_size: Tuple[int, int],
    window: int = 5,
    occlusion_iou: float = 0.15,
    padding: float = 0.1,
) -> List[StateEvent]:
    """State transitions from per-frame state scores.

    Frames where the robot mask overlaps the padded object crop by more than
    ``occlusion_iou`` are skipped; the remaining per-frame argmax states are
    smoothed by a centred majority vote over ``window`` observations.
    """
    if len(states) < 2:
        return []
    w, h = image_size
    seq: List[Tuple[int, str]] = []
    for pos, scores in enumerate(track.state_scores):
        box = track.boxes[pos]
        if not scores or box is None:
            continue
        usable = [s for s in states if s in scores]
        if len(usable) < 2:
            continue
        robot = robot_masks[pos] if pos < len(robot_masks) else None
        if robot is not None:
            crop = Mask.from_rect(w, h, *_crop_box(box, padding, w, h))
            if mask_iou(robot, crop) > occlusion_iou:
                continue
        state = max(usable, key=lambda s: (scores[s], -states.index(s)))
        seq.append((track.frame_indices[pos], state))
    if not seq:
        return []
    half = window // 2
    events = []
    prev = None
    for i in range(len(seq)):
        lo, hi = max(0, i - half), min(len(seq), i + half + 1)
        cur = _majority([s for _, s in seq[lo:hi]], prev if prev is not None else seq[i][1])
        if prev is not None and cur != prev:
            events.append(StateEvent(track.object_id, seq[i][0], prev, cur))
        prev = cur
    return events


# --------------------------------------------------------------------------
# gripper


def depth_scaled_distance(pixel_distance: float, object_depth: Optional[float],
                          gripper_depth: Optional[float]) -> float:
    """Inflate an image-plane distance by the ratio of the two median depths.

    Objects at a different depth than the gripper only look close in the
    image, so the farther-to-nearer ratio (>= 1) is applied.
    """
    if not object_depth or not gripper_depth or object_depth <= 0 or gripper_depth <= 0:
        return pixel_distance
    return pixel_distance * max(object_depth, gripper_depth) / min(object_depth, gripper_depth)


def gripper_threshold(box_area: float, diagonal: float, base: float = 0.04, ref: float = 0.1) -> float:
    """Per-object contact threshold in diagonal units, scaled by object size."""
    scale = math.sqrt(max(box_area, 0.0)) / (ref * diagonal)
    return base * min(max(scale, 0.5), 2.0)


def gripper_near_scan(distances: Sequence[Optional[float]], tau: float, run: int = 3) -> List[int]:
    """Positions where a below-threshold run reaches its ``run``-th frame."""
    hits, count = [], 0
    for i, d in enumerate(distances):
        if d is not None and not math.isnan(d) and d < tau:
            count += 1
            if count == run:
                hits.append(i)
        else:
            count = 0
    return hits


def gripper_close_events(records: Sequence[Optional[GripperRecord]]) -> List[int]:
    """Positions where a previously closed gripper is seen open."""
    out, last = [], None
    for i, g in enumerate(records):
        if g is None:
            continue
        if last is True and not g.closed:
            out.append(i)
        last = g.closed
    return out


def release_target(dist_tables: Dict[int, Sequence[Optional[float]]], thresholds: Dict[int, float],
                   pos: int) -> Optional[int]:
    """Object a release at ``pos`` belongs to.

    The object held longest, i.e. with the longest run of close frames ending
    at ``pos``, wins; then the nearest one; then the lower id. With nothing
    close, the nearest object is taken.
    """
    best = None
    for oid, dists in dist_tables.items():
        d = dists[pos]
        if d is None:
            continue
        tau = thresholds.get(oid, 0.0)
        run = 0
        q = pos
        while q >= 0 and dists[q] is not None and dists[q] < tau:
            run += 1
            q -= 1
        key = (0 if run else 1, -run, d, oid)
        if best is None or key < best:
            best = key
    return None if best is None else best[3]


def gripper_regions(ep: Episode) -> List[Optional[Mask]]:
    w, h = ep.image_size
    out = []
    for fr in ep.frames:
        m = fr.labelled_mask("gripper")
        if m is None and fr.gripper is not None and fr.gripper.end_effector_box is not None:
            m = _region(None, fr.gripper.end_effector_box, w, h)
        if m is None:
            m = fr.labelled_mask("robot")
        out.append(m)
    return out


def _median_depth(depth: Optional[np.ndarray], region: Mask) -> Optional[float]:
    if depth is None or region.is_empty():
        return None
    xs, ys = region.pixel_coords()
    return float(np.median(depth[ys, xs]))


def gripper_distances(
    track: ObjectTrack,
    grippers: Sequence[Optional[Mask]],
    depths: Sequence[Optional[np.ndarray]],
    image_size: Tuple[int, int],
) -> List[Optional[float]]:
    w, h = image_size
    diag = math.hypot(w, h)
    out: List[Optional[float]] = []
    for pos in range(len(track)):
        g = grippers[pos]
        box = track.boxes[pos]
        if g is None or g.is_empty() or box is None or not track.present[pos]:
            out.append(None)
            continue
        region = _region(track.masks[pos], box, w, h)
        sq = kernels.runs_min_sqdist(region.runs, g.runs, w)
        if sq < 0:
            out.append(None)
            continue
        d = math.sqrt(sq) / diag
        if depths[pos] is not None and d > 0:
            d = depth_scaled_distance(d, _median_depth(depths[pos], region), _median_depth(depths[pos], g))
        out.append(d)
    return out


def gripper_near_events(
    track: ObjectTrack,
    grippers: Sequence[Optional[Mask]],
    depths: Sequence[Optional[np.ndarray]],
    image_size: Tuple[int, int],
    base: float = 0.04,
    ref: float = 0.1,
    run: int = 3,
) -> List[int]:
    """Frame indices where the gripper has stayed close to the object for ``run`` frames."""
    pos = track.present_positions()
    if len(pos) == 0:
        return []
    areas = [track.boxes[p].area for p in pos]
    tau = gripper_threshold(float(np.median(areas)), math.hypot(*image_size), base, ref)
    dists = gripper_distances(track, grippers, depths, image_size)
    return [track.frame_indices[p] for p in gripper_near_scan(dists, tau, run)]


# --------------------------------------------------------------------------
# templates

TEMPLATES = {
    "moved_relative": "{obj} moved to the {dir} of {other}",
    "moved": "{obj} moved {dir}",
    "moved_cell": "{obj} moved from {cell0} to {cell1} of the {surface}",
    "state": "{obj} changed from {s1} to {s2}.",
    "gripper_near": "The gripper was close to {obj}",
    "gripper_release": "The gripper released {obj}",
    "relation": "{obj} is {relation} {other}",
}

_PATTERNS = [
    ("gripper_near", re.compile(r"^The gripper was close to (?P<obj>.+)$")),
    ("gripper_release", re.compile(r"^The gripper released (?P<obj>.+)$")),
    ("moved_cell", re.compile(
        r"^(?P<obj>.+?) moved from (?P<cell0>(?:top|center|bottom)(?: (?:left|center|right))?) to "
        r"(?P<cell1>(?:top|center|bottom)(?: (?:left|center|right))?) of the (?P<surface>.+)$")),
    ("moved_relative", re.compile(r"^(?P<obj>.+?) moved to the (?P<dir>left|right|front|back) of (?P<other>.+)$")),
    ("moved", re.compile(r"^(?P<obj>.+?) moved (?P<dir>" + "|".join(re.escape(d) for d in DIRECTIONS) + r")$")),
    ("state", re.compile(r"^(?P<obj>.+?) changed from (?P<s1>.+?) to (?P<s2>.+)\.$")),
    ("relation", re.compile(
        r"^(?P<obj>.+?) is (?P<relation>left of|right of|in front of|behind|on top of|below|inside|next to) "
        r"(?P<other>.+)$")),
]


def render(template: str, **fields) -> str:
    return TEMPLATES[template].format(**fields)


def parse_observation(text: str) -> Tuple[str, Dict[str, str]]:
    """Inverse of :func:`render`: template name and its fields."""
    for name, pat in _PATTERNS:
        m = pat.match(text)
        if m:
            return name, m.groupdict()
    raise ValueError(f"text matches no observation template: {text!r}")


def relation_words(rel: str) -> str:
    return rel.replace("-", " ")


# --------------------------------------------------------------------------
# orchestration


@dataclass
class Signals:
    observations: List[Observation]
    candidates: List[Candidate]
    movements: List[MovementEvent]
    states: List[StateEvent]
    graphs: Dict[int, SceneGraph]
    notes: Dict[str, object]


def _nearest_depth(ep: Episode, pos: int, search: int) -> Optional[np.ndarray]:
    for off in range(search + 1):
        for p in (pos - off, pos + off):
            if 0 <= p < len(ep.frames) and ep.frames[p].depth is not None:
                return ep.frames[p].depth
    return None


class _Namer:
    def __init__(self, registry: ObjectRegistry, diversity: bool, seed: int):
        self.registry = registry
        self.rng = random.Random(seed) if diversity else None

    def __call__(self, object_id: int) -> str:
        e = self.registry.entries[object_id]
        if self.rng is not None and e.synonyms:
            return self.rng.choice(e.names).lower()
        return e.canonical_name.lower()


def extract_signals(
    ep: Episode,
    registry: ObjectRegistry,
    tracks: Sequence[ObjectTrack],
    params: Optional[SignalParams] = None,
    enabled: Optional[Dict[str, bool]] = None,
) -> Signals:
    """Run every signal detector over an episode and render the observations."""
    p = params or SignalParams()
    enabled = enabled or {h: True for h in HEURISTICS}
    w, h = ep.image_size
    diag = ep.diagonal
    intr = p.intrinsics or Intrinsics.default(w, h)
    name = _Namer(registry, p.synonym_diversity, p.synonym_seed)
    index_of = {fr.frame_index: i for i, fr in enumerate(ep.frames)}
    obs: List[Observation] = []
    cands: List[Candidate] = []
    notes: Dict[str, object] = {}
    surface = registry.surface

    # surface frame and rectifying homography, from the first frame that allows it
    axes = None
    homography = None
    if surface is not None:
        strack = tracks[surface.object_id]
        for pos in strack.present_positions():
            smask = strack.masks[pos]
            depth = _nearest_depth(ep, pos, p.depth_search)
            if smask is None or smask.is_empty():
                continue
            try:
                if homography is None:
                    quad = fit_quadrilateral(smask)
                    homography = homography_from_corners(quad, UNIT_SQUARE)
                if axes is None and depth is not None:
                    axes = surface_frame(smask, depth, intr, p.stride, p.outlier_k, p.outlier_std,
                                         p.plane_inlier_dist)
            except GeometryError:
                continue
            if homography is not None and (axes is not None or depth is None):
                break
    notes["surface_frame"] = axes is not None
    notes["surface_grid"] = homography is not None

    depths_cache: Dict[int, Optional[np.ndarray]] = {}

    def depth_at(pos):
        if pos not in depths_cache:
            depths_cache[pos] = _nearest_depth(ep, pos, p.depth_search)
        return depths_cache[pos]

    non_surface = [t for t in tracks if surface is None or t.object_id != surface.object_id]

    def graph_at(pos) -> SceneGraph:
        geoms = []
        depth = depth_at(pos)
        for t in non_surface:
            if not t.present[pos]:
                continue
            geoms.append(object_geometry(t.object_id, t.boxes[pos], t.masks[pos], depth, intr, p.stride,
                                         p.outlier_k, p.outlier_std))
        return build_relation_graph(ep.frames[pos].frame_index, geoms, axes if depth is not None else None,
                                    registry, diag, p.tau_rel, p.neighbor_radius, p.overlap_min,
                                    p.inside_scale)

    graphs: Dict[int, SceneGraph] = {}

    def cached_graph(pos):
        fi = ep.frames[pos].frame_index
        if fi not in graphs:
            graphs[fi] = graph_at(pos)
        return graphs[fi]

    # movement, relation changes, surface cells
    movements: List[MovementEvent] = []
    for t in non_surface:
        entry = registry.entries[t.object_id]
        if not entry.properties.movable:
            continue
        for ev in detect_movement(t, w, p.disp_thresh, p.flow_thresh, p.flow_min_frames, p.center_smoothing,
                                  p.graded_movement):
            movements.append(ev)
            obj = name(t.object_id)
            if enabled.get("object_movement", True):
                cands.append(Candidate(t.object_id, ev.end_frame, "object_movement", ev.confidence))
            obs.append(Observation(ev.end_frame, t.object_id, "movement",
                                   render("moved", obj=obj, dir=ev.direction), ev.confidence))
            p0, p1 = index_of[ev.start_frame], index_of[ev.end_frame]
            if homography is not None:
                try:
                    c0 = surface_grid_position(ev.start_box, None, homography)
                    c1 = surface_grid_position(ev.end_box, None, homography)
                except GeometryError:
                    c0 = c1 = None
                if c0 is not None and c0 != c1:
                    obs.append(Observation(ev.end_frame, t.object_id, "surface_position",
                                           render("moved_cell", obj=obj, cell0=c0, cell1=c1,
                                                  surface=name(surface.object_id))))
            g0, g1 = cached_graph(p0), cached_graph(p1)
            new = sorted(g1.relations_of(t.object_id) - g0.relations_of(t.object_id), key=lambda x: (x[1], x[0]))
            if new:
                if enabled.get("relation_change", True):
                    cands.append(Candidate(t.object_id, ev.end_frame, "relation_change", 1.0))
                for rel, other in new:
                    if rel in _RELATION_DIR:
                        text = render("moved_relative", obj=obj, dir=_RELATION_DIR[rel], other=name(other))
                    else:
                        text = render("relation", obj=obj, relation=relation_words(rel), other=name(other))
                    obs.append(Observation(ev.end_frame, t.object_id, "relation_change", text))

    # state changes
    robot_masks = [fr.labelled_mask("robot") for fr in ep.frames]
    state_events: List[StateEvent] = []
    for t in tracks:
        entry = registry.entries[t.object_id]
        for ev in detect_state_changes(t, list(entry.properties.states), robot_masks, ep.image_size,
                                       p.state_window, p.occlusion_iou, p.crop_padding):
            state_events.append(ev)
            if enabled.get("state_change", True):
                cands.append(Candidate(t.object_id, ev.frame_index, "state_change", 1.0))
            obs.append(Observation(ev.frame_index, t.object_id, "state_change",
                                   render("state", obj=name(t.object_id), s1=ev.from_state, s2=ev.to_state)))

    # gripper proximity and release
    grippers = gripper_regions(ep)
    has_gripper = any(g is not None for g in grippers)
    has_gripper_state = any(fr.gripper is not None for fr in ep.frames)
    notes["gripper_region"] = has_gripper
    notes["gripper_state"] = has_gripper_state
    depths = [depth_at(i) if ep.frames[i].depth is not None else None for i in range(len(ep.frames))]
    dist_tables: Dict[int, List[Optional[float]]] = {}
    thresholds: Dict[int, float] = {}
    if has_gripper:
        for t in non_surface:
            dist_tables[t.object_id] = gripper_distances(t, grippers, depths, ep.image_size)
            pos = t.present_positions()
            if len(pos) == 0:
                continue
            tau = gripper_threshold(float(np.median([t.boxes[q].area for q in pos])), diag,
                                    p.gripper_base_thresh, p.gripper_ref_size)
            thresholds[t.object_id] = tau
            for q in gripper_near_scan(dist_tables[t.object_id], tau, p.gripper_run):
                fi = t.frame_indices[q]
                if enabled.get("gripper_near", True):
                    cands.append(Candidate(t.object_id, fi, "gripper_near", 1.0))
                obs.append(Observation(fi, t.object_id, "gripper_near",
                                       render("gripper_near", obj=name(t.object_id))))
    if has_gripper_state:
        for q in gripper_close_events([fr.gripper for fr in ep.frames]):
            oid = release_target(dist_tables, thresholds, q)
            if oid is None:
                continue
            fi = ep.frames[q].frame_index
            if enabled.get("gripper_close", True):
                cands.append(Candidate(oid, fi, "gripper_close", 1.0))
            obs.append(Observation(fi, oid, "gripper_close", render("gripper_release", obj=name(oid))))

    obs.sort(key=lambda o: (o.frame_index, o.object_id, o.kind))
    cands.sort(key=lambda c: (c.frame_index, c.object_id, c.heuristic))
    return Signals(obs, cands, movements, state_events, graphs, notes)


# --------------------------------------------------------------------------
# observation log file

OBS_COLUMNS = ("frame_index", "object_id", "kind", "confidence", "text")


def save_observations(observations: Sequence[Observation], path) -> None:
    lines = ["# " + "\t".join(OBS_COLUMNS)]
    for o in observations:
        lines.append(f"{o.frame_index}\t{o.object_id}\t{o.kind}\t{o.confidence!r}\t{o.text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_observations(path) -> List[Observation]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        fi, oid, kind, conf, text = line.split("\t", 4)
        out.append(Observation(int(fi), int(oid), kind, text, float(conf)))
    return out
