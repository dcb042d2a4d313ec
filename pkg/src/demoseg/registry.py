"""Stage 1: canonical scene objects from multi-frame detections.

Detections on a handful of evenly spaced frames are filtered by class-agnostic
objectness, grouped within each frame by box overlap (different names for the
same thing), and matched across frames. Each resulting object keeps its most
confidently detected name as canonical and the rest as synonyms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import LabelError
from .numerics import Box, iou
from .stream import Episode, RawDetection

__all__ = [
    "ObjectProperties",
    "ObjectEntry",
    "ObjectRegistry",
    "sample_query_frames",
    "group_cooccurring",
    "consensus_names",
    "filter_objectness",
    "combine_alignment",
    "assign_properties",
    "build_registry",
    "properties_prompt",
    "save_registry",
    "load_registry",
]


@dataclass(frozen=True)
class ObjectProperties:
    movable: bool = True
    is_container: bool = False
    states: Tuple[str, ...] = ()
    interactable: bool = True


@dataclass(frozen=True)
class ObjectEntry:
    object_id: int
    canonical_name: str
    synonyms: Tuple[str, ...] = ()
    color: str = ""
    properties: ObjectProperties = field(default_factory=ObjectProperties)
    is_surface: bool = False
    representative_confidence: float = 0.0

    @property
    def names(self) -> Tuple[str, ...]:
        return (self.canonical_name,) + self.synonyms


@dataclass(frozen=True)
class ObjectRegistry:
    entries: Tuple[ObjectEntry, ...]
    surface_id: Optional[int] = None

    def __post_init__(self):
        seen = set()
        for i, e in enumerate(self.entries):
            if e.object_id != i:
                raise ValueError("object ids must be dense from 0")
            for n in e.names:
                if n in seen:
                    raise ValueError(f"object name {n!r} used twice in the registry")
                seen.add(n)
            if e.is_surface and e.properties.movable:
                raise ValueError("surface entries cannot be movable")
        surfaces = [e.object_id for e in self.entries if e.is_surface]
        if len(surfaces) > 1 or (surfaces[:1] or [None])[0] != self.surface_id:
            raise ValueError("surface_id must name the single surface entry")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, object_id: int) -> ObjectEntry:
        return self.entries[object_id]

    def name_index(self) -> Dict[str, int]:
        return {n: e.object_id for e in self.entries for n in e.names}

    def lookup(self, name: str) -> Optional[ObjectEntry]:
        idx = self.name_index().get(name)
        return None if idx is None else self.entries[idx]

    @property
    def surface(self) -> Optional[ObjectEntry]:
        return None if self.surface_id is None else self.entries[self.surface_id]


# --------------------------------------------------------------------------


def sample_query_frames(ep: Episode, n: int = 8) -> List[int]:
    """``n`` evenly spaced frame indices, first and last frame included."""
    if n < 1:
        raise ValueError("n must be >= 1")
    count = len(ep.frames)
    if n == 1:
        positions = [0]
    else:
        step = (count - 1) / (n - 1)
        positions = [int(np.floor(i * step + 0.5)) for i in range(n)]
    seen = []
    for p in positions:
        if p not in seen:
            seen.append(p)
    return [ep.frames[p].frame_index for p in seen]


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        lo, hi = min(ra, rb), max(ra, rb)
        self.parent[hi] = lo
        return True

    def groups(self, n):
        out: Dict[int, List[int]] = {}
        for i in range(n):
            out.setdefault(self.find(i), []).append(i)
        return sorted(out.values(), key=lambda g: g[0])


def _group_frame(dets: Sequence[RawDetection], iou_thresh: float) -> List[List[int]]:
    uf = _UnionFind(len(dets))
    for i in range(len(dets)):
        for j in range(i + 1, len(dets)):
            if iou(dets[i].box, dets[j].box) >= iou_thresh:
                uf.union(i, j)
    return uf.groups(len(dets))


def group_cooccurring(dets: Sequence[Sequence[RawDetection]], iou_thresh: float = 0.5):
    """Single-linkage grouping of each frame's detections by box IOU."""
    return [_group_frame(frame_dets, iou_thresh) for frame_dets in dets]


def combine_alignment(detector_conf: float, alignment: Optional[float] = None) -> float:
    if alignment is None:
        return detector_conf
    return (detector_conf + alignment) / 2.0


def filter_objectness(
    dets: Sequence[RawDetection],
    objectness_boxes: Optional[Sequence[Tuple[Box, float]]],
    min_iou: float = 0.5,
    floor: float = 0.1,
) -> List[RawDetection]:
    """Keep detections backed by a class-agnostic box (IOU >= min_iou, objectness >= floor)."""
    if objectness_boxes is None:
        return list(dets)
    kept = []
    for d in dets:
        for box, score in objectness_boxes:
            if score >= floor and iou(d.box, box) >= min_iou:
                kept.append(d)
                break
    return kept


@dataclass
class _FrameGroup:
    frame: int
    members: List[Tuple[str, float, Box]]

    @property
    def names(self):
        return {m[0] for m in self.members}

    def median_box(self) -> Box:
        arr = np.array([m[2].as_tuple() for m in self.members])
        return Box(*np.median(arr, axis=0))


def consensus_names(
    frames: Sequence[Tuple[Sequence[RawDetection], Sequence[Sequence[int]]]],
    match_iou: float = 0.5,
    surface_name: Optional[str] = None,
    colors: Optional[Dict[str, str]] = None,
) -> ObjectRegistry:
    """Match per-frame groups across frames and pick canonical names.

    ``frames`` holds ``(detections, groups)`` per query frame. Groups sharing a
    name merge first, then groups whose median boxes overlap by ``match_iou``,
    in both cases only if the object would not end up with two groups of
    the same frame. A name left in several objects stays with the one that
    saw it most often.
    """
    nodes: List[_FrameGroup] = []
    for fi, (dets, groups) in enumerate(frames):
        for g in groups:
            members = [
                (dets[i].name, combine_alignment(dets[i].confidence, dets[i].alignment), dets[i].box)
                for i in g
            ]
            if members:
                nodes.append(_FrameGroup(fi, members))
    uf = _UnionFind(len(nodes))
    frame_sets: Dict[int, set] = {}

    def frames_of(root):
        if root not in frame_sets:
            frame_sets[root] = {nodes[i].frame for i in range(len(nodes)) if uf.find(i) == root}
        return frame_sets[root]

    def merge(a, b) -> bool:
        ra, rb = uf.find(a), uf.find(b)
        if ra == rb:
            return True
        # one object never holds two groups of the same frame; a transient
        # overlap of two objects must not fuse their names for good
        if frames_of(ra) & frames_of(rb):
            return False
        uf.union(ra, rb)
        frame_sets.pop(ra, None)
        frame_sets.pop(rb, None)
        return True

    by_name: Dict[str, List[int]] = {}
    for k, node in enumerate(nodes):
        for name in sorted(node.names):
            by_name.setdefault(name, []).append(k)
    for name in sorted(by_name):
        ks = by_name[name]
        for k in ks[1:]:
            merge(ks[0], k)

    medians = [n.median_box() for n in nodes]
    pairs = []
    for a in range(len(nodes)):
        for b in range(a + 1, len(nodes)):
            if nodes[a].frame == nodes[b].frame:
                continue
            v = iou(medians[a], medians[b])
            if v >= match_iou:
                pairs.append((-v, a, b))
    for _, a, b in sorted(pairs):
        merge(a, b)

    groups = uf.groups(len(nodes))
    per_cluster: List[Dict[str, List[float]]] = []
    for idx in groups:
        scores: Dict[str, List[float]] = {}
        for k in idx:
            for name, conf, _ in nodes[k].members:
                scores.setdefault(name, []).append(conf)
        per_cluster.append(scores)
    # a name seen in several clusters stays only where it was seen most
    owner: Dict[str, int] = {}
    for name in sorted(by_name):
        holders = [ci for ci, sc in enumerate(per_cluster) if name in sc]
        owner[name] = min(holders, key=lambda ci: (-len(per_cluster[ci][name]),
                                                   -float(np.mean(per_cluster[ci][name])), ci))
    clusters = []
    for ci, scores in enumerate(per_cluster):
        kept = {n: v for n, v in scores.items() if owner[n] == ci}
        if not kept:
            continue
        ranked = sorted(kept, key=lambda n: (-float(np.mean(kept[n])), n))
        clusters.append((ranked, float(np.mean(kept[ranked[0]]))))

    colors = colors or {}
    surface_idx = None
    if surface_name is not None:
        for ci, (ranked, _) in enumerate(clusters):
            if surface_name in ranked:
                surface_idx = ci
    order = sorted(range(len(clusters)), key=lambda ci: (ci != surface_idx, clusters[ci][0][0]))
    entries = []
    for oid, ci in enumerate(order):
        ranked, conf = clusters[ci]
        color = next((colors[n] for n in ranked if n in colors), "")
        is_surface = ci == surface_idx
        entries.append(
            ObjectEntry(
                object_id=oid,
                canonical_name=ranked[0],
                synonyms=tuple(ranked[1:]),
                color=color,
                properties=ObjectProperties(movable=not is_surface),
                is_surface=is_surface,
                representative_confidence=conf,
            )
        )
    return ObjectRegistry(tuple(entries), 0 if surface_idx is not None else None)


def build_registry(
    ep: Episode,
    n_frames: int = 8,
    iou_thresh: float = 0.5,
    match_iou: float = 0.5,
    objectness_iou: float = 0.5,
    objectness_floor: float = 0.1,
) -> ObjectRegistry:
    """Object names, synonyms and the support surface (properties left at defaults)."""
    wanted = set(sample_query_frames(ep, n_frames))
    frames = []
    surface_name = None
    colors: Dict[str, str] = {}
    for fr in ep.frames:
        if fr.frame_index not in wanted:
            continue
        dets = filter_objectness(fr.detections, fr.objectness_boxes, objectness_iou, objectness_floor)
        groups = _group_frame(dets, iou_thresh)
        frames.append((dets, groups))
        if fr.vlm_proposals:
            # the first proposal names the surface the objects rest on
            if surface_name is None:
                surface_name = fr.vlm_proposals[0][0]
            for name, color in fr.vlm_proposals:
                colors.setdefault(name, color)
    return consensus_names(frames, match_iou, surface_name, colors)


# --------------------------------------------------------------------------
# properties

PROPERTIES_HEADER = "Assign physical properties to the objects a robot observed."
PROPERTIES_TEMPLATE = (
    PROPERTIES_HEADER
    + "\nFor every object decide whether it is movable, whether it is a container, which discrete"
    " states it can be in (for example open and closed), and whether a robot can interact with it."
    "\nAnswer with one JSON object mapping each object name to its properties, for example:"
    '\n{"drawer": {"movable": false, "is_container": true, "states": ["open", "closed"],'
    ' "interactable": true}}'
    "\nObjects: [OBJECT_LIST]"
)


def properties_prompt(registry: ObjectRegistry) -> str:
    return PROPERTIES_TEMPLATE.replace(
        "[OBJECT_LIST]", ", ".join(e.canonical_name for e in registry.entries)
    )


def _parse_properties(raw: str, names: Sequence[str]) -> Dict[str, ObjectProperties]:
    start, end = raw.find("{"), raw.rfind("}")
    if start < 0 or end < start:
        raise LabelError("no JSON object in property reply", raw=raw)
    try:
        data = json.loads(raw[start : end + 1])
    except json.JSONDecodeError as exc:
        raise LabelError(f"unparseable property reply: {exc.msg}", raw=raw) from None
    out = {}
    for name in names:
        item = data.get(name) if isinstance(data, dict) else None
        if not isinstance(item, dict):
            raise LabelError(f"property reply lacks object {name!r}", raw=raw)
        try:
            flags = [item[k] for k in ("movable", "is_container", "interactable")]
            states = item.get("states", [])
        except KeyError as exc:
            raise LabelError(f"property {exc} missing for {name!r}", raw=raw) from None
        if not all(isinstance(f, bool) for f in flags) or not isinstance(states, list) or not all(
            isinstance(s, str) for s in states
        ):
            raise LabelError(f"property types invalid for {name!r}", raw=raw)
        out[name] = ObjectProperties(flags[0], flags[1], tuple(states), flags[2])
    return out


def assign_properties(registry: ObjectRegistry, llm) -> ObjectRegistry:
    """Fill movable / is_container / states / interactable from one LLM call."""
    if not len(registry):
        raise ValueError("registry is empty")
    raw = llm.complete(properties_prompt(registry))
    props = _parse_properties(raw, [e.canonical_name for e in registry.entries])
    entries = []
    for e in registry.entries:
        p = props[e.canonical_name]
        if e.is_surface:
            p = replace(p, movable=False)
        entries.append(replace(e, properties=p))
    return ObjectRegistry(tuple(entries), registry.surface_id)


# --------------------------------------------------------------------------
# text file: one entry per line, tab separated

REGISTRY_COLUMNS = (
    "object_id", "canonical_name", "synonyms", "color", "movable", "is_container", "states",
    "interactable", "is_surface",
)


def _b(v: bool) -> str:
    return "true" if v else "false"


def save_registry(registry: ObjectRegistry, path) -> None:
    lines = ["# " + "\t".join(REGISTRY_COLUMNS)]
    for e in registry.entries:
        p = e.properties
        lines.append("\t".join([
            str(e.object_id), e.canonical_name, ";".join(e.synonyms), e.color, _b(p.movable),
            _b(p.is_container), ";".join(p.states), _b(p.interactable), _b(e.is_surface),
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_registry(path) -> ObjectRegistry:
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != len(REGISTRY_COLUMNS):
            raise ValueError(f"registry line has {len(cols)} columns: {line!r}")
        oid, name, syn, color, mov, cont, states, inter, surf = cols
        entries.append(ObjectEntry(
            int(oid), name, tuple(s for s in syn.split(";") if s), color,
            ObjectProperties(mov == "true", cont == "true", tuple(s for s in states.split(";") if s),
                             inter == "true"),
            surf == "true",
        ))
    surface = next((e.object_id for e in entries if e.is_surface), None)
    return ObjectRegistry(tuple(entries), surface)
