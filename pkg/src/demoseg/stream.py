"""Perception-stream data model and its on-disk format.

An episode is stored as a line-delimited JSON index plus two binary sidecars:

``episode.jsonl``
    line 1 is a header ``{"format", "episode_id", "image_size", "fps"}``;
    every further line is one frame record with the keys ``frame_index``,
    ``detections``, ``masks``, ``depth_ref``, ``flow``, ``gripper``,
    ``vlm_proposals``, ``state_scores``, ``objectness_boxes``. Absent or
    empty optional signals are omitted.
``episode.masks.bin``
    concatenated mask records: ``width u32, height u32, count u32`` then
    ``count`` run pairs ``(start u32, length u32)``, little-endian. Frame
    records point at a record with ``{"ref": <file name>, "offset": <bytes>}``.
``episode.depth.bin``
    concatenated depth records: ``width u32, height u32`` then
    ``width*height`` float32 values, little-endian, row-major. Identical maps
    are written once and shared.

``flow`` and ``state_scores`` are keyed by the detected object name.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import GeometryError, StreamError
from .numerics import Box, Mask

__all__ = [
    "RawDetection",
    "MaskRecord",
    "GripperRecord",
    "FrameRecord",
    "Episode",
    "load_episode",
    "save_episode",
    "validate_episode",
    "INDEX_NAME",
]

FORMAT_TAG = "demoseg-stream/1"
INDEX_NAME = "episode.jsonl"
FRAME_KEYS = (
    "frame_index",
    "detections",
    "masks",
    "depth_ref",
    "flow",
    "gripper",
    "vlm_proposals",
    "state_scores",
    "objectness_boxes",
)
_MASK_HEADER = struct.Struct("<III")
_DEPTH_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class RawDetection:
    name: str
    box: Box
    confidence: float
    # text-image alignment score; fused with the detector confidence when present
    alignment: Optional[float] = None


@dataclass(frozen=True)
class MaskRecord:
    mask: Mask
    detection: Optional[int] = None  # index into the frame's detections
    label: Optional[str] = None  # class-agnostic masks may carry a free label, e.g. "robot"


@dataclass(frozen=True)
class GripperRecord:
    closed: bool
    end_effector_box: Optional[Box] = None


@dataclass(eq=False)
class FrameRecord:
    frame_index: int
    detections: List[RawDetection] = field(default_factory=list)
    masks: List[MaskRecord] = field(default_factory=list)
    depth: Optional[np.ndarray] = None
    flow: Optional[Dict[str, float]] = None
    gripper: Optional[GripperRecord] = None
    vlm_proposals: Optional[List[Tuple[str, str]]] = None
    state_scores: Optional[Dict[str, Dict[str, float]]] = None
    objectness_boxes: Optional[List[Tuple[Box, float]]] = None

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        if (self.depth is None) != (other.depth is None):
            return False
        if self.depth is not None and not (
            self.depth.dtype == other.depth.dtype and np.array_equal(self.depth, other.depth)
        ):
            return False
        return (
            self.frame_index == other.frame_index
            and self.detections == other.detections
            and self.masks == other.masks
            and self.flow == other.flow
            and self.gripper == other.gripper
            and self.vlm_proposals == other.vlm_proposals
            and self.state_scores == other.state_scores
            and self.objectness_boxes == other.objectness_boxes
        )

    def masks_for(self, detection: int) -> List[Mask]:
        return [m.mask for m in self.masks if m.detection == detection]

    def labelled_mask(self, label: str) -> Optional[Mask]:
        for m in self.masks:
            if m.detection is None and m.label == label:
                return m.mask
        return None


@dataclass(eq=True)
class Episode:
    episode_id: str
    image_size: Tuple[int, int]
    frames: List[FrameRecord]
    fps: float = 30.0

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def diagonal(self) -> float:
        return math.hypot(*self.image_size)

    def __len__(self):
        return len(self.frames)


# --------------------------------------------------------------------------
# validation


def _check_score(value, what, frame_index, line):
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not 0.0 <= value <= 1.0:
        raise StreamError(f"{what} must be a score in [0,1], got {value!r}", line=line,
                          frame_index=frame_index, field=what)


def _check_box_bounds(box: Box, size, what, frame_index, line):
    w, h = size
    if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
        raise StreamError(f"{what} {box.as_tuple()} outside image {w}x{h}", line=line,
                          frame_index=frame_index, field=what)


def _validate_frame(fr: FrameRecord, size, line=None):
    fi = fr.frame_index
    if not isinstance(fi, int) or isinstance(fi, bool) or fi < 0:
        raise StreamError("frame_index must be a non-negative integer", line=line, field="frame_index")
    for det in fr.detections:
        _check_score(det.confidence, "detections.confidence", fi, line)
        if det.alignment is not None:
            _check_score(det.alignment, "detections.alignment", fi, line)
        _check_box_bounds(det.box, size, "detections.box", fi, line)
    for m in fr.masks:
        if (m.mask.width, m.mask.height) != tuple(size):
            raise StreamError("mask size differs from image size", line=line, frame_index=fi, field="masks")
        if m.detection is not None and not 0 <= m.detection < len(fr.detections):
            raise StreamError(f"mask references undeclared detection {m.detection}", line=line,
                              frame_index=fi, field="masks")
    if fr.depth is not None:
        if fr.depth.shape != (size[1], size[0]):
            raise StreamError("depth map size differs from image size", line=line, frame_index=fi,
                              field="depth_ref")
        if not np.isfinite(fr.depth).all() or fr.depth.min() < 0 or fr.depth.max() > 1:
            raise StreamError("depth values must lie in [0,1]", line=line, frame_index=fi, field="depth_ref")
    if fr.flow is not None:
        for name, v in fr.flow.items():
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise StreamError(f"flow for {name!r} must be a non-negative number", line=line,
                                  frame_index=fi, field="flow")
    if fr.state_scores is not None:
        for name, scores in fr.state_scores.items():
            for state, v in scores.items():
                _check_score(v, "state_scores", fi, line)
    if fr.objectness_boxes is not None:
        for box, score in fr.objectness_boxes:
            _check_score(score, "objectness_boxes", fi, line)
            _check_box_bounds(box, size, "objectness_boxes", fi, line)
    if fr.gripper is not None and fr.gripper.end_effector_box is not None:
        _check_box_bounds(fr.gripper.end_effector_box, size, "gripper.end_effector_box", fi, line)


def validate_episode(ep: Episode) -> None:
    """Raise :class:`StreamError` if any stream invariant is violated."""
    if not ep.frames:
        raise StreamError("episode has no frames", field="frames")
    w, h = ep.image_size
    if w <= 0 or h <= 0:
        raise StreamError("image_size must be positive", field="image_size")
    if not ep.fps > 0:
        raise StreamError("fps must be positive", field="fps")
    prev = -1
    for fr in ep.frames:
        _validate_frame(fr, ep.image_size)
        if fr.frame_index <= prev:
            raise StreamError("frame_index not increasing", frame_index=fr.frame_index, field="frame_index")
        prev = fr.frame_index


# --------------------------------------------------------------------------
# writing


def _box_list(box: Box):
    return [box.x1, box.y1, box.x2, box.y2]


class _SidecarWriter:
    def __init__(self, path: Path):
        self.path = path
        self.fh = open(path, "wb")
        self.offset = 0
        self.seen: Dict[bytes, int] = {}

    def write(self, payload: bytes) -> int:
        key = hashlib.sha1(payload).digest()
        if key in self.seen:
            return self.seen[key]
        off = self.offset
        self.fh.write(payload)
        self.offset += len(payload)
        self.seen[key] = off
        return off

    def close(self):
        self.fh.close()


def _mask_payload(m: Mask) -> bytes:
    runs = m.runs.astype("<u4")
    return _MASK_HEADER.pack(m.width, m.height, len(runs)) + runs.tobytes()


def _depth_payload(depth: np.ndarray) -> bytes:
    h, w = depth.shape
    return _DEPTH_HEADER.pack(w, h) + np.ascontiguousarray(depth, dtype="<f4").tobytes()


def _index_path(path) -> Path:
    path = Path(path)
    if path.suffix == ".jsonl":
        return path
    return path / INDEX_NAME


def save_episode(ep: Episode, path) -> Path:
    """Write ``ep`` and its sidecars; ``path`` is a directory or a ``.jsonl`` file."""
    validate_episode(ep)
    index = _index_path(path)
    stem = index.name[: -len(".jsonl")]
    mask_name, depth_name = f"{stem}.masks.bin", f"{stem}.depth.bin"
    try:
        index.parent.mkdir(parents=True, exist_ok=True)
        masks = _SidecarWriter(index.parent / mask_name)
        depths = _SidecarWriter(index.parent / depth_name)
        try:
            with open(index, "w", encoding="utf-8") as out:
                header = {"format": FORMAT_TAG, "episode_id": ep.episode_id,
                          "image_size": list(ep.image_size), "fps": ep.fps}
                out.write(json.dumps(header) + "\n")
                for fr in ep.frames:
                    out.write(json.dumps(_frame_to_json(fr, masks, depths, mask_name, depth_name)) + "\n")
        finally:
            masks.close()
            depths.close()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write episode to {index}: {exc.strerror}", str(index)) from exc
    return index


def _frame_to_json(fr, masks, depths, mask_name, depth_name):
    rec = {"frame_index": fr.frame_index}
    if fr.detections:
        dets = []
        for d in fr.detections:
            item = {"name": d.name, "box": _box_list(d.box), "confidence": d.confidence}
            if d.alignment is not None:
                item["alignment"] = d.alignment
            dets.append(item)
        rec["detections"] = dets
    if fr.masks:
        items = []
        for m in fr.masks:
            item = {"ref": mask_name, "offset": masks.write(_mask_payload(m.mask))}
            if m.detection is not None:
                item["detection"] = m.detection
            if m.label is not None:
                item["label"] = m.label
            items.append(item)
        rec["masks"] = items
    if fr.depth is not None:
        rec["depth_ref"] = {"ref": depth_name, "offset": depths.write(_depth_payload(fr.depth))}
    if fr.flow is not None:
        rec["flow"] = dict(fr.flow)
    if fr.gripper is not None:
        g = {"closed": fr.gripper.closed}
        if fr.gripper.end_effector_box is not None:
            g["end_effector_box"] = _box_list(fr.gripper.end_effector_box)
        rec["gripper"] = g
    if fr.vlm_proposals is not None:
        rec["vlm_proposals"] = [[n, c] for n, c in fr.vlm_proposals]
    if fr.state_scores is not None:
        rec["state_scores"] = {k: dict(v) for k, v in fr.state_scores.items()}
    if fr.objectness_boxes is not None:
        rec["objectness_boxes"] = [[_box_list(b), s] for b, s in fr.objectness_boxes]
    return rec


# --------------------------------------------------------------------------
# reading


class _SidecarReader:
    def __init__(self, base: Path):
        self.base = base
        self.cache: Dict[str, bytes] = {}

    def blob(self, ref: str) -> bytes:
        if ref not in self.cache:
            target = (self.base / ref).resolve()
            self.cache[ref] = target.read_bytes()
        return self.cache[ref]

    def mask(self, ref, offset) -> Mask:
        data = self.blob(ref)
        w, h, n = _MASK_HEADER.unpack_from(data, offset)
        start = offset + _MASK_HEADER.size
        runs = np.frombuffer(data, dtype="<u4", count=2 * n, offset=start).astype(np.int64)
        return Mask(w, h, runs.reshape(-1, 2))

    def depth(self, ref, offset) -> np.ndarray:
        data = self.blob(ref)
        w, h = _DEPTH_HEADER.unpack_from(data, offset)
        arr = np.frombuffer(data, dtype="<f4", count=w * h, offset=offset + _DEPTH_HEADER.size)
        return arr.astype(np.float32).reshape(h, w)


def _as_box(values, what, line, fi) -> Box:
    try:
        x1, y1, x2, y2 = (float(v) for v in values)
        return Box(x1, y1, x2, y2)
    except (TypeError, ValueError, GeometryError) as exc:
        raise StreamError(f"invalid {what}: {exc}", line=line, frame_index=fi, field=what) from None


def _frame_from_json(rec, sidecars: _SidecarReader, line) -> FrameRecord:
    if not isinstance(rec, dict):
        raise StreamError("frame record must be a JSON object", line=line)
    unknown = set(rec) - set(FRAME_KEYS)
    if unknown:
        raise StreamError(f"unknown keys {sorted(unknown)}", line=line)
    if "frame_index" not in rec:
        raise StreamError("missing frame_index", line=line, field="frame_index")
    fi = rec["frame_index"]
    try:
        dets = [
            RawDetection(
                str(d["name"]),
                _as_box(d["box"], "detections.box", line, fi),
                d["confidence"],
                d.get("alignment"),
            )
            for d in rec.get("detections", [])
        ]
        masks = [
            MaskRecord(sidecars.mask(m["ref"], int(m["offset"])), m.get("detection"), m.get("label"))
            for m in rec.get("masks", [])
        ]
        depth = None
        if "depth_ref" in rec:
            depth = sidecars.depth(rec["depth_ref"]["ref"], int(rec["depth_ref"]["offset"]))
        gripper = None
        if "gripper" in rec:
            g = rec["gripper"]
            if not isinstance(g.get("closed"), bool):
                raise StreamError("gripper.closed must be a boolean", line=line, frame_index=fi, field="gripper")
            eeb = g.get("end_effector_box")
            gripper = GripperRecord(g["closed"], None if eeb is None else
                                    _as_box(eeb, "gripper.end_effector_box", line, fi))
        proposals = None
        if "vlm_proposals" in rec:
            proposals = [(str(n), str(c)) for n, c in rec["vlm_proposals"]]
        objectness = None
        if "objectness_boxes" in rec:
            objectness = [(_as_box(b, "objectness_boxes", line, fi), s) for b, s in rec["objectness_boxes"]]
    except StreamError:
        raise
    except (KeyError, TypeError, ValueError, struct.error, OSError, GeometryError) as exc:
        raise StreamError(f"malformed frame record: {exc!r}", line=line, frame_index=fi) from None
    return FrameRecord(
        frame_index=fi,
        detections=dets,
        masks=masks,
        depth=depth,
        flow=rec.get("flow"),
        gripper=gripper,
        vlm_proposals=proposals,
        state_scores=rec.get("state_scores"),
        objectness_boxes=objectness,
    )


def load_episode(path) -> Episode:
    """Parse and validate an episode index file (or a directory holding one)."""
    index = _index_path(path)
    sidecars = _SidecarReader(index.parent)
    frames: List[FrameRecord] = []
    header = None
    prev = -1
    with open(index, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise StreamError(f"malformed line: {exc.msg}", line=lineno) from None
            if header is None:
                header = _parse_header(rec, lineno)
                continue
            fr = _frame_from_json(rec, sidecars, lineno)
            _validate_frame(fr, header["image_size"], line=lineno)
            if fr.frame_index <= prev:
                raise StreamError("frame_index not increasing", line=lineno, frame_index=fr.frame_index,
                                  field="frame_index")
            prev = fr.frame_index
            frames.append(fr)
    if header is None:
        raise StreamError("empty episode file", line=1)
    ep = Episode(header["episode_id"], header["image_size"], frames, header["fps"])
    if not frames:
        raise StreamError("episode has no frames", field="frames")
    return ep


def _parse_header(rec, lineno):
    if not isinstance(rec, dict) or "frame_index" in rec or "episode_id" not in rec:
        raise StreamError("first line must be the episode header", line=lineno)
    if rec.get("format", FORMAT_TAG) != FORMAT_TAG:
        raise StreamError(f"unsupported format {rec.get('format')!r}", line=lineno)
    try:
        w, h = (int(v) for v in rec["image_size"])
        fps = float(rec.get("fps", 30.0))
    except (KeyError, TypeError, ValueError):
        raise StreamError("header needs image_size [w, h] and numeric fps", line=lineno) from None
    if w <= 0 or h <= 0 or not fps > 0:
        raise StreamError("image_size and fps must be positive", line=lineno)
    return {"episode_id": str(rec["episode_id"]), "image_size": (w, h), "fps": fps}


def iter_episode_dirs(root) -> List[Path]:
    """Episode directories below ``root`` (those holding an index file), sorted."""
    root = Path(root)
    if (root / INDEX_NAME).exists():
        return [root]
    return sorted(p.parent for p in root.glob(f"*/{INDEX_NAME}"))
