"""Deterministic synthetic episodes with exact ground truth.

A scene is a table (trapezoid in the image, planar in depth), one drawer
behind it and a handful of box-shaped objects on it. A gripper executes a
scripted task list; every task ends at a ground-truth keystate frame where
the gripper opens. The perception stream is rendered from that script, with
optional noise that never touches the ground truth.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .client import MockClient
from .keystates import Keystate, save_keystates
from .labeler import CHOICE_PROMPT, GRANULARITY_PROMPT, TASK_LIST_PROMPT, render_label_response
from .numerics import GRID_LABELS, Box, Intrinsics, Mask, homography_from_corners, project_point
from .registry import PROPERTIES_HEADER
from .stream import Episode, FrameRecord, GripperRecord, MaskRecord, RawDetection, save_episode

__all__ = [
    "ObjectSpec",
    "TaskSpec",
    "NoiseModel",
    "Script",
    "GroundTruth",
    "ScriptError",
    "random_script",
    "generate",
    "task_label",
    "mock_rules",
    "mock_label_rules",
    "RuleClient",
    "save_script",
    "load_script",
    "write_ground_truth",
    "load_ground_truth",
]

SCRIPT_TAG = "demoseg-script/1"
WIDTH, HEIGHT = 256, 192
# table corners in pixel-centre coordinates: TL, TR, BR, BL
TABLE_QUAD = ((40.0, 60.0), (215.0, 60.0), (245.0, 179.0), (10.0, 179.0))
TABLE_Z_FAR, TABLE_Z_NEAR = 0.9, 0.5
BACKGROUND_Z = 1.0
DRAWER_Z = 0.95
OBJECT_DZ = 0.02
DRAWER_BOX = (176, 18, 236, 50)
DRAWER_TRAVEL = 14
EE_SIZE = 16
ARM_WIDTH = 6
TAU_MARGIN = 0.08  # surface-frame units; keeps scripted relations clear of the 0.05 cutoff
MIN_TRAVEL = 32.0
PLACE_GAP = 20.0
KINDS = ("pick_place", "open", "close", "move_cell")
DIRS = ("left", "right", "front", "back")

OBJECT_POOL = (
    ("pot", "silver", ("cooking pot",)),
    ("fork", "grey", ("dinner fork",)),
    ("cup", "red", ("mug",)),
    ("banana", "yellow", ("plantain",)),
    ("sponge", "green", ("scrubber",)),
    ("bowl", "white", ("dish",)),
    ("spoon", "blue", ("ladle",)),
    ("carrot", "orange", ("root vegetable",)),
)


class ScriptError(ValueError):
    pass


@dataclass
class ObjectSpec:
    name: str
    color: str = "grey"
    synonyms: Tuple[str, ...] = ()
    size: Tuple[int, int] = (20, 20)
    position: Tuple[float, float] = (128.0, 120.0)  # bottom-centre (x, y) in pixels
    movable: bool = True
    is_container: bool = False
    states: Tuple[str, ...] = ()
    initial_state: Optional[str] = None


@dataclass
class TaskSpec:
    kind: str
    object: str
    start: int
    end: int  # ground-truth keystate frame
    ref: Optional[str] = None
    direction: Optional[str] = None
    cell: Optional[str] = None


@dataclass
class NoiseModel:
    jitter: float = 0.0
    dropout: float = 0.0
    synonym_rate: float = 0.0
    spurious_rate: float = 0.0

    @property
    def clean(self) -> bool:
        return not (self.jitter or self.dropout or self.synonym_rate or self.spurious_rate)


@dataclass
class Script:
    seed: int
    episode_id: str
    objects: List[ObjectSpec]
    tasks: List[TaskSpec]
    surface: str = "table"
    noise: NoiseModel = field(default_factory=NoiseModel)
    n_frames: Optional[int] = None
    fps: float = 30.0
    depth_stride: int = 1

    def object(self, name: str) -> ObjectSpec:
        for o in self.objects:
            if o.name == name:
                return o
        raise ScriptError(f"task references undeclared object {name!r}")

    @property
    def total_frames(self) -> int:
        if self.n_frames is not None:
            return self.n_frames
        return (self.tasks[-1].end if self.tasks else 0) + 12


@dataclass
class GroundTruth:
    episode_id: str
    keystates: List[int]
    tasks: List[str]
    objects: List[str]


# --------------------------------------------------------------------------
# scene geometry

_INTR = Intrinsics.default(WIDTH, HEIGHT)
_A = 1.0 / TABLE_Z_FAR
_B = (1.0 / TABLE_Z_NEAR - 1.0 / TABLE_Z_FAR) / (TABLE_QUAD[3][1] - TABLE_QUAD[0][1])
_UNIT = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))
_TO_IMAGE = homography_from_corners(_UNIT, TABLE_QUAD)
_TO_UNIT = homography_from_corners(TABLE_QUAD, _UNIT)


def table_depth(y: float) -> float:
    return 1.0 / (_A + _B * (y - TABLE_QUAD[0][1]))


def _table_span(y: int) -> Tuple[int, int]:
    (tlx, top), (trx, _), (brx, bottom), (blx, _) = TABLE_QUAD
    t = (y - top) / (bottom - top)
    xl, xr = tlx + t * (blx - tlx), trx + t * (brx - trx)
    return math.ceil(xl), math.floor(xr)


def _table_array() -> np.ndarray:
    arr = np.zeros((HEIGHT, WIDTH), dtype=bool)
    for y in range(int(TABLE_QUAD[0][1]), int(TABLE_QUAD[2][1]) + 1):
        a, b = _table_span(y)
        arr[y, a : b + 1] = True
    return arr


_TABLE = _table_array()


def _base_depth() -> np.ndarray:
    depth = np.full((HEIGHT, WIDTH), BACKGROUND_Z, dtype=np.float32)
    for y in range(HEIGHT):
        if _TABLE[y].any():
            depth[y, _TABLE[y]] = table_depth(y)
    return depth


_BASE_DEPTH = _base_depth()

# plane normal of the table in camera coordinates, and the in-plane "front" axis
_N = np.array([0.0, _B * _INTR.fy, _A + _B * (_INTR.cy - TABLE_QUAD[0][1])])
_N /= np.linalg.norm(_N)
if _N[2] > 0:
    _N = -_N
_FRONT = np.array([0.0, 0.0, -1.0]) - (-_N[2]) * _N
_FRONT /= np.linalg.norm(_FRONT)


def _rect(box: Tuple[float, float, float, float]) -> Tuple[int, int, int, int]:
    x1, y1, x2, y2 = box
    return (max(0, int(round(x1))), max(0, int(round(y1))), min(WIDTH, int(round(x2))),
            min(HEIGHT, int(round(y2))))


def object_box(pos: Tuple[float, float], size: Tuple[int, int]) -> Tuple[float, float, float, float]:
    cx, bottom = pos
    w, h = size
    return (cx - w / 2.0, bottom - h, cx + w / 2.0, bottom)


def _object_z(pos) -> float:
    return table_depth(int(round(pos[1])) - 1) - OBJECT_DZ


def _centroid(pos, size) -> np.ndarray:
    """Camera-frame centroid of an upright object standing at ``pos``."""
    x1, y1, x2, y2 = _rect(object_box(pos, size))
    z = _object_z(pos)
    u = (x1 + x2 - 1) / 2.0
    v = (y1 + y2 - 1) / 2.0
    return np.array([(u - _INTR.cx) * z / _INTR.fx, (v - _INTR.cy) * z / _INTR.fy, z])


def surface_offsets(pos_a, size_a, pos_b, size_b) -> Tuple[float, float]:
    """(right, front) offset of object a relative to b in table-frame units."""
    off = _centroid(pos_a, size_a) - _centroid(pos_b, size_b)
    return float(off[0]), float(off @ _FRONT)


def cell_of(pos) -> str:
    """3x3 table cell of a bottom-centre position (pixel-edge coordinates)."""
    p = project_point(_TO_UNIT, (pos[0] - 0.5, pos[1] - 0.5))
    x, y = min(max(p[0], 0.0), 1.0), min(max(p[1], 0.0), 1.0)
    return GRID_LABELS[(int(y >= 1 / 3) + int(y >= 2 / 3)) * 3 + int(x >= 1 / 3) + int(x >= 2 / 3)]


def _cell_margin(pos) -> float:
    p = project_point(_TO_UNIT, (pos[0] - 0.5, pos[1] - 0.5))
    return min(min(abs(c - t) for t in (1 / 3, 2 / 3)) for c in p)


def cell_position(cell: str) -> Tuple[float, float]:
    idx = GRID_LABELS.index(cell)
    row, col = divmod(idx, 3)
    p = project_point(_TO_IMAGE, ((col + 0.5) / 3, (row + 0.5) / 3))
    return float(round(p[0] + 0.5)), float(round(p[1] + 0.5))


def _on_table(pos, size) -> bool:
    x1, y1, x2, y2 = _rect(object_box(pos, size))
    if y1 < 0 or y2 > HEIGHT:
        return False
    row = y2 - 1
    if row < TABLE_QUAD[0][1] + 4 or row > TABLE_QUAD[2][1] - 2:
        return False
    a, b = _table_span(row)
    return x1 >= a + 3 and x2 - 1 <= b - 3


# objects stay out of the drawer's swing and the gripper's grasp zone below it
_DRAWER_ZONE = (DRAWER_BOX[0] - 24, 0, DRAWER_BOX[2] + 24, DRAWER_BOX[3] + DRAWER_TRAVEL + EE_SIZE + 16)


def _clear(pos, size, others: Dict[str, Tuple[Tuple[float, float], Tuple[int, int]]], gap: float = 10.0):
    ax1, ay1, ax2, ay2 = object_box(pos, size)
    zx1, zy1, zx2, zy2 = _DRAWER_ZONE
    if ax1 < zx2 and zx1 < ax2 and ay1 < zy2 and zy1 < ay2:
        return False
    for p, s in others.values():
        bx1, by1, bx2, by2 = object_box(p, s)
        if ax1 < bx2 + gap and bx1 < ax2 + gap and ay1 < by2 + gap and by1 < ay2 + gap:
            return False
    return True


# --------------------------------------------------------------------------
# random scripts


def _dir_offset(direction, ref_pos, ref_size, size, gap):
    if direction == "left":
        return (ref_pos[0] - (ref_size[0] + size[0]) / 2.0 - gap, ref_pos[1])
    if direction == "right":
        return (ref_pos[0] + (ref_size[0] + size[0]) / 2.0 + gap, ref_pos[1])
    if direction == "front":
        return (ref_pos[0], ref_pos[1] + size[1] + gap)
    return (ref_pos[0], ref_pos[1] - ref_size[1] - gap)


def _holds(direction, r, f, tau) -> bool:
    return {"left": r < -tau, "right": r > tau, "front": f > tau, "back": f < -tau}[direction]


def _excludes(direction, r, f) -> bool:
    """True when the relation certainly does not hold yet."""
    return {"left": r >= 0.0, "right": r <= 0.0, "front": f <= 0.0, "back": f >= 0.0}[direction]


def random_script(
    seed: int,
    n_tasks: int = 10,
    noise: Optional[NoiseModel] = None,
    n_objects: int = 4,
    episode_id: Optional[str] = None,
) -> Script:
    """A feasible random task sequence; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(OBJECT_POOL), size=n_objects, replace=False)
    objects = [
        ObjectSpec("drawer", "brown", ("cabinet drawer",), (DRAWER_BOX[2] - DRAWER_BOX[0],
                   DRAWER_BOX[3] - DRAWER_BOX[1]), ((DRAWER_BOX[0] + DRAWER_BOX[2]) / 2.0, float(DRAWER_BOX[3])),
                   movable=False, is_container=True, states=("open", "closed"), initial_state="closed")
    ]
    layout: Dict[str, Tuple[Tuple[float, float], Tuple[int, int]]] = {}
    for i in sorted(picks.tolist()):
        name, color, syn = OBJECT_POOL[i]
        size = (int(rng.integers(16, 27)), int(rng.integers(16, 27)))
        for _ in range(500):
            cell = GRID_LABELS[int(rng.integers(9))]
            cx, by = cell_position(cell)
            pos = (float(cx + rng.integers(-12, 13)), float(by + rng.integers(-6, 7)))
            if _on_table(pos, size) and _clear(pos, size, layout, 14.0):
                break
        else:
            raise ScriptError("could not place objects")
        layout[name] = (pos, size)
        objects.append(ObjectSpec(name, color, syn, size, pos))

    tasks: List[TaskSpec] = []
    drawer_open = False
    t = 4
    length = 24
    for _ in range(n_tasks):
        t += int(rng.integers(0, 7))
        start, end = t, t + length - 1
        first = int(rng.choice(3, p=[0.45, 0.3, 0.25]))
        task = None
        for k in (first, (first + 1) % 3, (first + 2) % 3):
            kind = ("pick_place", "move_cell", "drawer")[k]
            if kind == "drawer":
                task = TaskSpec("close" if drawer_open else "open", "drawer", start, end)
                drawer_open = not drawer_open
                break
            task = _plan_move(kind, layout, rng, start, end)
            if task is not None:
                break
        tasks.append(task)
        t = end + 1
    return Script(seed, episode_id or f"synth_{seed:04d}", objects, tasks, noise=noise or NoiseModel())


def _plan_move(kind, layout, rng, start, end) -> Optional[TaskSpec]:
    names = sorted(layout)
    combos = []
    if kind == "pick_place":
        for obj in names:
            for ref in names:
                if ref != obj:
                    for d in DIRS:
                        combos.append((obj, ref, d))
    else:
        for obj in names:
            for cell in GRID_LABELS:
                combos.append((obj, None, cell))
    for idx in rng.permutation(len(combos)):
        obj, ref, arg = combos[int(idx)]
        pos, size = layout[obj]
        others = {n: v for n, v in layout.items() if n != obj}
        if kind == "pick_place":
            rpos, rsize = layout[ref]
            r0, f0 = surface_offsets(pos, size, rpos, rsize)
            if not _excludes(arg, r0, f0):
                continue
            target = _dir_offset(arg, rpos, rsize, size, PLACE_GAP)
            r1, f1 = surface_offsets(target, size, rpos, rsize)
            if not _holds(arg, r1, f1, TAU_MARGIN):
                continue
        else:
            if cell_of(pos) == arg or _cell_margin(pos) < 0.04:
                continue
            target = cell_position(arg)
        target = (float(round(target[0])), float(round(target[1])))
        if math.dist(pos, target) < MIN_TRAVEL:
            continue
        if not (_on_table(target, size) and _clear(target, size, others)):
            continue
        layout[obj] = (target, size)
        if kind == "pick_place":
            return TaskSpec(kind, obj, start, end, ref=ref, direction=arg)
        return TaskSpec(kind, obj, start, end, cell=arg)
    return None


# --------------------------------------------------------------------------
# script validation and labels


def validate_script(script: Script) -> None:
    names = [o.name for o in script.objects]
    if len(set(names)) != len(names):
        raise ScriptError("duplicate object names")
    if script.surface in names:
        raise ScriptError("surface name clashes with an object")
    prev_end = -1
    for i, t in enumerate(script.tasks):
        if t.kind not in KINDS:
            raise ScriptError(f"task {i}: unknown kind {t.kind!r}")
        obj = script.object(t.object)
        if t.end - t.start + 1 < 8:
            raise ScriptError(f"task {i}: span shorter than 8 frames")
        if t.start <= prev_end:
            raise ScriptError(f"task {i}: span overlaps or precedes the previous task")
        prev_end = t.end
        if t.kind in ("open", "close"):
            if set(obj.states) != {"open", "closed"}:
                raise ScriptError(f"task {i}: {t.object} has no open/closed states")
        elif not obj.movable:
            raise ScriptError(f"task {i}: {t.object} is not movable")
        if t.kind == "pick_place":
            script.object(t.ref or "")
            if t.direction not in DIRS:
                raise ScriptError(f"task {i}: direction must be one of {DIRS}")
        if t.kind == "move_cell" and t.cell not in GRID_LABELS:
            raise ScriptError(f"task {i}: unknown cell {t.cell!r}")
    if script.tasks and script.total_frames <= script.tasks[-1].end:
        raise ScriptError("n_frames ends before the last task")


_DIR_WORDS = {"left": "to the left of", "right": "to the right of", "front": "in front of", "back": "behind"}


def task_label(task: TaskSpec, surface: str = "table") -> str:
    if task.kind == "open":
        return f"Open the {task.object}"
    if task.kind == "close":
        return f"Close the {task.object}"
    if task.kind == "pick_place":
        return f"Place the {task.object} {_DIR_WORDS[task.direction]} the {task.ref}"
    return f"Move the {task.object} to the {task.cell} of the {surface}"


def task_signature(task: TaskSpec, surface: str = "table") -> List[str]:
    """Substrings that must co-occur in one observation line for the task to match."""
    obj = task.object.lower()
    if task.kind == "open":
        return [f"{obj} changed from closed to open."]
    if task.kind == "close":
        return [f"{obj} changed from open to closed."]
    if task.kind == "pick_place":
        return [f"{obj} moved to the {task.direction} of {task.ref.lower()}"]
    return [f"{obj} moved from ", f" to {task.cell} of the {surface.lower()}"]


# --------------------------------------------------------------------------
# rendering


@dataclass
class _Frame:
    positions: Dict[str, Tuple[float, float]]
    drawer_extra: float
    drawer_state: str
    ee: Tuple[float, float]  # end-effector box centre
    closed: bool


def _grasp_point(script: Script, name: str, pos, extra: float) -> Tuple[float, float]:
    obj = script.object(name)
    if name == "drawer" or not obj.movable:
        x1, y1, x2, y2 = object_box(pos, obj.size)
        return ((x1 + x2) / 2.0, y2 + extra + EE_SIZE / 2.0 - 4)
    x1, y1, x2, y2 = object_box(pos, obj.size)
    return ((x1 + x2) / 2.0, y1 - 2.0)


def _simulate(script: Script) -> List[_Frame]:
    n = script.total_frames
    pos = {o.name: o.position for o in script.objects}
    drawer = next((o for o in script.objects if set(o.states) == {"open", "closed"}), None)
    state = drawer.initial_state if drawer else None
    extra = DRAWER_TRAVEL if state == "open" else 0.0
    ee = (128.0, 150.0)
    frames: List[Optional[_Frame]] = [None] * n
    t = 0
    for task in script.tasks:
        while t < task.start:
            frames[t] = _Frame(dict(pos), extra, state, ee, False)
            t += 1
        a = (task.end - task.start + 1) // 2
        grasp_at = task.start + a
        p0 = pos[task.object]
        g_target = _grasp_point(script, task.object, p0, extra)
        for k in range(a):
            s = (k + 1) / a
            frames[t] = _Frame(dict(pos), extra, state,
                               (ee[0] + s * (g_target[0] - ee[0]), ee[1] + s * (g_target[1] - ee[1])), False)
            t += 1
        steps = task.end - grasp_at
        if task.kind in ("open", "close"):
            e0 = extra
            e1 = DRAWER_TRAVEL if task.kind == "open" else 0.0
            for k in range(steps + 1):
                s = k / steps
                extra = e0 + s * (e1 - e0)
                cur_state = state if t < task.end else ("open" if task.kind == "open" else "closed")
                frames[t] = _Frame(dict(pos), extra, cur_state, _grasp_point(script, task.object, p0, extra),
                                   t < task.end)
                t += 1
            state = "open" if task.kind == "open" else "closed"
        else:
            p1 = _target(script, task, pos)
            for k in range(steps + 1):
                s = k / steps
                cur = (p0[0] + s * (p1[0] - p0[0]), p0[1] + s * (p1[1] - p0[1]))
                pos[task.object] = cur
                frames[t] = _Frame(dict(pos), extra, state, _grasp_point(script, task.object, cur, extra),
                                   t < task.end)
                t += 1
        ee = frames[t - 1].ee
    while t < n:
        frames[t] = _Frame(dict(pos), extra, state, ee, False)
        t += 1
    return frames  # type: ignore[return-value]


def _target(script: Script, task: TaskSpec, pos) -> Tuple[float, float]:
    obj = script.object(task.object)
    if task.kind == "move_cell":
        return cell_position(task.cell)
    ref = script.object(task.ref)
    rpos = pos[task.ref]
    target = _dir_offset(task.direction, rpos, ref.size, obj.size, PLACE_GAP)
    return float(round(target[0])), float(round(target[1]))


def _state_scores(state: str) -> Dict[str, float]:
    return {"open": 0.8, "closed": 0.2} if state == "open" else {"open": 0.2, "closed": 0.8}


def generate(script: Script) -> Tuple[Episode, GroundTruth]:
    """Render the perception stream and its ground truth; deterministic in the seed."""
    validate_script(script)
    rng = np.random.default_rng([script.seed, 7919])
    noise = script.noise
    sim = _simulate(script)
    n = len(sim)
    movable = [o for o in script.objects if o.movable]
    drawer = next((o for o in script.objects if set(o.states) == {"open", "closed"}), None)

    # spurious perturbations: gripper blips, flow bursts, state flicker
    blips, bursts, flickers = set(), {}, set()
    if noise.spurious_rate > 0:
        count = int(rng.binomial(3 * max(1, len(script.tasks)), noise.spurious_rate))
        for _ in range(count):
            kind = int(rng.integers(3))
            f = int(rng.integers(2, max(3, n - 6)))
            if kind == 0:
                blips.update({f, f + 1})
            elif kind == 1 and movable:
                name = movable[int(rng.integers(len(movable)))].name
                for k in range(4):
                    bursts[(name, f + k)] = 6.0
            elif drawer is not None:
                flickers.update({f, f + 1, f + 2})

    frames = []
    prev_pos = sim[0].positions
    for t, st in enumerate(sim):
        dets: List[RawDetection] = []
        masks: List[MaskRecord] = []
        flow: Dict[str, float] = {}
        state_scores: Dict[str, Dict[str, float]] = {}
        depth = _BASE_DEPTH.copy() if t % script.depth_stride == 0 else None
        table = _TABLE.copy()
        for o in script.objects:
            p = st.positions[o.name]
            box = object_box(p, o.size)
            if o is drawer:
                box = (box[0], box[1], box[2], box[3] + st.drawer_extra)
            x1, y1, x2, y2 = _rect(box)
            table[y1:y2, x1:x2] = False
            if depth is not None:
                depth[y1:y2, x1:x2] = DRAWER_Z if not o.movable else _object_z(p)
            if o is drawer:
                s = st.drawer_state
                if t in flickers:
                    s = "closed" if s == "open" else "open"
                state_scores[o.name] = _state_scores(s)
            if noise.dropout and rng.random() < noise.dropout:
                continue
            jb = box
            if noise.jitter:
                jb = tuple(float(v) for v in np.asarray(box) + rng.normal(0.0, noise.jitter, 4))
                jb = (min(max(jb[0], 0.0), WIDTH - 2.0), min(max(jb[1], 0.0), HEIGHT - 2.0),
                      jb[2], jb[3])
                jb = (jb[0], jb[1], min(max(jb[2], jb[0] + 1.0), float(WIDTH)),
                      min(max(jb[3], jb[1] + 1.0), float(HEIGHT)))
            dbox = Box(*jb)
            di = len(dets)
            dets.append(RawDetection(o.name, dbox, 0.9))
            masks.append(MaskRecord(Mask.from_rect(WIDTH, HEIGHT, *_rect(jb)), detection=di))
            if noise.synonym_rate and o.synonyms and rng.random() < noise.synonym_rate:
                syn = o.synonyms[int(rng.integers(len(o.synonyms)))]
                dets.append(RawDetection(syn, dbox, 0.7))
            q = prev_pos[o.name]
            flow[o.name] = round(float(math.hypot(p[0] - q[0], p[1] - q[1])), 6)
            if (o.name, t) in bursts:
                flow[o.name] = bursts[(o.name, t)]
        dets.insert(0, RawDetection(script.surface, Box(TABLE_QUAD[3][0], TABLE_QUAD[0][1], TABLE_QUAD[2][0] + 1,
                                                        TABLE_QUAD[2][1] + 1), 0.95))
        masks = [MaskRecord(m.mask, None if m.detection is None else m.detection + 1, m.label) for m in masks]
        masks.insert(0, MaskRecord(Mask.from_array(table), detection=0))
        ex, ey = st.ee
        ee_box = Box(ex - EE_SIZE / 2, ey - EE_SIZE / 2, ex + EE_SIZE / 2, ey + EE_SIZE / 2)
        ex1, ey1, ex2, ey2 = _rect(ee_box.as_tuple())
        robot = np.zeros((HEIGHT, WIDTH), dtype=bool)
        robot[ey1:ey2, ex1:ex2] = True
        ax = int(round(ex))
        robot[ey2:, max(0, ax - ARM_WIDTH // 2): ax + ARM_WIDTH // 2] = True
        masks.append(MaskRecord(Mask.from_array(robot), label="robot"))
        closed = st.closed if t not in blips else not st.closed
        proposals = None
        if t == 0:
            proposals = [(script.surface, "brown")] + [(o.name, o.color) for o in script.objects]
        frames.append(FrameRecord(
            frame_index=t,
            detections=dets,
            masks=masks,
            depth=depth,
            flow=flow,
            gripper=GripperRecord(closed, ee_box),
            vlm_proposals=proposals,
            state_scores=state_scores or None,
        ))
        prev_pos = st.positions
    ep = Episode(script.episode_id, (WIDTH, HEIGHT), frames, script.fps)
    gt = GroundTruth(
        script.episode_id,
        [t.end for t in script.tasks],
        [task_label(t, script.surface) for t in script.tasks],
        [t.object for t in script.tasks],
    )
    return ep, gt


# --------------------------------------------------------------------------
# rule-based mock language model


def mock_rules(script: Script) -> dict:
    props = {script.surface: {"movable": False, "is_container": False, "states": [], "interactable": False}}
    for o in script.objects:
        props[o.name] = {"movable": o.movable, "is_container": o.is_container, "states": list(o.states),
                         "interactable": True}
    tasks = []
    for t in script.tasks:
        tasks.append({"label": task_label(t, script.surface), "match": task_signature(t, script.surface)})
    return {"properties": props, "tasks": tasks}


class RuleClient(MockClient):
    """Offline language model answering from a rule table.

    Main prompts are answered with every scripted task whose signature occurs
    in one observation line (confidence 9), else with a distractor.
    """

    def __init__(self, rules: dict, model: str = "rules"):
        super().__init__(model)
        self.rules = rules

    def respond(self, prompt: str) -> str:
        if prompt.startswith(PROPERTIES_HEADER):
            wanted = prompt.rsplit("Objects:", 1)[-1].strip()
            names = [n.strip() for n in wanted.split(",") if n.strip()]
            props = self.rules.get("properties", {})
            default = {"movable": True, "is_container": False, "states": [], "interactable": True}
            return json.dumps({n: props.get(n, default) for n in names})
        if prompt.startswith(TASK_LIST_PROMPT.split("\n", 1)[0]):
            labels = list(dict.fromkeys(t["label"] for t in self.rules.get("tasks", [])))
            return ", ".join(labels)
        if prompt.startswith(GRANULARITY_PROMPT.split("\n", 1)[0]):
            body = prompt.rsplit("Sequence: ```", 1)[-1].rsplit("```", 1)[0]
            lows = [line[len("Task: "):] for line in body.splitlines() if line.startswith("Task: ")]
            if not lows:
                return "***no tasks given***"
            text = lows[0] + "".join(", then " + x[0].lower() + x[1:] for x in lows[1:])
            return render_label_response([text], [8], "combined the low-level steps")
        block = _observation_block(prompt)
        if not block.strip():
            return "***There are no observations, so I cannot determine a task.***"
        lines = [ln.strip() for ln in block.splitlines() if ln.strip()]
        hits = []
        for rule in self.rules.get("tasks", []):
            if any(all(m in ln for m in rule["match"]) for ln in lines) and rule["label"] not in hits:
                hits.append(rule["label"])
        if prompt.startswith(CHOICE_PROMPT.split("\n", 1)[0]):
            choices = prompt.split("Possible tasks: ```", 1)[1].split("```", 1)[0].split("; ")
            picked = [h for h in hits if h in choices][:2] or choices[:1]
            return render_label_response(picked, [9] * len(picked), "matched the observations")
        if not hits:
            return render_label_response(["Push the object around"], [7], "observations match no known task")
        return render_label_response(hits, [9] * len(hits), "matched the observations")


def _observation_block(prompt: str) -> str:
    marker = "Observations: ```"
    if marker not in prompt:
        return ""
    return prompt.rsplit(marker, 1)[1].rsplit("```", 1)[0]


def mock_label_rules(script: Script) -> RuleClient:
    return RuleClient(mock_rules(script))


# --------------------------------------------------------------------------
# files


def save_script(script: Script, path) -> None:
    head = {"format": SCRIPT_TAG, "seed": script.seed, "episode_id": script.episode_id,
            "surface": script.surface, "fps": script.fps, "depth_stride": script.depth_stride,
            "noise": asdict(script.noise)}
    if script.n_frames is not None:
        head["n_frames"] = script.n_frames
    lines = [json.dumps(head)]
    for o in script.objects:
        rec = {"object": o.name, **{k: v for k, v in asdict(o).items() if k != "name"}}
        lines.append(json.dumps(rec))
    for t in script.tasks:
        rec = {"task": t.kind, **{k: v for k, v in asdict(t).items() if k != "kind" and v is not None}}
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_OBJ_FIELDS = {"color", "synonyms", "size", "position", "movable", "is_container", "states", "initial_state"}
_TASK_FIELDS = {"object", "start", "end", "ref", "direction", "cell"}


def load_script(path) -> Script:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    records = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append((n, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ScriptError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
    if not records or records[0][1].get("format") != SCRIPT_TAG:
        raise ScriptError(f"{path}: first line must be a {SCRIPT_TAG} header")
    head = records[0][1]
    objects, tasks = [], []
    for n, rec in records[1:]:
        try:
            # task records also carry an "object" field, so test for tasks first
            if "task" in rec:
                extra = set(rec) - _TASK_FIELDS - {"task"}
                if extra:
                    raise ScriptError(f"unknown task fields {sorted(extra)}")
                tasks.append(TaskSpec(rec["task"], **{k: v for k, v in rec.items() if k != "task"}))
            elif "object" in rec:
                extra = set(rec) - _OBJ_FIELDS - {"object"}
                if extra:
                    raise ScriptError(f"unknown object fields {sorted(extra)}")
                kw = {k: v for k, v in rec.items() if k != "object"}
                for key in ("synonyms", "size", "position", "states"):
                    if key in kw:
                        kw[key] = tuple(kw[key])
                objects.append(ObjectSpec(rec["object"], **kw))
            else:
                raise ScriptError("record is neither an object nor a task")
        except (TypeError, ScriptError) as exc:
            raise ScriptError(f"{path}:{n}: {exc}") from None
    noise = NoiseModel(**head.get("noise", {}))
    script = Script(int(head.get("seed", 0)), str(head.get("episode_id", Path(path).stem)), objects, tasks,
                    head.get("surface", "table"), noise, head.get("n_frames"), float(head.get("fps", 30.0)),
                    int(head.get("depth_stride", 1)))
    validate_script(script)
    return script


def write_ground_truth(gt: GroundTruth, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_keystates([Keystate(f, 0, 1.0) for f in gt.keystates], d / "keystates.tsv")
    lines = ["# frame_index\tobject\ttask"] + [f"{f}\t{o}\t{t}" for f, o, t in zip(gt.keystates, gt.objects,
                                                                                   gt.tasks)]
    (d / "tasks.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_ground_truth(directory) -> GroundTruth:
    d = Path(directory)
    frames, objs, tasks = [], [], []
    for line in (d / "tasks.tsv").read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        f, o, t = line.split("\t", 2)
        frames.append(int(f))
        objs.append(o)
        tasks.append(t)
    return GroundTruth(d.name, frames, tasks, objs)


def write_synthetic(script: Script, out_dir) -> Tuple[Path, Path]:
    """Write ``episodes/<id>/`` (stream plus mock rules) and ``gt/<id>/`` under ``out_dir``."""
    ep, gt = generate(script)
    root = Path(out_dir)
    ep_dir = root / "episodes" / script.episode_id
    save_episode(ep, ep_dir)
    (ep_dir / "mock_rules.json").write_text(json.dumps(mock_rules(script), indent=1, sort_keys=True) + "\n",
                                            encoding="utf-8")
    save_script(script, ep_dir / "script.jsonl")
    gt_dir = root / "gt" / script.episode_id
    write_ground_truth(gt, gt_dir)
    return ep_dir, gt_dir
