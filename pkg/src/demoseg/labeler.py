"""Stage 3b: turn observation windows between keystates into language labels."""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .client import LabelClient
from .errors import LabelError
from .keystates import Keystate
from .registry import ObjectRegistry
from .signals import Observation

log = logging.getLogger(__name__)

__all__ = [
    "LabeledSegment",
    "MAIN_PROMPT",
    "TASK_LIST_PROMPT",
    "GRANULARITY_PROMPT",
    "CHOICE_PROMPT",
    "segment_bounds",
    "build_object_prompt",
    "build_task_list_prompt",
    "parse_label_response",
    "render_label_response",
    "parse_task_list",
    "label_segment",
    "label_episode",
    "aggregate_granularity",
    "multiple_choice",
    "save_labels",
    "load_labels",
]

GRIPPER_KINDS = ("gripper_near", "gripper_close")

MAIN_PROMPT = """You will be provided with observations of a robot interaction with an environment, delimited by triple quotes.

Determine the task the robot could have solved. The robot can only solve one task. If the observations indicate that the robot interacted with multiple objects, focus on the most frequent and precise observations.

Follow these guidelines:

Step 1: Answer what objects appear in the observation. List all objects. Then, determine the object for which the observations align the best.

Step 2: Determine the object movement and the resulting object relations. Think about where the object and its relational objects are located in the scene on a global scale. Think step by step and list the locations and relations of all objects. Explain the object movements.

Step 3: Determine what tasks result in the object relations from Step 2.

Step 4: Output tasks that accomplish the observations as short instructions. Focus on simple, single-step tasks that only require interaction with the determined object from Step 1. Focus on tasks that include changing the object relation and moving the object.

Example tasks: "Place the pot to the left of the fruit"; "Slide the dishrag to the bottom of the table next to the towel"; "Put the pot to the right of the fruit"; "Move the pot forward and to the left"; "Turn on stove"; "Open the microwave"; "Relocate the knife inside the sink".
Follow the steps above. Explain your reasoning. Output the reasoning delimited by ***.

After, produce your output as JSON. The format should be:
```{
"tasks": "The determined tasks, delimited by semicolons.",
"confidence": "A confidence score for each task between 0 and 10, delimited by commas. Be pessimistic."
}```

Observations: ```[OBSERVATIONS]```"""

TASK_LIST_PROMPT = """You will be provided with a list of objects observed by a robot. Based on the objects, give possible instructions to the robot. Infer the type of environment from the provided objects.
Follow these guidelines:

- Keep the instructions simple. Focus on tasks that only require a single step.
- Include tasks like placing an object inside another object or moving the object. Only for movable objects.
- Do not assume the presence of any objects not listed.

Output at least 20 possible instructions delimited by comma.

The following objects are in the environment: [OBJECT_LIST]"""

GRANULARITY_PROMPT = """You will be provided with a sequence of low-level tasks a robot solved, each followed by the observations made while it was solved, delimited by triple quotes.

Determine the single higher-level task that the whole sequence accomplishes. Output the reasoning delimited by ***.

After, produce your output as JSON with keys "tasks" (delimited by semicolons) and "confidence" (between 0 and 10, delimited by commas).

Sequence: ```[SEGMENTS]```"""

CHOICE_PROMPT = """You will be provided with observations of a robot interaction with an environment and a list of possible tasks, both delimited by triple quotes.

Select up to two tasks from the list that the robot solved. Copy them verbatim. Output the reasoning delimited by ***.

After, produce your output as JSON with keys "tasks" (delimited by semicolons) and "confidence" (between 0 and 10, delimited by commas).

Possible tasks: ```[CHOICES]```

Observations: ```[OBSERVATIONS]```"""


@dataclass(frozen=True)
class LabeledSegment:
    start_frame: int
    end_frame: int
    focus_object_id: int
    tasks: Tuple[str, ...]
    confidences: Tuple[float, ...]

    def __post_init__(self):
        if self.end_frame <= self.start_frame:
            raise ValueError("segment end must come after its start")
        if len(self.tasks) != len(self.confidences):
            raise ValueError("tasks and confidences differ in length")

    @property
    def ambiguous(self) -> bool:
        return len(self.tasks) > 1


# --------------------------------------------------------------------------
# prompts


def segment_bounds(keystates: Sequence[Keystate], first_frame: int) -> List[Tuple[int, int, Keystate]]:
    """(start, end, keystate) per keystate; a segment starts right after the previous one."""
    out = []
    prev = first_frame - 1
    for k in sorted(keystates, key=lambda k: k.frame_index):
        start = prev + 1
        if k.frame_index > start:
            out.append((start, k.frame_index, k))
        else:
            log.warning("keystate at frame %d leaves no segment, skipped", k.frame_index)
        prev = k.frame_index
    return out


def select_observations(
    observations: Sequence[Observation], start: int, end: int, focus: Optional[int]
) -> List[Observation]:
    picked = [
        o for o in observations
        if start <= o.frame_index <= end and (focus is None or o.object_id == focus or o.kind in GRIPPER_KINDS)
    ]
    return sorted(picked, key=lambda o: (o.frame_index, o.object_id, o.kind))


def observation_block(observations: Sequence[Observation]) -> str:
    return "\n".join(o.text for o in observations)


def build_object_prompt(observations: Sequence[Observation], segment: Tuple[int, int], focus: int) -> str:
    """Main labeling prompt for one object over ``[start, end]`` (inclusive)."""
    picked = select_observations(observations, segment[0], segment[1], focus)
    if not picked:
        raise LabelError("nothing to label")
    return MAIN_PROMPT.replace("[OBSERVATIONS]", observation_block(picked))


def build_task_list_prompt(registry: ObjectRegistry) -> str:
    if not registry.entries:
        raise ValueError("empty registry")
    names = ", ".join(e.canonical_name for e in registry.entries)
    return TASK_LIST_PROMPT.replace("[OBJECT_LIST]", names)


# --------------------------------------------------------------------------
# responses


def _json_payload(raw: str) -> dict:
    tail = raw.rsplit("***", 1)[-1] if "***" in raw else raw
    brace = tail.find("{")
    if brace < 0:
        raise LabelError("no JSON object found in response", raw)
    decoder = json.JSONDecoder()
    try:
        payload, _ = decoder.raw_decode(tail[brace:])
    except json.JSONDecodeError as exc:
        raise LabelError(f"malformed JSON in response: {exc}", raw) from None
    if not isinstance(payload, dict):
        raise LabelError("response JSON is not an object", raw)
    return payload


def parse_label_response(raw: str) -> Tuple[List[str], List[float]]:
    """``(tasks, confidences)`` from a ``{"tasks": "a; b", "confidence": "9,7"}`` reply."""
    payload = _json_payload(raw)
    if "tasks" not in payload or "confidence" not in payload:
        raise LabelError("response JSON lacks 'tasks' or 'confidence'", raw)
    tasks_raw, conf_raw = payload["tasks"], payload["confidence"]
    tasks = [t.strip() for t in (tasks_raw if isinstance(tasks_raw, list) else str(tasks_raw).split(";"))]
    tasks = [t for t in tasks if t]
    if isinstance(conf_raw, list):
        parts = [str(c) for c in conf_raw]
    else:
        parts = [c for c in str(conf_raw).split(",") if c.strip()]
    try:
        confs = [float(c) for c in parts]
    except ValueError:
        raise LabelError(f"unparseable confidence list {conf_raw!r}", raw) from None
    if len(tasks) != len(confs):
        raise LabelError(f"{len(tasks)} tasks but {len(confs)} confidences", raw)
    for c in confs:
        if not 0.0 <= c <= 10.0:
            raise LabelError(f"confidence {c} outside [0,10]", raw)
    return tasks, confs


def _fmt_conf(c: float) -> str:
    return str(int(c)) if float(c).is_integer() else repr(float(c))


def render_label_response(tasks: Sequence[str], confidences: Sequence[float], reasoning: str = "") -> str:
    body = json.dumps({"tasks": "; ".join(tasks), "confidence": ",".join(_fmt_conf(c) for c in confidences)})
    return f"***{reasoning}***\n{body}" if reasoning else body


def parse_task_list(raw: str) -> List[str]:
    body = raw.rsplit("***", 1)[-1]
    items = [t.strip().strip('"').strip() for t in re.split(r"[,\n]", body)]
    return [t for t in items if t]


# --------------------------------------------------------------------------
# labeling


def _filter(tasks, confs, min_conf: Optional[float]):
    if min_conf is None:
        return tasks, confs
    kept = [(t, c) for t, c in zip(tasks, confs) if c >= min_conf]
    return [t for t, _ in kept], [c for _, c in kept]


def label_segment(
    observations: Sequence[Observation],
    segment: Tuple[int, int],
    focus: int,
    client: LabelClient,
    min_conf: Optional[float] = 6.0,
    slack: int = 0,
) -> LabeledSegment:
    """Label one segment. ``min_conf=None`` keeps every returned task.

    Observations are gathered over ``[start, end + slack]`` so that events
    confirmed a few frames after the keystate still reach the prompt.
    """
    start, end = segment
    prompt = build_object_prompt(observations, (start, end + slack), focus)
    raw = client.complete(prompt)
    tasks, confs = _filter(*parse_label_response(raw), min_conf)
    if not tasks:
        raise LabelError("no confident label", raw)
    return LabeledSegment(start, end, focus, tuple(tasks), tuple(confs))


def label_episode(
    observations: Sequence[Observation],
    keystates: Sequence[Keystate],
    first_frame: int,
    client: LabelClient,
    min_conf: Optional[float] = 6.0,
    slack: int = 8,
    max_in_flight: int = 1,
) -> Tuple[List[LabeledSegment], List[Tuple[int, str]]]:
    """Label every segment; returns the segments and per-keystate failures."""
    bounds = segment_bounds(keystates, first_frame)
    # the window may not reach into the next keystate
    jobs = []
    for i, (s, e, k) in enumerate(bounds):
        nxt = bounds[i + 1][1] if i + 1 < len(bounds) else None
        sl = slack if nxt is None else max(0, min(slack, nxt - e - 1))
        jobs.append((s, e, k, sl))

    def run(job):
        s, e, k, sl = job
        try:
            return label_segment(observations, (s, e), k.object_id, client, min_conf, sl), None
        except LabelError as exc:
            return None, (k.frame_index, str(exc))

    if max_in_flight > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    segs = sorted((r for r, _ in results if r is not None), key=lambda s: s.start_frame)
    errors = [err for _, err in results if err is not None]
    return segs, errors


def aggregate_granularity(
    segments: Sequence[LabeledSegment],
    observations: Sequence[Observation],
    client: LabelClient,
    min_conf: Optional[float] = 6.0,
) -> LabeledSegment:
    """Merge consecutive low-level segments into one higher-level label."""
    if len(segments) < 2:
        raise ValueError("granularity aggregation needs at least two segments")
    ordered = sorted(segments, key=lambda s: s.start_frame)
    blocks = []
    for seg in ordered:
        obs = select_observations(observations, seg.start_frame, seg.end_frame, seg.focus_object_id)
        lines = [f"Task: {seg.tasks[0]}"] + [o.text for o in obs]
        blocks.append("\n".join(lines))
    prompt = GRANULARITY_PROMPT.replace("[SEGMENTS]", "\n\n".join(blocks))
    raw = client.complete(prompt)
    tasks, confs = _filter(*parse_label_response(raw), min_conf)
    if not tasks:
        raise LabelError("no confident label", raw)
    return LabeledSegment(ordered[0].start_frame, ordered[-1].end_frame, ordered[0].focus_object_id,
                          tuple(tasks), tuple(confs))


def multiple_choice(
    observations: Sequence[Observation],
    segment: Tuple[int, int],
    focus: int,
    choices: Sequence[str],
    client: LabelClient,
) -> List[str]:
    """Let the model pick at most two tasks from ``choices``, copied verbatim."""
    if not choices:
        raise ValueError("no choices given")
    picked = select_observations(observations, segment[0], segment[1], focus)
    prompt = (CHOICE_PROMPT.replace("[CHOICES]", "; ".join(choices))
              .replace("[OBSERVATIONS]", observation_block(picked)))
    raw = client.complete(prompt)
    tasks, _ = parse_label_response(raw)
    if len(tasks) > 2:
        log.warning("model returned %d choices, keeping the first two", len(tasks))
        tasks = tasks[:2]
    allowed = set(choices)
    for t in tasks:
        if t not in allowed:
            raise LabelError(f"answer {t!r} is not one of the choices", raw)
    if not tasks:
        raise LabelError("model selected no task", raw)
    return tasks


# --------------------------------------------------------------------------
# files

LABEL_COLUMNS = ("start_frame", "end_frame", "object_id", "tasks", "confidences", "ambiguous")


def save_labels(segments: Sequence[LabeledSegment], path) -> None:
    lines = ["# " + "\t".join(LABEL_COLUMNS)]
    for s in segments:
        lines.append("\t".join([
            str(s.start_frame),
            str(s.end_frame),
            str(s.focus_object_id),
            ";".join(s.tasks),
            ",".join(_fmt_conf(c) for c in s.confidences),
            "1" if s.ambiguous else "0",
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_labels(path) -> List[LabeledSegment]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != len(LABEL_COLUMNS):
            raise ValueError(f"{path}:{n}: expected {len(LABEL_COLUMNS)} fields, got {len(parts)}")
        tasks = tuple(t for t in parts[3].split(";") if t)
        confs = tuple(float(c) for c in parts[4].split(",") if c)
        seg = LabeledSegment(int(parts[0]), int(parts[1]), int(parts[2]), tasks, confs)
        if seg.ambiguous != (parts[5] == "1"):
            raise ValueError(f"{path}:{n}: ambiguous flag disagrees with task count")
        out.append(seg)
    return out
