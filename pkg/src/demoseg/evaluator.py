"""Keystate precision, recall and AP, plus label grounding accuracy.

Conventions for degenerate inputs: a ratio with a zero denominator is 0,
except that an empty prediction set against an empty ground truth scores 1.
Reports always carry the raw counts next to the ratios.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

__all__ = [
    "DEFAULT_TOLERANCES",
    "KeystateEvalReport",
    "GroundingReport",
    "match_keystates",
    "evaluate_keystates",
    "keystate_ap",
    "mean_ap",
    "pooled_ap",
    "task_length_tolerance",
    "normalize_task",
    "grounding_accuracy",
    "align_segments",
    "format_keystate_reports",
    "format_grounding_report",
]

DEFAULT_TOLERANCES = (8, 16)
MAP_NOTE = "mAP = arithmetic mean of AP over frame tolerances"


@dataclass
class KeystateEvalReport:
    tolerance: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    ap: Optional[float] = None
    pairs: List[Tuple[int, int]] = field(default_factory=list)

    def merge(self, other: "KeystateEvalReport") -> "KeystateEvalReport":
        if other.tolerance != self.tolerance:
            raise ValueError("cannot merge reports with different tolerances")
        return _report(self.tolerance, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                       self.pairs + other.pairs)


@dataclass
class GroundingReport:
    mode: str
    accuracy: float
    correct: int
    total: int
    verdicts: List[bool]


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def _report(eps, tp, fp, fn, pairs) -> KeystateEvalReport:
    empty = tp + fp + fn == 0
    return KeystateEvalReport(eps, tp, fp, fn, _ratio(tp, tp + fp, empty), _ratio(tp, tp + fn, empty), None,
                              pairs)


def match_keystates(pred: Sequence[int], gt: Sequence[int], eps: int) -> List[Tuple[int, int]]:
    """One-to-one greedy matching in ascending frame distance, pairs within ``eps``.

    Ties go to the smaller prediction frame, then the smaller ground-truth frame.
    """
    if eps < 0:
        raise ValueError("tolerance must be >= 0")
    cand = sorted(
        (abs(p - g), p, g, i, j)
        for i, p in enumerate(pred)
        for j, g in enumerate(gt)
        if abs(p - g) <= eps
    )
    used_p, used_g, pairs = set(), set(), []
    for _, p, g, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((p, g))
    return sorted(pairs)


def evaluate_keystates(pred: Sequence[int], gt: Sequence[int], eps: int) -> KeystateEvalReport:
    pairs = match_keystates(pred, gt, eps)
    tp = len(pairs)
    return _report(eps, tp, len(pred) - tp, len(gt) - tp, pairs)


def _ap_hits(scored: Sequence[Tuple[int, float]], gt: Sequence[int], eps: int) -> List[bool]:
    order = sorted(scored, key=lambda t: (-t[1], t[0]))
    free = list(gt)
    hits = []
    for frame, _ in order:
        best = None
        for j, g in enumerate(free):
            d = abs(frame - g)
            if d <= eps and (best is None or (d, g) < best[0]):
                best = ((d, g), j)
        if best is None:
            hits.append(False)
        else:
            free.pop(best[1])
            hits.append(True)
    return hits


def _ap_from_hits(hits: Sequence[bool], n_gt: int) -> float:
    if n_gt == 0:
        return 1.0 if not hits else 0.0
    precisions = []
    tp = 0
    for rank, hit in enumerate(hits, 1):
        tp += hit
        precisions.append(tp / rank)
    # interpolate: precision at rank r becomes the best precision at any rank >= r
    interp = precisions[:]
    for r in range(len(interp) - 2, -1, -1):
        interp[r] = max(interp[r], interp[r + 1])
    return math.fsum(interp[r] / n_gt for r, hit in enumerate(hits) if hit)


def keystate_ap(scored: Sequence[Tuple[int, float]], gt: Sequence[int], eps: int) -> float:
    """Average precision of score-ranked predictions against ground-truth frames."""
    if eps < 0:
        raise ValueError("tolerance must be >= 0")
    return _ap_from_hits(_ap_hits(scored, gt, eps), len(gt))


def mean_ap(scored: Sequence[Tuple[int, float]], gt: Sequence[int],
            tolerances: Iterable[int] = DEFAULT_TOLERANCES) -> float:
    tols = list(tolerances)
    if not tols:
        raise ValueError("at least one tolerance required")
    return math.fsum(keystate_ap(scored, gt, e) for e in tols) / len(tols)


def pooled_ap(episodes: Sequence[Tuple[Sequence[Tuple[int, float]], Sequence[int]]], eps: int) -> float:
    """AP over several episodes with one global score ranking.

    Matching stays within an episode; its outcome only depends on the order
    of that episode's own predictions, which the global ranking preserves.
    """
    ranked = []
    n_gt = 0
    for e, (scored, gt) in enumerate(episodes):
        order = sorted(scored, key=lambda t: (-t[1], t[0]))
        for (frame, score), hit in zip(order, _ap_hits(order, gt, eps)):
            ranked.append((-score, e, frame, hit))
        n_gt += len(gt)
    ranked.sort()
    return _ap_from_hits([r[3] for r in ranked], n_gt)


def task_length_tolerance(gt: Sequence[int], factor: float, first_frame: int = 0) -> int:
    """Tolerance of ``round(factor * mean task length)`` frames."""
    if not gt:
        raise ValueError("no ground-truth keystates")
    frames = sorted(gt)
    lengths = [frames[0] - first_frame] + [b - a for a, b in zip(frames, frames[1:])]
    return int(round(factor * (sum(lengths) / len(lengths))))


_WS = re.compile(r"\s+")


def normalize_task(text: str) -> str:
    t = _WS.sub(" ", text.strip().lower())
    return t[:-1].rstrip() if t.endswith(".") else t


def grounding_accuracy(predicted: Sequence[Sequence[str]], gt: Sequence[str], mode: str = "amb") -> GroundingReport:
    """Amb: correct when the ground truth is among the predicted tasks.
    Single: correct only when it is the one and only predicted task."""
    m = mode.lower()
    if m not in ("amb", "single"):
        raise ValueError(f"unknown grounding mode {mode!r}")
    if len(predicted) != len(gt):
        raise ValueError(f"{len(predicted)} predicted segments but {len(gt)} ground-truth tasks")
    verdicts = []
    for tasks, truth in zip(predicted, gt):
        norm = [normalize_task(t) for t in tasks]
        target = normalize_task(truth)
        verdicts.append(target in norm if m == "amb" else norm == [target])
    correct = sum(verdicts)
    acc = correct / len(verdicts) if verdicts else 1.0
    return GroundingReport("Amb" if m == "amb" else "Single", acc, correct, len(verdicts), verdicts)


def align_segments(
    segments: Sequence[Tuple[int, Sequence[str]]], gt_frames: Sequence[int], eps: int = 8
) -> List[Tuple[str, ...]]:
    """Predicted task list for every ground-truth segment.

    ``segments`` are ``(keystate frame, tasks)``. A ground-truth segment takes
    the tasks of the prediction its keystate was matched to, or nothing.
    Unmatched predictions are keystate false positives and are left out.
    """
    by_frame = {}
    for frame, tasks in segments:
        by_frame.setdefault(frame, tuple(tasks))
    pairs = {g: p for p, g in match_keystates([f for f, _ in segments], gt_frames, eps)}
    return [by_frame[pairs[g]] if g in pairs else () for g in gt_frames]


def format_keystate_reports(reports: Sequence[KeystateEvalReport], map_value: Optional[float] = None) -> str:
    lines = [f"# {MAP_NOTE}", "eps\tprecision\trecall\tAP\ttp\tfp\tfn"]
    for r in reports:
        ap = "-" if r.ap is None else f"{r.ap:.6f}"
        lines.append(f"{r.tolerance}\t{r.precision:.6f}\t{r.recall:.6f}\t{ap}\t{r.tp}\t{r.fp}\t{r.fn}")
    lines.append("")
    for r in reports:
        lines.append(f"precision\t{r.tolerance}\t{r.precision!r}")
        lines.append(f"recall\t{r.tolerance}\t{r.recall!r}")
        if r.ap is not None:
            lines.append(f"ap\t{r.tolerance}\t{r.ap!r}")
    if map_value is not None:
        lines.append(f"map\t{','.join(str(r.tolerance) for r in reports)}\t{map_value!r}")
    return "\n".join(lines) + "\n"


def format_grounding_report(report: GroundingReport) -> str:
    return (f"mode\tcorrect\ttotal\taccuracy\n{report.mode}\t{report.correct}\t{report.total}\t"
            f"{report.accuracy:.6f}\n\naccuracy\t{report.mode}\t{report.accuracy!r}\n")
