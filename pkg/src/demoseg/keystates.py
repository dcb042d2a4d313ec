"""Stage 3a: heuristic-consensus keystate scoring, thresholding and aggregation.

A candidate's score is ``S = sum_k alpha_k * S_k`` where ``S_k`` is the
strongest firing of heuristic ``k`` for the same object within the merge
window around the candidate frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .signals import HEURISTICS, Candidate

__all__ = [
    "Keystate",
    "default_weights",
    "validate_weights",
    "score_candidates",
    "threshold",
    "aggregate",
    "detect_keystates",
    "save_keystates",
    "load_keystates",
]

WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class Keystate:
    frame_index: int
    object_id: int
    score: float
    heuristics: Tuple[str, ...] = ()
    alternates: Tuple[int, ...] = ()

    def __post_init__(self):
        if not -1e-12 <= self.score <= 1.0 + 1e-12:
            raise ValueError(f"keystate score {self.score} outside [0,1]")


def default_weights(enabled: Iterable[str]) -> Dict[str, float]:
    names = [h for h in HEURISTICS if h in set(enabled)]
    if not names:
        raise ValueError("at least one heuristic must be enabled")
    return {h: 1.0 / len(names) for h in names}


def validate_weights(weights: Mapping[str, float]) -> None:
    for h, a in weights.items():
        if h not in HEURISTICS:
            raise ValueError(f"unknown heuristic {h!r}")
        if a < 0:
            raise ValueError(f"negative weight for {h}")
    total = math.fsum(weights.values())
    if abs(total - 1.0) > WEIGHT_TOL:
        raise ValueError(f"heuristic weights sum to {total!r}, expected 1")


def score_candidates(
    candidates: Sequence[Candidate],
    weights: Mapping[str, float],
    window: int = 8,
) -> List[Keystate]:
    """Score every candidate frame of every object.

    Heuristics missing from ``weights`` are ignored. Each heuristic contributes
    at most once per scored frame, with its highest confidence among that
    object's candidates within ``±window`` frames.
    """
    validate_weights(weights)
    if window < 0:
        raise ValueError("window must be >= 0")
    by_obj: Dict[int, List[Candidate]] = {}
    for c in candidates:
        if c.heuristic in weights:
            by_obj.setdefault(c.object_id, []).append(c)
    out = []
    for oid in sorted(by_obj):
        cands = sorted(by_obj[oid], key=lambda c: c.frame_index)
        for f in sorted({c.frame_index for c in cands}):
            best: Dict[str, float] = {}
            for c in cands:
                if abs(c.frame_index - f) <= window:
                    best[c.heuristic] = max(best.get(c.heuristic, 0.0), c.confidence)
            score = math.fsum(weights[h] * s for h, s in best.items())
            out.append(Keystate(f, oid, min(score, 1.0), tuple(h for h in HEURISTICS if h in best)))
    return out


def threshold(scored: Iterable[Keystate], theta: float = 0.25) -> List[Keystate]:
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0,1]")
    return [k for k in scored if k.score >= theta]


def aggregate(keystates: Sequence[Keystate], window: int = 8) -> List[Keystate]:
    """Greedy non-maximum suppression over frames, any object.

    Highest score first (earlier frame, then lower object id, on ties); each
    selection suppresses everything within ``±window`` frames. Suppressed
    objects at the selected frame are kept as alternates.
    """
    if window < 0:
        raise ValueError("window must be >= 0")
    order = sorted(keystates, key=lambda k: (-k.score, k.frame_index, k.object_id))
    chosen: List[Keystate] = []
    for k in order:
        if all(abs(k.frame_index - c.frame_index) > window for c in chosen):
            chosen.append(k)
    out = []
    for c in chosen:
        alts = sorted({k.object_id for k in keystates
                       if k.object_id != c.object_id and abs(k.frame_index - c.frame_index) <= window})
        out.append(Keystate(c.frame_index, c.object_id, c.score, c.heuristics, tuple(alts)))
    return sorted(out, key=lambda k: k.frame_index)


def detect_keystates(
    candidates: Sequence[Candidate],
    theta: float = 0.25,
    window: int = 8,
    enabled: Optional[Iterable[str]] = None,
    weights: Optional[Mapping[str, float]] = None,
) -> List[Keystate]:
    if weights is None:
        weights = default_weights(enabled if enabled is not None else HEURISTICS)
    return aggregate(threshold(score_candidates(candidates, weights, window), theta), window)


KEYSTATE_COLUMNS = ("frame_index", "object_id", "score", "heuristics", "alternates")


def save_keystates(keystates: Sequence[Keystate], path) -> None:
    lines = ["# " + "\t".join(KEYSTATE_COLUMNS)]
    for k in keystates:
        lines.append(f"{k.frame_index}\t{k.object_id}\t{k.score!r}\t{','.join(k.heuristics)}\t"
                     f"{','.join(map(str, k.alternates))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_keystates(path) -> List[Keystate]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise ValueError(f"{path}: malformed keystate line {line!r}")
        heur = tuple(h for h in parts[3].split(",") if h) if len(parts) > 3 else ()
        alts = tuple(int(a) for a in parts[4].split(",") if a) if len(parts) > 4 else ()
        out.append(Keystate(int(parts[0]), int(parts[1]), float(parts[2]), heur, alts))
    return out
