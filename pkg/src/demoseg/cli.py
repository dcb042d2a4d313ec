"""Command-line interface.

Subcommands: ``label``, ``eval-keystates``, ``eval-grounding``, ``synth`` and
``inspect``. Exit codes: 0 success, 1 data or episode errors, 2 usage or
configuration errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import Config, load_config, parse_override
from .errors import ConfigError, DemosegError
from .evaluator import (
    align_segments,
    evaluate_keystates,
    format_grounding_report,
    format_keystate_reports,
    grounding_accuracy,
    pooled_ap,
    task_length_tolerance,
)
from .keystates import load_keystates
from .labeler import load_labels
from .signals import HEURISTICS

log = logging.getLogger("demoseg")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


# --------------------------------------------------------------------------
# label


def _label_one(ep_dir: str, cfg_dict: dict, out_dir: str) -> dict:
    """Process one episode; never raises so a bad episode cannot stop the batch."""
    from .pipeline import client_from_config, run_episode, write_outputs
    from .stream import load_episode

    started = time.perf_counter()
    name = Path(ep_dir).name
    try:
        cfg = Config(cfg_dict)
        ep = load_episode(ep_dir)
        client = client_from_config(cfg, Path(ep_dir))
        result = run_episode(ep, cfg, client)
        write_outputs(result, out_dir)
        entry = {
            "episode_id": ep.episode_id,
            "source": name,
            "status": "ok",
            "frames": len(ep.frames),
            "objects": len(result.registry.entries),
            "observations": len(result.signals.observations),
            "keystates": len(result.keystates),
            "labels": len(result.labels),
            "heuristic_weights": {h: result.weights[h] for h in HEURISTICS if h in result.weights},
            "signals_available": {k: bool(v) for k, v in sorted(result.signals.notes.items())},
            "label_errors": [{"frame_index": f, "error": e} for f, e in result.label_errors],
            "focus_alternates": {str(k.frame_index): list(k.alternates) for k in result.keystates if k.alternates},
        }
    except Exception as exc:  # isolate per-episode failures
        log.debug("episode %s failed:\n%s", name, traceback.format_exc())
        entry = {"episode_id": name, "source": name, "status": "error", "error": f"{type(exc).__name__}: {exc}"}
    entry["_seconds"] = round(time.perf_counter() - started, 4)
    return entry


def cmd_label(episodes: Path, out_dir: Path, cfg: Config) -> int:
    from .stream import iter_episode_dirs

    if not episodes.exists():
        print(f"error: episode path {episodes} does not exist", file=sys.stderr)
        return EXIT_DATA
    dirs = iter_episode_dirs(episodes)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = cfg["run"]["workers"]
    args = [(str(d), cfg.to_dict(), str(out_dir)) for d in dirs]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_label_one, *zip(*args)))
    else:
        results = [_label_one(*a) for a in args]
    results.sort(key=lambda r: (r["episode_id"], r["source"]))
    timing = {r["episode_id"]: r.pop("_seconds") for r in results}
    manifest = {
        "tool": "demoseg",
        "version": __version__,
        "versions": {"python": platform.python_version(), "numpy": np.__version__},
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "weight_normalisation": cfg["keystates"]["renormalize"],
        "mAP_definition": "mean of AP over eval.tolerances",
        "episodes": results,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "run_timing.json").write_text(json.dumps({"seconds": timing}, indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")
    failed = [r for r in results if r["status"] != "ok"]
    for r in failed:
        print(f"error: episode {r['episode_id']}: {r['error']}", file=sys.stderr)
    print(f"labeled {len(results) - len(failed)}/{len(results)} episodes into {out_dir}")
    return EXIT_DATA if failed else EXIT_OK


# --------------------------------------------------------------------------
# evaluation


def _episode_files(root: Path, filename: str) -> Dict[str, Path]:
    if (root / filename).is_file():
        return {root.name: root / filename}
    return {p.parent.name: p for p in sorted(root.glob(f"*/{filename}"))}


def _paired(pred_root: Path, gt_root: Path, pred_file: str, gt_file: str):
    pred = _episode_files(pred_root, pred_file)
    gt = _episode_files(gt_root, gt_file)
    if len(pred) == 1 and len(gt) == 1 and (pred_root / pred_file).is_file():
        return [(next(iter(pred.values())), next(iter(gt.values())))], []
    missing = sorted(set(gt) ^ set(pred))
    return [(pred[k], gt[k]) for k in sorted(set(gt) & set(pred))], missing


def cmd_eval_keystates(pred_root: Path, gt_root: Path, tolerances: Sequence[int],
                       factor: Optional[float] = None) -> int:
    pairs, missing = _paired(pred_root, gt_root, "keystates.tsv", "keystates.tsv")
    if missing:
        print(f"error: episode ids differ between predictions and ground truth: {', '.join(missing)}",
              file=sys.stderr)
        return EXIT_DATA
    if not pairs:
        print("error: no keystate files found", file=sys.stderr)
        return EXIT_DATA
    data = []
    for p, g in pairs:
        pred = load_keystates(p)
        gt = load_keystates(g)
        data.append(([(k.frame_index, k.score) for k in pred], [k.frame_index for k in gt]))
    tols = list(tolerances)
    if factor is not None:
        # mean task length pooled over episodes: factor * total span / total tasks
        spans = [(max(gt), len(gt)) for _, gt in data if gt]
        if not spans:
            print("error: ground truth has no keystates for a task-length tolerance", file=sys.stderr)
            return EXIT_DATA
        tols.append(task_length_tolerance([sum(s for s, _ in spans)], factor / sum(n for _, n in spans)))
    reports = []
    for eps in tols:
        rep = None
        for scored, gt in data:
            r = evaluate_keystates([f for f, _ in scored], gt, eps)
            rep = r if rep is None else rep.merge(r)
        rep.ap = pooled_ap(data, eps)
        reports.append(rep)
    m = sum(r.ap for r in reports) / len(reports)
    sys.stdout.write(f"# episodes: {len(data)}\n" + format_keystate_reports(reports, m))
    return EXIT_OK


def _load_tasks(path: Path):
    frames, tasks = [], []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        frames.append(int(parts[0]))
        tasks.append(parts[-1])
    return frames, tasks


def cmd_eval_grounding(labels_root: Path, gt_root: Path, mode: str, eps: int) -> int:
    pairs, missing = _paired(labels_root, gt_root, "labels.tsv", "tasks.tsv")
    if missing:
        print(f"error: episode ids differ between labels and ground truth: {', '.join(missing)}", file=sys.stderr)
        return EXIT_DATA
    if not pairs:
        print("error: no label files found", file=sys.stderr)
        return EXIT_DATA
    predicted: List[tuple] = []
    truth: List[str] = []
    for lp, gp in pairs:
        segs = load_labels(lp)
        frames, tasks = _load_tasks(gp)
        predicted += align_segments([(s.end_frame, s.tasks) for s in segs], frames, eps)
        truth += tasks
    modes = ["amb", "single"] if mode == "both" else [mode]
    for m in modes:
        sys.stdout.write(format_grounding_report(grounding_accuracy(predicted, truth, m)))
    return EXIT_OK


# --------------------------------------------------------------------------
# synth and inspect


def cmd_synth(args) -> int:
    from .synth import NoiseModel, ScriptError, load_script, random_script, write_synthetic

    out = Path(args.out)
    try:
        if args.script is not None:
            scripts = [load_script(args.script)]
        else:
            noise = NoiseModel(args.jitter, args.dropout, args.synonym_rate, args.spurious_rate)
            scripts = [random_script(args.seed + i, args.tasks, noise) for i in range(args.random)]
        for sc in scripts:
            write_synthetic(sc, out)
    except (ScriptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {len(scripts)} episode(s) to {out / 'episodes'} and ground truth to {out / 'gt'}")
    return EXIT_OK


def _table(rows: List[List[str]], header: List[str]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)] if rows else [len(h) for h in header]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    lines = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*[str(x) for x in r]) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_inspect(path: Path, limit: int) -> int:
    from .stream import INDEX_NAME, load_episode

    if path.is_dir() and (path / INDEX_NAME).is_file():
        path = path / INDEX_NAME
    if not path.is_file():
        print(f"error: {path} is not a file", file=sys.stderr)
        return EXIT_DATA
    name = path.name
    if name.endswith(".jsonl"):
        first = path.open(encoding="utf-8").readline()
        head = json.loads(first) if first.strip() else {}
        if str(head.get("format", "")).startswith("demoseg-script"):
            print(first.strip())
            return EXIT_OK
        ep = load_episode(path)
        print(f"episode {ep.episode_id}: {len(ep.frames)} frames, {ep.width}x{ep.height} px, {ep.fps} fps")
        rows = []
        for fr in ep.frames[:limit]:
            rows.append([fr.frame_index, len(fr.detections), len(fr.masks), "yes" if fr.depth is not None else "-",
                         "-" if fr.gripper is None else ("closed" if fr.gripper.closed else "open"),
                         ",".join(sorted({d.name for d in fr.detections}))])
        sys.stdout.write(_table(rows, ["frame", "dets", "masks", "depth", "gripper", "names"]))
        if len(ep.frames) > limit:
            print(f"... {len(ep.frames) - limit} more frames")
        return EXIT_OK
    if name.endswith(".json"):
        data = json.loads(path.read_text(encoding="utf-8"))
        print(json.dumps(data, indent=2, sort_keys=True))
        return EXIT_OK
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0][2:].split("\t") if lines and lines[0].startswith("# ") else None
    rows = [ln.split("\t") for ln in lines if ln.strip() and not ln.startswith("#")]
    if header is None:
        header = [f"col{i}" for i in range(max((len(r) for r in rows), default=0))]
    rows = [r + [""] * (len(header) - len(r)) for r in rows]
    sys.stdout.write(_table(rows[:limit], header))
    if len(rows) > limit:
        print(f"... {len(rows) - limit} more rows")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="demoseg", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"demoseg {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    lab = sub.add_parser("label", help="detect keystates and label every episode")
    lab.add_argument("episodes", type=Path, help="episode directory, or a directory of episode directories")
    lab.add_argument("out", type=Path, help="output directory")
    lab.add_argument("--config", type=Path, help="YAML configuration file")
    lab.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                     help="override one config value (repeatable)")
    lab.add_argument("--theta", type=float, help="keystate score threshold")
    lab.add_argument("--window", type=int, help="keystate merge window in frames")
    lab.add_argument("--min-conf", type=float, help="minimum label confidence (0-10)")
    lab.add_argument("--noisy", action="store_true", default=None, help="keep every label regardless of confidence")
    lab.add_argument("--mock", action="store_true", default=None, help="use the offline rule-based client")
    lab.add_argument("--endpoint", help="language model endpoint URL")
    lab.add_argument("--workers", type=int, help="episodes processed in parallel")
    lab.add_argument("--disable", action="append", default=[], choices=HEURISTICS, metavar="HEURISTIC",
                     help="disable one keystate heuristic (repeatable)")

    ek = sub.add_parser("eval-keystates", help="precision, recall and mAP of predicted keystates")
    ek.add_argument("pred", type=Path)
    ek.add_argument("gt", type=Path)
    ek.add_argument("--eps", type=int, nargs="+", help="frame tolerances (default from config: 8 16)")
    ek.add_argument("--task-length-factor", type=float, help="also evaluate at round(f * mean task length)")
    ek.add_argument("--config", type=Path)

    eg = sub.add_parser("eval-grounding", help="grounding accuracy of labels against ground-truth tasks")
    eg.add_argument("labels", type=Path)
    eg.add_argument("gt", type=Path)
    eg.add_argument("--mode", choices=["amb", "single", "both"], default="amb")
    eg.add_argument("--eps", type=int, default=8, help="tolerance for aligning segments to ground truth")

    sy = sub.add_parser("synth", help="generate synthetic episodes with ground truth")
    sy.add_argument("script", type=Path, nargs="?", help="script file (omit with --random)")
    sy.add_argument("out", type=Path, nargs="?")
    sy.add_argument("--random", type=int, metavar="N", help="generate N random scripts instead")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--tasks", type=int, default=10)
    sy.add_argument("--jitter", type=float, default=0.0)
    sy.add_argument("--dropout", type=float, default=0.0)
    sy.add_argument("--synonym-rate", type=float, default=0.0)
    sy.add_argument("--spurious-rate", type=float, default=0.0)

    ins = sub.add_parser("inspect", help="pretty-print any artifact file")
    ins.add_argument("path", type=Path)
    ins.add_argument("--limit", type=int, default=40)
    return p


def _label_config(args) -> Config:
    overrides = dict(parse_override(o) for o in args.overrides)
    flags = {
        "keystates.theta": args.theta,
        "keystates.window": args.window,
        "labeler.min_conf": args.min_conf,
        "labeler.noisy": args.noisy,
        "client.mock": args.mock,
        "client.endpoint": args.endpoint,
        "run.workers": args.workers,
    }
    cfg = load_config(args.config, overrides)
    for key, value in flags.items():
        if value is not None:
            cfg.set(key, value)
    if args.disable:
        cfg.set("keystates.enabled", {**cfg["keystates"]["enabled"], **{h: False for h in args.disable}})
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "label":
            return cmd_label(args.episodes, args.out, _label_config(args))
        if args.command == "eval-keystates":
            tols = args.eps if args.eps else load_config(args.config)["eval"]["tolerances"]
            if any(t < 0 for t in tols):
                raise ConfigError("tolerances must be >= 0", key="eval.tolerances")
            return cmd_eval_keystates(args.pred, args.gt, tols, args.task_length_factor)
        if args.command == "eval-grounding":
            return cmd_eval_grounding(args.labels, args.gt, args.mode, args.eps)
        if args.command == "synth":
            if args.script is not None and args.out is None and args.random is not None:
                args.out, args.script = args.script, None
            if args.out is None or (args.script is None) == (args.random is None):
                parser.error("synth needs SCRIPT OUT, or --random N OUT")
            return cmd_synth(args)
        if args.command == "inspect":
            return cmd_inspect(args.path, args.limit)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DemosegError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
