import json

import pytest

from demoseg.cli import main
from demoseg.keystates import Keystate, save_keystates
from demoseg.labeler import LabeledSegment, save_labels
from demoseg.synth import random_script, save_script


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    assert main(["synth", "--random", "2", "--seed", "40", "--tasks", "4", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def labelled(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    assert main(["label", str(synth_dir / "episodes"), str(out), "--mock"]) == 0
    return out


def test_label_outputs_match_script(synth_dir, labelled):
    manifest = json.loads((labelled / "manifest.json").read_text())
    assert [e["episode_id"] for e in manifest["episodes"]] == sorted(p.name for p in (synth_dir / "episodes").iterdir())
    assert all(e["status"] == "ok" for e in manifest["episodes"])
    assert manifest["config"]["client"]["mock"] is True
    for e in manifest["episodes"]:
        d = labelled / e["episode_id"]
        for f in ("registry.tsv", "observations.tsv", "keystates.tsv", "labels.tsv"):
            assert (d / f).is_file()


def test_eval_commands_on_labelled(synth_dir, labelled, capsys):
    assert main(["eval-keystates", str(labelled), str(synth_dir / "gt"), "--eps", "8"]) == 0
    out = capsys.readouterr().out
    assert "# episodes: 2" in out and "precision\t8\t1.0" in out and "recall\t8\t1.0" in out
    assert main(["eval-grounding", str(labelled), str(synth_dir / "gt"), "--mode", "both"]) == 0
    out = capsys.readouterr().out
    assert "accuracy\tAmb\t1.0" in out and "accuracy\tSingle\t" in out


def test_label_deterministic(synth_dir, labelled, tmp_path):
    assert main(["label", str(synth_dir / "episodes"), str(tmp_path), "--mock"]) == 0
    for f in sorted(labelled.rglob("*")):
        if f.is_file() and f.name != "run_timing.json":
            assert f.read_bytes() == (tmp_path / f.relative_to(labelled)).read_bytes(), f


def test_empty_dir(tmp_path):
    (tmp_path / "in").mkdir()
    assert main(["label", str(tmp_path / "in"), str(tmp_path / "out"), "--mock"]) == 0
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["episodes"] == []


def test_bad_config_key_exit_2(tmp_path, capsys):
    (tmp_path / "in").mkdir()
    cfg = tmp_path / "c.yaml"
    cfg.write_text("keystates:\n  thetta: 0.3\n")
    assert main(["label", str(tmp_path / "in"), str(tmp_path / "out"), "--config", str(cfg)]) == 2
    assert "keystates.thetta" in capsys.readouterr().err
    assert main(["label", str(tmp_path / "in"), str(tmp_path / "out"), "--set", "run.workers=0"]) == 2


def test_missing_input_exit_1(tmp_path):
    assert main(["label", str(tmp_path / "nope"), str(tmp_path / "out"), "--mock"]) == 1


def test_bad_episode_isolated(synth_dir, tmp_path):
    import shutil

    src = tmp_path / "eps"
    shutil.copytree(synth_dir / "episodes", src)
    bad = src / "zz_broken"
    bad.mkdir()
    (bad / "episode.jsonl").write_text("{not json\n")
    assert main(["label", str(src), str(tmp_path / "out"), "--mock"]) == 1
    entries = json.loads((tmp_path / "out" / "manifest.json").read_text())["episodes"]
    assert [e["status"] for e in entries] == ["ok", "ok", "error"]


def _ks_dirs(root, pred, gt):
    for name, frames in (("pred", pred), ("gt", gt)):
        d = root / name / "ep0"
        d.mkdir(parents=True)
        save_keystates([Keystate(f, 0, 1.0) for f in frames], d / "keystates.tsv")
    return root / "pred", root / "gt"


def test_eval_keystates_hand_case(tmp_path, capsys):
    pred, gt = _ks_dirs(tmp_path, [102, 250, 305], [100, 200, 300])
    assert main(["eval-keystates", str(pred), str(gt), "--eps", "8"]) == 0
    assert f"precision\t8\t{2 / 3!r}" in capsys.readouterr().out


def test_eval_keystates_identical(tmp_path, capsys):
    pred, gt = _ks_dirs(tmp_path, [10, 50], [10, 50])
    assert main(["eval-keystates", str(pred), str(gt)]) == 0
    out = capsys.readouterr().out
    assert "precision\t8\t1.0" in out and "recall\t16\t1.0" in out and "map\t8,16\t1.0" in out


def test_eval_mismatched_ids(tmp_path, capsys):
    pred, gt = _ks_dirs(tmp_path, [10], [10])
    (gt / "ep0").rename(gt / "other")
    assert main(["eval-keystates", str(pred), str(gt)]) == 1
    assert "episode ids differ" in capsys.readouterr().err


def test_eval_grounding_hand_case(tmp_path, capsys):
    (tmp_path / "lab" / "e").mkdir(parents=True)
    (tmp_path / "gt" / "e").mkdir(parents=True)
    save_labels([LabeledSegment(0, 20, 0, ("open the drawer", "pull drawer"), (9, 8)),
                 LabeledSegment(21, 40, 0, ("close the drawer",), (9,))], tmp_path / "lab" / "e" / "labels.tsv")
    (tmp_path / "gt" / "e" / "tasks.tsv").write_text("# frame_index\tobject\ttask\n20\tdrawer\tOpen the drawer\n"
                                                      "40\tdrawer\tClose the drawer\n")
    assert main(["eval-grounding", str(tmp_path / "lab"), str(tmp_path / "gt"), "--mode", "both"]) == 0
    out = capsys.readouterr().out
    assert "accuracy\tAmb\t1.0" in out and "accuracy\tSingle\t0.5" in out


def test_synth_script_and_errors(tmp_path, capsys):
    sc = random_script(5, n_tasks=2)
    save_script(sc, tmp_path / "s.jsonl")
    assert main(["synth", str(tmp_path / "s.jsonl"), str(tmp_path / "a")]) == 0
    assert main(["synth", str(tmp_path / "s.jsonl"), str(tmp_path / "b")]) == 0
    for f in ("episode.jsonl", "episode.masks.bin"):
        a = tmp_path / "a" / "episodes" / sc.episode_id / f
        assert a.read_bytes() == (tmp_path / "b" / "episodes" / sc.episode_id / f).read_bytes()
    (tmp_path / "bad.jsonl").write_text('{"format": "nope"}\n')
    assert main(["synth", str(tmp_path / "bad.jsonl"), str(tmp_path / "c")]) == 1
    assert "header" in capsys.readouterr().err


def test_inspect(synth_dir, labelled, capsys):
    ep = sorted((synth_dir / "episodes").iterdir())[0]
    assert main(["inspect", str(ep), "--limit", "3"]) == 0
    out = capsys.readouterr().out
    assert "frame" in out and "gripper" in out
    assert main(["inspect", str(labelled / ep.name / "labels.tsv")]) == 0
    assert "start_frame" in capsys.readouterr().out
    assert main(["inspect", str(labelled / "manifest.json")]) == 0
    assert main(["inspect", str(synth_dir / "nothing")]) == 1
