import pytest
from hypothesis import given
from hypothesis import strategies as st

from demoseg.client import CallableClient
from demoseg.errors import LabelError
from demoseg.keystates import Keystate
from demoseg.labeler import (
    LabeledSegment,
    aggregate_granularity,
    build_object_prompt,
    build_task_list_prompt,
    label_episode,
    label_segment,
    load_labels,
    multiple_choice,
    parse_label_response,
    parse_task_list,
    render_label_response,
    save_labels,
    segment_bounds,
)
from demoseg.registry import ObjectEntry, ObjectRegistry
from demoseg.signals import Observation
from demoseg.synth import RuleClient

LOG = [
    Observation(5, 1, "movement", "pot moved left"),
    Observation(6, 0, "gripper_near", "The gripper was close to pot"),
    Observation(7, 2, "movement", "fork moved right"),
    Observation(40, 1, "movement", "pot moved right"),
]


def _block(prompt):
    return prompt.split("Observations: ```", 1)[1].split("```", 1)[0]


def test_prompt_contains_exactly_the_observation():
    p = build_object_prompt([LOG[0]], (0, 10), 1)
    assert _block(p) == "pot moved left"


def test_prompt_windowing_and_focus():
    p = build_object_prompt(LOG, (0, 10), 1)
    assert _block(p).splitlines() == ["pot moved left", "The gripper was close to pot"]
    with pytest.raises(LabelError, match="nothing to label"):
        build_object_prompt(LOG, (11, 30), 1)


@given(st.integers(0, 3), st.integers(0, 45), st.integers(0, 45))
def test_prompt_lines_come_from_focus_or_gripper(focus, a, b):
    lo, hi = min(a, b), max(a, b)
    try:
        p = build_object_prompt(LOG, (lo, hi), focus)
    except LabelError:
        return
    allowed = {o.text for o in LOG if lo <= o.frame_index <= hi and (o.object_id == focus or o.kind == "gripper_near")}
    assert set(_block(p).splitlines()) <= allowed


def test_task_list_prompt():
    reg = ObjectRegistry((ObjectEntry(0, "pot"), ObjectEntry(1, "stove")))
    assert build_task_list_prompt(reg).endswith(": pot, stove")
    one = build_task_list_prompt(ObjectRegistry((ObjectEntry(0, "pot"),)))
    assert one.endswith(": pot") and not one.endswith(",")


def test_parse_examples():
    raw = '{"tasks":"Open the drawer; Pull the drawer open","confidence":"9,7"}'
    assert parse_label_response(raw) == (["Open the drawer", "Pull the drawer open"], [9.0, 7.0])
    assert parse_label_response("***I think {maybe} this***\n" + raw) == parse_label_response(raw)
    with pytest.raises(LabelError, match="3 tasks but 2"):
        parse_label_response('{"tasks":"a; b; c","confidence":"9,7"}')
    with pytest.raises(LabelError, match="no JSON"):
        parse_label_response("no idea")
    with pytest.raises(LabelError, match="outside"):
        parse_label_response('{"tasks":"a","confidence":"11"}')


task_text = st.text(st.characters(blacklist_characters=';\n\r', blacklist_categories=("Cs",)), min_size=1).map(
    str.strip).filter(bool)


@given(st.lists(st.tuples(task_text, st.integers(0, 10) | st.floats(0, 10)), min_size=1, max_size=5), st.text())
def test_render_parse_identity(pairs, reasoning):
    tasks, confs = [t for t, _ in pairs], [float(c) for _, c in pairs]
    reasoning = reasoning.replace("*", "")
    assert parse_label_response(render_label_response(tasks, confs, reasoning)) == (tasks, confs)


def _moved_left_client():
    def fn(prompt):
        block = _block(prompt)
        if "moved left" in block:
            obj = block.split(" moved left")[0].splitlines()[-1]
            return render_label_response([f"Move the {obj} to the left"], [9])
        return render_label_response(["Do something", "Do another thing"], [7, 4])
    return CallableClient(fn)


def test_label_segment_mock_rule():
    seg = label_segment(LOG, (0, 10), 1, _moved_left_client())
    assert seg.tasks == ("Move the pot to the left",) and not seg.ambiguous


def test_label_segment_confidence_gate():
    with pytest.raises(LabelError, match="no confident label"):
        label_segment(LOG, (30, 45), 1, _moved_left_client(), min_conf=8)
    both = label_segment(LOG, (30, 45), 1, _moved_left_client(), min_conf=None)
    assert both.ambiguous and both.confidences == (7.0, 4.0)


def test_segment_bounds():
    ks = [Keystate(10, 0, 1.0), Keystate(30, 1, 1.0)]
    assert [(s, e) for s, e, _ in segment_bounds(ks, 0)] == [(0, 10), (11, 30)]
    assert segment_bounds([Keystate(0, 0, 1.0)], 0) == []


def test_label_episode_orders_and_collects_errors():
    ks = [Keystate(10, 1, 1.0), Keystate(45, 1, 1.0), Keystate(60, 3, 1.0)]
    segs, errs = label_episode(LOG, ks, 0, _moved_left_client(), min_conf=6, slack=0, max_in_flight=3)
    # (11, 45) only holds "pot moved right": the fallback keeps its 7-confidence guess
    assert [(s.start_frame, s.tasks) for s in segs] == [(0, ("Move the pot to the left",)), (11, ("Do something",))]
    assert [f for f, _ in errs] == [60]


def test_granularity():
    rules = {"tasks": []}
    segs = [LabeledSegment(0, 10, 0, ("Open the drawer",), (9,)),
            LabeledSegment(11, 20, 1, ("Take the pickle",), (9,)),
            LabeledSegment(21, 30, 0, ("Close the drawer",), (9,))]
    out = aggregate_granularity(segs, LOG, RuleClient(rules))
    assert (out.start_frame, out.end_frame) == (0, 30)
    assert out.tasks == ("Open the drawer, then take the pickle, then close the drawer",)
    with pytest.raises(ValueError):
        aggregate_granularity(segs[:1], LOG, RuleClient(rules))


def test_multiple_choice():
    choices = ["Move the pot to the left", "Open the drawer", "Wipe the table"]
    exact = CallableClient(lambda p: render_label_response(["Open the drawer"], [9]))
    assert multiple_choice(LOG, (0, 10), 1, choices, exact) == ["Open the drawer"]
    three = CallableClient(lambda p: render_label_response(choices, [9, 8, 7]))
    assert multiple_choice(LOG, (0, 10), 1, choices, three) == choices[:2]
    off = CallableClient(lambda p: render_label_response(["Dance"], [9]))
    with pytest.raises(LabelError, match="not one of the choices"):
        multiple_choice(LOG, (0, 10), 1, choices, off)


def test_rule_client_contract():
    rules = {"tasks": [{"label": "Move the pot to the left", "match": ["pot moved", "left"]}]}
    c = RuleClient(rules)
    assert parse_label_response(c.complete(build_object_prompt(LOG, (0, 10), 1)))[0] == ["Move the pot to the left"]
    assert "cannot determine" in c.complete("Observations: ``````")
    assert parse_task_list(c.complete(build_task_list_prompt(ObjectRegistry((ObjectEntry(0, "pot"),))))) == [
        "Move the pot to the left"]


def test_label_file_roundtrip(tmp_path):
    segs = [LabeledSegment(0, 10, 1, ("Open the drawer", "Pull it"), (9.0, 6.5)),
            LabeledSegment(11, 40, 0, ("Close the drawer",), (8.0,))]
    save_labels(segs, tmp_path / "l.tsv")
    assert load_labels(tmp_path / "l.tsv") == segs
    assert (tmp_path / "l.tsv").read_text().splitlines()[1] == "0\t10\t1\tOpen the drawer;Pull it\t9,6.5\t1"


def test_segment_invariants():
    with pytest.raises(ValueError):
        LabeledSegment(5, 5, 0, ("a",), (9,))
    with pytest.raises(ValueError):
        LabeledSegment(0, 5, 0, ("a", "b"), (9,))
