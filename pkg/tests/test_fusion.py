import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demoseg.fusion import build_tracks, clean_mask, merge_same_class, refine_static_box, resolve_track_class
from demoseg.numerics import Box, Mask
from demoseg.registry import ObjectEntry, ObjectRegistry, build_registry
from demoseg.stream import Episode, FrameRecord, RawDetection
from demoseg.synth import generate, random_script

DIAG = 200.0


def test_refine_identical_boxes():
    b = Box(10, 10, 20, 20)
    sb = refine_static_box([(b, 0.9)] * 10, DIAG)
    assert sb.box == b and sb.support == 10


def test_refine_drops_outlier():
    rng = np.random.default_rng(0)
    nine = [Box(*(np.array([10, 10, 20, 20]) + rng.uniform(-0.5, 0.5, 4))) for _ in range(9)]
    sb = refine_static_box([(b, 0.9) for b in nine] + [(Box(50, 50, 60, 60), 0.3)], DIAG)
    want = np.mean([b.as_tuple() for b in nine], axis=0)
    assert np.allclose(sb.box.as_tuple(), want, atol=1e-12) and sb.support == 9


def test_refine_summed_confidence_wins():
    # centres spread widely so the MAD step keeps both clusters
    a = [(Box(10, 10, 20, 20), 0.5)] * 4          # sum 2.0
    b = [(Box(40, 10, 50, 20), 0.625)] * 4        # sum 2.5
    sb = refine_static_box(a + b, DIAG, mad_k=100)
    assert sb.box == Box(40, 10, 50, 20)


def test_refine_empty():
    with pytest.raises(ValueError):
        refine_static_box([], DIAG)


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6), st.floats(0.1, 1)), min_size=1, max_size=12),
       st.randoms(use_true_random=False))
def test_refine_permutation_invariant_and_in_hull(jit, rnd):
    boxes = [(Box(10 + dx, 10 + dy, 30 + dx, 30 + dy), c) for dx, dy, c in jit]
    shuffled = boxes[:]
    rnd.shuffle(shuffled)
    a, b = refine_static_box(boxes, DIAG), refine_static_box(shuffled, DIAG)
    assert a == b
    coords = np.array([x.as_tuple() for x, _ in boxes])
    assert (np.array(a.box.as_tuple()) >= coords.min(axis=0) - 1e-9).all()
    assert (np.array(a.box.as_tuple()) <= coords.max(axis=0) + 1e-9).all()


def test_clean_mask_examples(kernel_path):
    single = Mask.from_rect(30, 30, 0, 0, 10, 10)
    assert clean_mask(single) == single
    arr = single.to_array().copy()
    arr[20:22, 20] = True
    arr[25, 25:28] = True  # 5-pixel speck in two parts
    assert clean_mask(Mask.from_array(arr)) == single
    two = single.union(Mask.from_rect(30, 30, 15, 15, 25, 25))
    assert clean_mask(two) == two
    assert clean_mask(Mask(4, 4)).is_empty()


@settings(max_examples=50)
@given(st.lists(st.booleans(), min_size=64, max_size=64), st.floats(0, 1))
def test_clean_mask_shrinks_and_idempotent(bits, frac):
    m = Mask.from_array(np.array(bits).reshape(8, 8))
    c = clean_mask(m, frac)
    assert c.area <= m.area and clean_mask(c, frac) == c


def test_merge_same_class():
    a = Mask.from_rect(10, 10, 0, 0, 3, 3)
    assert merge_same_class([(a, "x")])["x"] == a
    b = Mask.from_rect(10, 10, 5, 5, 7, 7)
    assert merge_same_class([(a, "x"), (b, "x")])["x"].area == a.area + b.area
    c = Mask.from_rect(10, 10, 1, 1, 4, 4)
    assert merge_same_class([(a, "x"), (c, "x")])["x"].area < a.area + c.area


def test_resolve_track_class():
    assert resolve_track_class({"pot": [0.9, 0.8]}) == ("pot", pytest.approx(0.85))
    assert resolve_track_class({"pot": [0.9, 0.2], "pan": [0.6, 0.6]}) == ("pan", pytest.approx(0.6))
    assert resolve_track_class({"pot": [0.5], "pan": [0.5]})[0] == "pan"


def test_build_tracks_reproduces_synthetic_boxes():
    ep, _ = generate(random_script(2, n_tasks=3))
    reg = build_registry(ep)
    tracks = build_tracks(ep, reg)
    assert len(tracks) == len(reg)
    for tr in tracks:
        entry = reg.entries[tr.object_id]
        for pos, fr in enumerate(ep.frames):
            det = next((d for d in fr.detections if d.name in entry.names), None)
            assert tr.present[pos] == (det is not None)
            if det is not None:
                assert tr.boxes[pos] == det.box


def test_build_tracks_absent_and_synonym():
    frames = [FrameRecord(0, [RawDetection("saucepan", Box(0, 0, 4, 4), 0.7)]), FrameRecord(1)]
    ep = Episode("e", (10, 10), frames)
    reg = ObjectRegistry((ObjectEntry(0, "pot", ("saucepan",)), ObjectEntry(1, "ghost")))
    t_pot, t_ghost = build_tracks(ep, reg)
    assert list(t_pot.present) == [True, False] and t_pot.boxes[0] == Box(0, 0, 4, 4)
    assert t_ghost.present_count == 0
