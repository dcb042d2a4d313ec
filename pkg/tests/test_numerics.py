import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import numerics_suite
import oracles
from demoseg import kernels
from demoseg.errors import GeometryError
from demoseg.numerics import (
    GRID_LABELS,
    Box,
    Intrinsics,
    Mask,
    backproject,
    connected_components,
    dbscan,
    fit_plane,
    fit_quadrilateral,
    grid_cell,
    homography_from_corners,
    iou,
    mask_iou,
    project_point,
)

UNIT = [(0, 0), (1, 0), (1, 1), (0, 1)]


# ---------------------------------------------------------------- examples


def test_iou_examples():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 5, 6, 6)) == 0.0
    assert iou(a, Box(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)


def test_mask_iou_examples(kernel_path):
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    m = Mask.from_array(a)
    assert mask_iou(m, m) == 1.0
    assert mask_iou(m, Mask.from_array(~a)) == 0.0
    b = np.zeros((4, 4), bool)
    b[0, 3] = b[1, 3] = True
    assert mask_iou(m, Mask.from_array(b)) == pytest.approx(1 / 5, abs=1e-15)
    with pytest.raises(GeometryError):
        mask_iou(m, Mask(3, 4))


def test_components_examples(kernel_path):
    blob = Mask.from_rect(10, 10, 2, 2, 6, 6)
    assert len(connected_components(blob)) == 1
    diag = np.zeros((3, 3), bool)
    diag[0, 0] = diag[1, 1] = True
    assert [a for _, a in connected_components(Mask.from_array(diag))] == [1, 1]
    g = np.zeros((8, 8), bool)
    g[0:4, 0] = True
    g[3, 0:3] = True  # L-shape, 6 pixels
    g[7, 7] = True
    comps = connected_components(Mask.from_array(g))
    assert [a for _, a in comps] == [6, 1]
    assert comps[0][0].to_array()[3, 2] and comps[1][0].to_array()[7, 7]


def test_dbscan_examples(kernel_path):
    assert list(dbscan(np.zeros((5, 2)), 0.1, 1)) == [0] * 5
    assert list(dbscan([[1.0, 2.0]], 0.5, 2)) == [-1]
    labels = dbscan([0, 0.1, 0.2, 10, 10.1], 0.5, 2)
    assert labels[0] == labels[1] == labels[2] != labels[3] == labels[4]
    assert (labels >= 0).all()
    with pytest.raises(ValueError):
        dbscan([0.0], 0.0, 1)


def test_fit_plane_examples():
    xy = np.array([[x, y] for x in range(4) for y in range(4)], float)
    pts = np.c_[xy, np.ones(len(xy))]
    plane = fit_plane(pts)
    assert np.allclose(plane.normal, [0, 0, -1], atol=1e-12)
    assert plane.offset == pytest.approx(-1.0, abs=1e-12)
    noisy = np.vstack([pts, [[1.5, 1.5, 50.0]]])
    p2 = fit_plane(noisy, inlier_dist=0.05)
    assert np.allclose(p2.normal, plane.normal, atol=1e-6)
    assert p2.offset == pytest.approx(plane.offset, abs=1e-6)
    with pytest.raises(GeometryError):
        fit_plane([[0, 0, 1], [1, 1, 1], [2, 2, 1]])


def test_fit_quadrilateral_examples(kernel_path):
    m = Mask.from_rect(40, 30, 5, 4, 25, 20)
    quad = fit_quadrilateral(m)
    assert np.allclose(quad, [[5, 4], [24, 4], [24, 19], [5, 19]])
    # rotated square: rasterise a known quad, recover it within 1 px
    true = np.array([[30.0, 8.0], [52.0, 30.0], [30.0, 52.0], [8.0, 30.0]])
    ys, xs = np.mgrid[0:60, 0:60]
    inside = (np.abs(xs - 30) + np.abs(ys - 30)) <= 22
    got = fit_quadrilateral(Mask.from_array(inside))
    # clockwise from top-left: the top corner comes first for a diamond
    for corner in true:
        assert np.min(np.linalg.norm(got - corner, axis=1)) <= 1.0
    with pytest.raises(GeometryError):
        fit_quadrilateral(Mask(5, 5))


def test_homography_examples(rng):
    assert np.allclose(homography_from_corners(UNIT, UNIT), np.eye(3), atol=1e-12)
    H = np.array([[1.1, 0.1, 3.0], [0.05, 0.9, -2.0], [0.01, 0.02, 1.0]])
    quad = [oracles.apply_h(np.linalg.inv(H), p) for p in UNIT]
    got = homography_from_corners(quad, UNIT)
    for q, t in zip(quad, UNIT):
        assert np.abs(project_point(got, q) - t).max() < 1e-9
    with pytest.raises(GeometryError):
        homography_from_corners([(0, 0), (1, 1), (2, 2), (0, 1)], UNIT)


def test_project_point_examples(rng):
    assert np.allclose(project_point(np.eye(3), (3.5, -2)), (3.5, -2))
    T = np.array([[1, 0, 4.0], [0, 1, -1.0], [0, 0, 1]])
    assert np.allclose(project_point(T, (1, 1)), (5, 0))
    H = rng.normal(size=(3, 3))
    H[2] = [0.1, 0.2, 1.0]
    p = rng.normal(size=2)
    assert np.abs(project_point(H, p) - oracles.apply_h(H, p)).max() < 1e-12
    with pytest.raises(GeometryError):
        project_point(np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0.0]]), (0, 0))


def test_grid_cell_examples():
    assert grid_cell((0.5, 0.5)) == "center"
    assert grid_cell((0.1, 0.9)) == "bottom left"
    assert grid_cell((1 / 3, 2 / 3)) == "bottom center"
    assert grid_cell((-3, 7)) == "bottom left"


def test_backproject_examples(kernel_path):
    intr = Intrinsics(7.0, 9.0, 2.0, 1.0)
    depth = np.zeros((3, 5))
    depth[1, 2] = 2.0
    m = Mask.from_rect(5, 3, 2, 1, 3, 2)
    assert np.allclose(backproject(depth, intr, m, outlier_k=0).points, [[0, 0, 2]])
    flat = np.full((12, 16), 0.7)
    cloud = backproject(flat, Intrinsics.default(16, 12), stride=2)
    assert np.allclose(fit_plane(cloud).normal, [0, 0, -1], atol=1e-9)
    d = np.arange(9, dtype=float).reshape(3, 3) + 1
    pts = backproject(d, intr, stride=1, outlier_k=0).points
    want = [((u - 2) / 7 * d[v, u], (v - 1) / 9 * d[v, u], d[v, u]) for v in range(3) for u in range(3)]
    assert np.allclose(pts, want, atol=1e-15)


def test_backproject_count_matches_stride():
    depth = np.ones((20, 30))
    m = Mask.from_rect(30, 20, 3, 2, 27, 18)
    for stride in (1, 2, 3):
        cloud = backproject(depth, Intrinsics.default(30, 20), m, stride=stride, outlier_k=0)
        xs, ys = m.pixel_coords()
        assert len(cloud) == int(((xs % stride == 0) & (ys % stride == 0)).sum())


def test_tilted_plane_normal():
    n = np.array([0.2, -0.3, -1.0])
    n /= np.linalg.norm(n)
    xy = np.random.default_rng(3).uniform(-1, 1, (200, 2))
    z = (-2.0 - n[0] * xy[:, 0] - n[1] * xy[:, 1]) / n[2]
    plane = fit_plane(np.c_[xy, z])
    ang = math.acos(min(1.0, abs(float(plane.normal @ n))))
    assert ang < 1e-6 and plane.offset < 0


# ---------------------------------------------------------------- oracle batches


@pytest.mark.parametrize("name", sorted(numerics_suite.CHECKS))
def test_oracle_batch(name, kernel_path):
    n, err, bad = numerics_suite.CHECKS[name](np.random.default_rng(7), 300)
    assert bad == 0 and err < 1e-9


# ---------------------------------------------------------------- properties

coord = st.floats(0, 50, allow_nan=False)


@st.composite
def boxes(draw):
    x1, y1 = draw(coord), draw(coord)
    return Box(x1, y1, x1 + draw(st.floats(0.1, 30)), y1 + draw(st.floats(0.1, 30)))


@given(boxes(), boxes())
def test_iou_symmetric_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a) and 0.0 <= v <= 1.0
    assert iou(a, a) == 1.0


@st.composite
def mask_pair(draw):
    h, w = draw(st.integers(1, 8)), draw(st.integers(1, 8))
    bits = st.lists(st.booleans(), min_size=h * w, max_size=h * w)
    a = np.array(draw(bits)).reshape(h, w)
    b = np.array(draw(bits)).reshape(h, w)
    return a, b


@given(mask_pair())
def test_mask_iou_properties(pair):
    a, b = (Mask.from_array(x) for x in pair)
    v = mask_iou(a, b)
    assert v == mask_iou(b, a) and 0.0 <= v <= 1.0
    assert (v == 1.0) == bool(np.array_equal(pair[0], pair[1]))


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=25),
       st.floats(0.5, 4.0), st.integers(1, 4), st.randoms(use_true_random=False))
def test_dbscan_permutation_invariant(pts, eps, min_pts, rnd):
    pts = np.array(pts, float)
    perm = list(range(len(pts)))
    rnd.shuffle(perm)
    a = dbscan(pts, eps, min_pts)
    b = dbscan(pts[perm], eps, min_pts)

    def canon(labels, order):
        groups = {}
        for pos, lab in zip(order, labels):
            if lab >= 0:
                groups.setdefault(int(lab), set()).add(pos)
        return sorted(map(sorted, groups.values()))

    assert canon(a, range(len(pts))) == canon(b, perm)


def test_grid_partition_lattice():
    counts = dict.fromkeys(GRID_LABELS, 0)
    k = 300
    for i in range(k):
        for j in range(k):
            counts[grid_cell((i / (k - 1), j / (k - 1)))] += 1
    assert sum(counts.values()) == k * k
    assert max(counts.values()) - min(counts.values()) <= 2 * k


@settings(max_examples=50)
@given(st.lists(st.floats(-0.3, 0.3), min_size=8, max_size=8))
def test_homography_reproduces_corners(jitter):
    quad = np.array(UNIT, float) * 10 + np.array(jitter).reshape(4, 2)
    H = homography_from_corners(quad, UNIT)
    for q, t in zip(quad, UNIT):
        assert np.abs(project_point(H, q) - t).max() < 1e-9


# ---------------------------------------------------------------- kernels


def test_kernel_tables_agree(rng):
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 16, 2))
        grid = rng.random((h, w)) < rng.random()
        other = rng.random((h, w)) < rng.random()
        flat = grid.ravel()
        ra = kernels.NUMPY["rle_encode"](flat)
        rb = kernels.NUMPY["rle_encode"](other.ravel())
        assert np.array_equal(ra, kernels.NUMBA["rle_encode"](flat))
        assert np.array_equal(kernels.NUMBA["rle_decode"](ra, h * w), flat)
        assert np.array_equal(kernels.NUMPY["rle_decode"](ra, h * w), flat)
        assert kernels.NUMBA["runs_intersection"](ra, rb) == kernels.NUMPY["runs_intersection"](ra, rb)
        assert np.array_equal(kernels.NUMBA["row_segments"](ra, w), kernels.NUMPY["row_segments"](ra, w))
        if len(ra) and len(rb):
            assert kernels.NUMBA["runs_min_sqdist"](ra, rb, w) == kernels.NUMPY["runs_min_sqdist"](ra, rb, w)
        la, na = kernels.NUMBA["label_components"](grid)
        lb, nb = kernels.NUMPY["label_components"](grid)
        assert na == nb
        assert np.array_equal(la > 0, lb > 0)
        pts = rng.uniform(0, 3, (int(rng.integers(1, 30)), 2))
        assert np.array_equal(kernels.NUMBA["dbscan_labels"](pts, 0.6, 3), kernels.NUMPY["dbscan_labels"](pts, 0.6, 3))
        assert np.allclose(kernels.NUMBA["knn_mean_distance"](pts, 4), kernels.NUMPY["knn_mean_distance"](pts, 4),
                           atol=1e-12)


def test_min_sqdist_brute(kernel_path, rng):
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(1, 10, 2))
        a = rng.random((h, w)) < 0.2
        b = rng.random((h, w)) < 0.2
        if not a.any() or not b.any():
            continue
        pa, pb = np.argwhere(a), np.argwhere(b)
        want = int(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2).min())
        got = kernels.runs_min_sqdist(Mask.from_array(a).runs, Mask.from_array(b).runs, w)
        assert got == want


def test_env_flag_selects_numpy(tmp_path):
    import subprocess
    import sys

    code = "from demoseg import kernels; print(kernels._ACTIVE is kernels.NUMPY)"
    env = {"DEMOSEG_DISABLE_NUMBA": "1", "PATH": "/usr/bin:/bin"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "True"
