"""Hot inner loops, each in a numba version and a numpy version.

The public names at the bottom of the module are bound to one of the two
implementations depending on :data:`demoseg._accel.USE_NUMBA`. Both
implementations stay importable (``NUMBA`` / ``NUMPY`` tables) so tests and
the benchmark can compare them directly.

Run-length encodings are ``(n, 2)`` int64 arrays of ``(start, length)`` over
row-major pixel order, sorted and with adjacent runs merged.
"""
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ._accel import HAVE_NUMBA, USE_NUMBA, njit

__all__ = [
    "rle_encode",
    "rle_decode",
    "runs_intersection",
    "runs_min_sqdist",
    "label_components",
    "dbscan_labels",
    "knn_mean_distance",
    "row_segments",
    "NUMBA",
    "NUMPY",
]


# --------------------------------------------------------------------------
# run-length encoding


@njit
def _rle_encode_nb(flat):
    n = flat.shape[0]
    count = 0
    prev = False
    for i in range(n):
        v = flat[i]
        if v and not prev:
            count += 1
        prev = v
    runs = np.empty((count, 2), dtype=np.int64)
    k = -1
    prev = False
    for i in range(n):
        v = flat[i]
        if v:
            if not prev:
                k += 1
                runs[k, 0] = i
                runs[k, 1] = 1
            else:
                runs[k, 1] += 1
        prev = v
    return runs


def _rle_encode_np(flat):
    flat = np.asarray(flat, dtype=bool)
    padded = np.concatenate(([False], flat, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts = edges[0::2]
    lengths = edges[1::2] - starts
    return np.stack([starts, lengths], axis=1).astype(np.int64)


@njit
def _rle_decode_nb(runs, size):
    out = np.zeros(size, dtype=np.bool_)
    for k in range(runs.shape[0]):
        s = runs[k, 0]
        for i in range(s, s + runs[k, 1]):
            out[i] = True
    return out


def _rle_decode_np(runs, size):
    out = np.zeros(size, dtype=bool)
    if len(runs) == 0:
        return out
    # +1 at each start, -1 after each end, cumulative sum marks covered pixels
    delta = np.zeros(size + 1, dtype=np.int32)
    np.add.at(delta, runs[:, 0], 1)
    np.add.at(delta, runs[:, 0] + runs[:, 1], -1)
    return np.cumsum(delta[:-1]) > 0


# --------------------------------------------------------------------------
# run-set arithmetic


@njit
def _runs_intersection_nb(a, b):
    i = 0
    j = 0
    total = 0
    while i < a.shape[0] and j < b.shape[0]:
        a0 = a[i, 0]
        a1 = a0 + a[i, 1]
        b0 = b[j, 0]
        b1 = b0 + b[j, 1]
        lo = max(a0, b0)
        hi = min(a1, b1)
        if hi > lo:
            total += hi - lo
        if a1 < b1:
            i += 1
        else:
            j += 1
    return total


def _runs_intersection_np(a, b):
    if len(a) == 0 or len(b) == 0:
        return 0
    # coverage(x) = number of b pixels below x; runs are sorted and disjoint
    b0 = b[:, 0]
    cum = np.concatenate(([0], np.cumsum(b[:, 1])))

    def coverage(x):
        i = np.searchsorted(b0, x, side="right") - 1
        inside = np.minimum(x - b0[np.maximum(i, 0)], b[np.maximum(i, 0), 1])
        return np.where(i < 0, 0, cum[np.maximum(i, 0)] + inside)

    return int((coverage(a[:, 0] + a[:, 1]) - coverage(a[:, 0])).sum())


@njit
def _row_segments_nb(runs, width):
    # split runs at row boundaries -> (row, first_col, last_col)
    count = 0
    for k in range(runs.shape[0]):
        s = runs[k, 0]
        e = s + runs[k, 1] - 1
        count += e // width - s // width + 1
    segs = np.empty((count, 3), dtype=np.int64)
    m = 0
    for k in range(runs.shape[0]):
        s = runs[k, 0]
        e = s + runs[k, 1] - 1
        r0 = s // width
        r1 = e // width
        for r in range(r0, r1 + 1):
            c0 = s - r * width if r == r0 else 0
            c1 = e - r * width if r == r1 else width - 1
            segs[m, 0] = r
            segs[m, 1] = c0
            segs[m, 2] = c1
            m += 1
    return segs


@njit
def _runs_min_sqdist_nb(a, b, width):
    sa = _row_segments_nb(a, width)
    sb = _row_segments_nb(b, width)
    best = -1
    for i in range(sa.shape[0]):
        for j in range(sb.shape[0]):
            dy = sa[i, 0] - sb[j, 0]
            dy2 = dy * dy
            if best >= 0 and dy2 >= best:
                continue
            dx = 0
            if sb[j, 1] > sa[i, 2]:
                dx = sb[j, 1] - sa[i, 2]
            elif sa[i, 1] > sb[j, 2]:
                dx = sa[i, 1] - sb[j, 2]
            d = dx * dx + dy2
            if best < 0 or d < best:
                best = d
                if best == 0:
                    return 0
    return best


def _row_segments_np(runs, width):
    if len(runs) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    s = runs[:, 0]
    e = s + runs[:, 1] - 1
    r0, r1 = s // width, e // width
    reps = r1 - r0 + 1
    owner = np.repeat(np.arange(len(runs)), reps)
    rows = r0[owner] + np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
    c0 = np.where(rows == r0[owner], s[owner] - rows * width, 0)
    c1 = np.where(rows == r1[owner], e[owner] - rows * width, width - 1)
    return np.stack([rows, c0, c1], axis=1).astype(np.int64)


def _runs_min_sqdist_np(a, b, width):
    sa = _row_segments_np(a, width)
    sb = _row_segments_np(b, width)
    if len(sa) == 0 or len(sb) == 0:
        return -1
    dy = sa[:, 0][:, None] - sb[:, 0][None, :]
    gap_right = sb[:, 1][None, :] - sa[:, 2][:, None]
    gap_left = sa[:, 1][:, None] - sb[:, 2][None, :]
    dx = np.maximum(0, np.maximum(gap_right, gap_left))
    return int((dx * dx + dy * dy).min())


# --------------------------------------------------------------------------
# 4-connected component labelling


@njit
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@njit
def _label_components_nb(grid):
    h, w = grid.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent = np.zeros(h * w + 1, dtype=np.int32)
    nxt = 1
    for y in range(h):
        for x in range(w):
            if not grid[y, x]:
                continue
            up = labels[y - 1, x] if y > 0 else 0
            left = labels[y, x - 1] if x > 0 else 0
            if up == 0 and left == 0:
                parent[nxt] = nxt
                labels[y, x] = nxt
                nxt += 1
            elif up != 0 and left != 0:
                ru = _find(parent, up)
                rl = _find(parent, left)
                lo = min(ru, rl)
                parent[ru] = lo
                parent[rl] = lo
                labels[y, x] = lo
            else:
                labels[y, x] = up if up != 0 else left
    # relabel roots in raster order of first pixel
    remap = np.zeros(nxt, dtype=np.int32)
    n = 0
    for y in range(h):
        for x in range(w):
            v = labels[y, x]
            if v == 0:
                continue
            r = _find(parent, v)
            if remap[r] == 0:
                n += 1
                remap[r] = n
            labels[y, x] = remap[r]
    return labels, n


_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _label_components_np(grid):
    # ndimage already numbers components by first pixel in raster order
    labels, n = ndimage.label(grid, structure=_FOUR)
    return labels.astype(np.int32), int(n)


# --------------------------------------------------------------------------
# DBSCAN
#
# Core points and the clusters they form are defined by the usual
# eps-neighbourhood (self included). A border point joins the cluster of its
# nearest core neighbour, ties broken by the lexicographically smallest core
# coordinates, so the partition does not depend on input order. Cluster ids
# are numbered by first appearance of a core point in input order.


@njit
def _lex_less(points, i, j):
    for c in range(points.shape[1]):
        if points[i, c] < points[j, c]:
            return True
        if points[i, c] > points[j, c]:
            return False
    return False


@njit
def _dbscan_nb(points, eps, min_pts):
    n = points.shape[0]
    d = points.shape[1]
    dist = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        dist[i, i] = 0.0
        for j in range(i + 1, n):
            s = 0.0
            for c in range(d):
                t = points[i, c] - points[j, c]
                s += t * t
            v = np.sqrt(s)
            dist[i, j] = v
            dist[j, i] = v
    core = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        cnt = 0
        for j in range(n):
            if dist[i, j] <= eps:
                cnt += 1
        core[i] = cnt >= min_pts
    parent = np.arange(n).astype(np.int32)
    for i in range(n):
        if not core[i]:
            continue
        for j in range(i + 1, n):
            if core[j] and dist[i, j] <= eps:
                ri = _find(parent, i)
                rj = _find(parent, j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    labels = np.full(n, -1, dtype=np.int64)
    root_label = np.full(n, -1, dtype=np.int64)
    nxt = 0
    for i in range(n):
        if core[i]:
            r = _find(parent, i)
            if root_label[r] < 0:
                root_label[r] = nxt
                nxt += 1
            labels[i] = root_label[r]
    for i in range(n):
        if core[i]:
            continue
        best = -1
        for j in range(n):
            if not core[j] or dist[i, j] > eps:
                continue
            if best < 0 or dist[i, j] < dist[i, best] or (
                dist[i, j] == dist[i, best] and _lex_less(points, j, best)
            ):
                best = j
        if best >= 0:
            labels[i] = labels[best]
    return labels


def _dbscan_np(points, eps, min_pts):
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    near = dist <= eps
    core = near.sum(axis=1) >= min_pts
    adj = near & core[:, None] & core[None, :]
    # connected components of the core graph via repeated min-label spreading
    comp = np.where(core, np.arange(n), n)
    while True:
        spread = np.where(adj, comp[None, :], n).min(axis=1)
        new = np.where(core, np.minimum(comp, spread), n)
        if np.array_equal(new, comp):
            break
        comp = new
    labels = np.full(n, -1, dtype=np.int64)
    order = {}
    for i in range(n):
        if core[i]:
            labels[i] = order.setdefault(comp[i], len(order))
    for i in np.flatnonzero(~core):
        cand = np.flatnonzero(core & near[i])
        if len(cand) == 0:
            continue
        keys = [(dist[i, j], tuple(points[j])) for j in cand]
        labels[i] = labels[cand[min(range(len(cand)), key=keys.__getitem__)]]
    return labels


# --------------------------------------------------------------------------
# k-nearest-neighbour mean distance (statistical outlier removal)


@njit
def _knn_mean_distance_nb(points, k):
    n = points.shape[0]
    out = np.zeros(n, dtype=np.float64)
    kk = min(k, n - 1)
    if kk <= 0:
        return out
    best = np.empty(kk, dtype=np.float64)
    for i in range(n):
        for m in range(kk):
            best[m] = np.inf
        for j in range(n):
            if j == i:
                continue
            s = 0.0
            for c in range(points.shape[1]):
                t = points[i, c] - points[j, c]
                s += t * t
            if s < best[kk - 1]:
                # insertion into the sorted k-best list
                m = kk - 1
                while m > 0 and best[m - 1] > s:
                    best[m] = best[m - 1]
                    m -= 1
                best[m] = s
        acc = 0.0
        for m in range(kk):
            acc += np.sqrt(best[m])
        out[i] = acc / kk
    return out


def _knn_mean_distance_np(points, k):
    n = len(points)
    kk = min(k, n - 1)
    if kk <= 0:
        return np.zeros(n)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    return dist[:, 1:].mean(axis=1)


# --------------------------------------------------------------------------

_KNN_BRUTE_MAX = 256


def _knn_mean_distance_mixed(points, k):
    # the quadratic loop only wins on small clouds; beyond that the k-d tree does
    if len(points) <= _KNN_BRUTE_MAX:
        return _knn_mean_distance_nb(points, k)
    return _knn_mean_distance_np(points, k)


NUMPY = {
    "rle_encode": _rle_encode_np,
    "rle_decode": _rle_decode_np,
    "runs_intersection": _runs_intersection_np,
    "runs_min_sqdist": _runs_min_sqdist_np,
    "label_components": _label_components_np,
    "dbscan_labels": _dbscan_np,
    "knn_mean_distance": _knn_mean_distance_np,
    "row_segments": _row_segments_np,
}

NUMBA = (
    {
        "rle_encode": _rle_encode_nb,
        "rle_decode": _rle_decode_nb,
        "runs_intersection": _runs_intersection_nb,
        "runs_min_sqdist": _runs_min_sqdist_nb,
        "label_components": _label_components_nb,
        "dbscan_labels": _dbscan_nb,
        "knn_mean_distance": _knn_mean_distance_mixed,
        "row_segments": _row_segments_nb,
    }
    if HAVE_NUMBA
    else dict(NUMPY)
)

_ACTIVE = NUMBA if USE_NUMBA else NUMPY


def rle_encode(flat):
    """Encode a flat boolean array into merged ``(start, length)`` runs."""
    return _ACTIVE["rle_encode"](np.ascontiguousarray(flat, dtype=np.bool_))


def rle_decode(runs, size):
    return _ACTIVE["rle_decode"](np.ascontiguousarray(runs, dtype=np.int64).reshape(-1, 2), int(size))


def runs_intersection(a, b):
    """Number of pixels covered by both run sets."""
    return int(_ACTIVE["runs_intersection"](a, b))


def runs_min_sqdist(a, b, width):
    """Squared minimum distance between pixel centres of two run sets, -1 if either is empty."""
    if len(a) == 0 or len(b) == 0:
        return -1
    return int(_ACTIVE["runs_min_sqdist"](a, b, int(width)))


def label_components(grid):
    labels, n = _ACTIVE["label_components"](np.ascontiguousarray(grid, dtype=np.bool_))
    return labels, int(n)


def dbscan_labels(points, eps, min_pts):
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    return _ACTIVE["dbscan_labels"](points, float(eps), int(min_pts))


def knn_mean_distance(points, k):
    return _ACTIVE["knn_mean_distance"](np.ascontiguousarray(points, dtype=np.float64), int(k))


def row_segments(runs, width):
    """Split runs at row boundaries into ``(row, first_col, last_col)`` triples."""
    runs = np.ascontiguousarray(runs, dtype=np.int64).reshape(-1, 2)
    return _ACTIVE["row_segments"](runs, int(width))
