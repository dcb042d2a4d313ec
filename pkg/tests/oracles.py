"""Slow, obviously-correct reference implementations used by the tests."""
from collections import deque
from itertools import permutations

import numpy as np


def box_iou(a, b):
    """Box IOU by explicit corner arithmetic."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def pixel_iou(a, b):
    inter = union = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += bool(x and y)
        union += bool(x or y)
    # two empty masks are equal sets, hence IOU 1
    return inter / union if union else 1.0


def flood_fill(grid):
    """4-connected components as sorted lists of pixel sets, largest first."""
    h, w = grid.shape
    seen = np.zeros_like(grid, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if grid[y, x] and not seen[y, x]:
                comp, q = set(), deque([(y, x)])
                seen[y, x] = True
                while q:
                    cy, cx = q.popleft()
                    comp.add((cy, cx))
                    for ny, nx in ((cy + 1, cx), (cy - 1, cx), (cy, cx + 1), (cy, cx - 1)):
                        if 0 <= ny < h and 0 <= nx < w and grid[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            q.append((ny, nx))
                comps.append(comp)
    comps.sort(key=lambda c: (-len(c), min(c)))
    return comps


def dbscan_partition(points, eps, min_pts):
    """Textbook DBSCAN by neighbourhood expansion.

    Returns (core clusters as frozensets, noise set, border points as
    {index: set of clusters it could join}).
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    d = lambda i, j: float(np.sqrt(((pts[i] - pts[j]) ** 2).sum()))
    nbrs = [[j for j in range(n) if d(i, j) <= eps] for i in range(n)]
    core = [len(nb) >= min_pts for nb in nbrs]
    cluster = [-1] * n
    cid = 0
    for i in range(n):
        if not core[i] or cluster[i] >= 0:
            continue
        stack = [i]
        cluster[i] = cid
        while stack:
            p = stack.pop()
            for q in nbrs[p]:
                if core[q] and cluster[q] < 0:
                    cluster[q] = cid
                    stack.append(q)
        cid += 1
    clusters = [frozenset(i for i in range(n) if core[i] and cluster[i] == c) for c in range(cid)]
    border, noise = {}, set()
    for i in range(n):
        if core[i]:
            continue
        options = {cluster[j] for j in nbrs[i] if core[j]}
        if options:
            border[i] = options
        else:
            noise.add(i)
    nearest = {}
    for i in border:
        cands = [j for j in nbrs[i] if core[j]]
        j = min(cands, key=lambda j: (d(i, j), tuple(pts[j])))
        nearest[i] = cluster[j]
    return clusters, noise, border, nearest, cluster


def homography_dlt(src, dst):
    """Homography via SVD null space (different algorithm from the 8x8 solve)."""
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.array(rows, dtype=float))
    H = vt[-1].reshape(3, 3)
    return H / H[2, 2]


def apply_h(H, p):
    v = H @ np.array([p[0], p[1], 1.0])
    return v[:2] / v[2]


def plane_lstsq(points):
    """Plane through points by least squares on z = a x + b y + c (non-vertical planes)."""
    pts = np.asarray(points, dtype=float)
    A = np.c_[pts[:, 0], pts[:, 1], np.ones(len(pts))]
    (a, b, c), *_ = np.linalg.lstsq(A, pts[:, 2], rcond=None)
    n = np.array([a, b, -1.0])
    n /= np.linalg.norm(n)
    d = -c / np.sqrt(a * a + b * b + 1)
    # orient toward the camera at the origin: n . p = d with d < 0
    if d > 0:
        n, d = -n, -d
    return n, d


def grid_label(x, y):
    x, y = min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0)
    col = 0 if x < 1 / 3 else (1 if x < 2 / 3 else 2)
    row = 0 if y < 1 / 3 else (1 if y < 2 / 3 else 2)
    r = ("top", "center", "bottom")[row]
    c = ("left", "center", "right")[col]
    return "center" if r == c == "center" else f"{r} {c}"


def exhaustive_max_matching(pred, gt, eps):
    """Largest one-to-one matching within eps, by trying every assignment."""
    pred, gt = list(pred), list(gt)
    if len(pred) > len(gt):
        pred, gt = gt, pred
    best = 0
    for perm in permutations(range(len(gt)), min(len(pred), len(gt))):
        best = max(best, sum(abs(pred[i] - gt[j]) <= eps for i, j in enumerate(perm)))
    return best


def brute_force_ap(scored, gt, eps):
    """AP from the full precision/recall curve over every score cutoff.

    Matching walks predictions in score order (earlier frame first on ties)
    and takes the closest free ground truth. The area sums, over each recall
    step, the best precision reached at that recall or beyond.
    """
    order = sorted(scored, key=lambda t: (-t[1], t[0]))
    if not gt:
        return 1.0 if not order else 0.0
    free = sorted(gt)
    curve = []  # (recall, precision) after each rank
    tp = 0
    for rank, (frame, _) in enumerate(order, 1):
        near = [g for g in free if abs(g - frame) <= eps]
        if near:
            free.remove(min(near, key=lambda g: (abs(g - frame), g)))
            tp += 1
        curve.append((tp / len(gt), tp / rank))
    ap, prev = 0.0, 0.0
    for r, _ in curve:
        if r > prev:
            ap += (r - prev) * max(p for rr, p in curve if rr >= r)
            prev = r
    return ap
