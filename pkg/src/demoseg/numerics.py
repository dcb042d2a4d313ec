"""Geometry and clustering primitives shared by every stage.

Coordinates follow the image convention: x to the right, y down, pixel
``(x, y)`` has its centre at integer coordinates. Camera-frame points use the
pinhole convention (z along the optical axis, away from the camera).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import kernels
from .errors import GeometryError

__all__ = [
    "Box",
    "Mask",
    "Plane",
    "PointCloud",
    "Intrinsics",
    "iou",
    "mask_iou",
    "connected_components",
    "dbscan",
    "fit_plane",
    "fit_quadrilateral",
    "homography_from_corners",
    "project_point",
    "grid_cell",
    "backproject",
    "GRID_LABELS",
]


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(f"invalid box {self.as_tuple()}: need x1<x2 and y1<y2")

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self):
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self):
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def intersection_area(self, other: "Box") -> float:
        w = min(self.x2, other.x2) - max(self.x1, other.x1)
        h = min(self.y2, other.y2) - max(self.y1, other.y1)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def scaled(self, factor: float) -> "Box":
        cx, cy = self.center
        hw, hh = self.width * factor / 2.0, self.height * factor / 2.0
        return Box(cx - hw, cy - hh, cx + hw, cy + hh)

    def translated(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def contains(self, other: "Box") -> bool:
        return (
            self.x1 <= other.x1 and self.y1 <= other.y1 and other.x2 <= self.x2 and other.y2 <= self.y2
        )


class Mask:
    """Binary mask stored as merged row-major runs ``(start, length)``."""

    __slots__ = ("width", "height", "runs")

    def __init__(self, width: int, height: int, runs=None):
        self.width = int(width)
        self.height = int(height)
        if runs is None:
            runs = np.zeros((0, 2), dtype=np.int64)
        runs = np.asarray(runs, dtype=np.int64).reshape(-1, 2)
        if len(runs):
            ends = runs[:, 0] + runs[:, 1]
            if (runs[:, 1] <= 0).any() or runs[0, 0] < 0 or ends[-1] > self.width * self.height:
                raise GeometryError("mask runs out of bounds or empty")
            if (runs[1:, 0] < ends[:-1]).any():
                raise GeometryError("mask runs overlap or are unsorted")
            if (runs[1:, 0] == ends[:-1]).any():
                # canonical form merges touching runs
                runs = kernels.rle_encode(kernels.rle_decode(runs, self.width * self.height))
        self.runs = runs

    @classmethod
    def from_array(cls, arr) -> "Mask":
        arr = np.asarray(arr, dtype=bool)
        h, w = arr.shape
        return cls(w, h, kernels.rle_encode(arr.ravel()))

    @classmethod
    def from_rect(cls, width: int, height: int, x0: int, y0: int, x1: int, y1: int) -> "Mask":
        """Pixels with ``x0 <= x < x1`` and ``y0 <= y < y1``, clipped to the image."""
        x0, x1 = max(0, int(x0)), min(width, int(x1))
        y0, y1 = max(0, int(y0)), min(height, int(y1))
        if x1 <= x0 or y1 <= y0:
            return cls(width, height)
        rows = np.arange(y0, y1, dtype=np.int64)
        if x0 == 0 and x1 == width:
            return cls(width, height, [[y0 * width, (y1 - y0) * width]])
        runs = np.stack([rows * width + x0, np.full(len(rows), x1 - x0)], axis=1)
        return cls(width, height, runs)

    @classmethod
    def from_row_spans(cls, width: int, height: int, spans) -> "Mask":
        """Build from ``(row, first_col, last_col)`` spans sorted by row."""
        runs = [(r * width + c0, c1 - c0 + 1) for r, c0, c1 in spans if c1 >= c0 and 0 <= r < height]
        return cls(width, height, runs)

    def to_array(self) -> np.ndarray:
        flat = kernels.rle_decode(self.runs, self.width * self.height)
        return flat.reshape(self.height, self.width)

    @property
    def area(self) -> int:
        return int(self.runs[:, 1].sum()) if len(self.runs) else 0

    def is_empty(self) -> bool:
        return len(self.runs) == 0

    def bbox(self) -> Optional[Box]:
        """Tight pixel-edge box ``[x_min, x_max + 1) x [y_min, y_max + 1)``."""
        if self.is_empty():
            return None
        arr = self.to_array()
        ys = np.flatnonzero(arr.any(axis=1))
        xs = np.flatnonzero(arr.any(axis=0))
        return Box(float(xs[0]), float(ys[0]), float(xs[-1] + 1), float(ys[-1] + 1))

    def union(self, other: "Mask") -> "Mask":
        _check_same_dims(self, other)
        flat = kernels.rle_decode(self.runs, self.width * self.height)
        flat |= kernels.rle_decode(other.runs, self.width * self.height)
        return Mask(self.width, self.height, kernels.rle_encode(flat))

    def pixel_coords(self):
        """``(xs, ys)`` of every set pixel, row-major order."""
        flat = np.flatnonzero(kernels.rle_decode(self.runs, self.width * self.height))
        return flat % self.width, flat // self.width

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.runs, other.runs)
        )

    def __hash__(self):
        return hash((self.width, self.height, self.runs.tobytes()))

    def __repr__(self):
        return f"Mask({self.width}x{self.height}, area={self.area}, runs={len(self.runs)})"


def _check_same_dims(a: Mask, b: Mask):
    if (a.width, a.height) != (b.width, b.height):
        raise GeometryError(
            f"mask dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


class Plane(NamedTuple):
    normal: np.ndarray
    offset: float

    def distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal - self.offset


@dataclass
class PointCloud:
    points: np.ndarray
    object_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise GeometryError("point cloud contains non-finite coordinates")

    def __len__(self):
        return len(self.points)


class Intrinsics(NamedTuple):
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def default(cls, width: int, height: int, focal_scale: float = 0.8) -> "Intrinsics":
        f = focal_scale * width
        return cls(f, f, width / 2.0, height / 2.0)


# --------------------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    inter = a.intersection_area(b)
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def mask_iou(a: Mask, b: Mask) -> float:
    _check_same_dims(a, b)
    inter = kernels.runs_intersection(a.runs, b.runs)
    union = a.area + b.area - inter
    if union == 0:
        # two empty masks are equal as sets
        return 1.0
    return inter / union


def connected_components(m: Mask) -> list:
    """4-connected components as ``(Mask, area)``, largest first.

    Equal areas keep raster order of their first pixel.
    """
    if m.is_empty():
        return []
    # label only the band of rows the mask occupies
    r0 = int(m.runs[0, 0] // m.width)
    r1 = int((m.runs[-1, 0] + m.runs[-1, 1] - 1) // m.width)
    labels, n = kernels.label_components(m.to_array()[r0 : r1 + 1])
    if n == 1:
        return [(m, m.area)]
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=n + 1)[1:]
    order = sorted(range(n), key=lambda i: (-areas[i], i))
    out = []
    shift = np.array([r0 * m.width, 0], dtype=np.int64)
    for i in order:
        runs = kernels.rle_encode(flat == i + 1) + shift
        out.append((Mask(m.width, m.height, runs), int(areas[i])))
    return out


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Cluster labels per point (``-1`` for noise), Euclidean metric."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    return kernels.dbscan_labels(np.asarray(points, dtype=np.float64), eps, min_pts)


# --------------------------------------------------------------------------
# planes


def _tls_plane(points):
    centroid = points.mean(axis=0)
    _, s, vt = np.linalg.svd(points - centroid, full_matrices=False)
    if len(s) < 3 or s[1] <= 1e-9 * max(s[0], 1e-300):
        raise GeometryError("degenerate point set: points are collinear")
    normal = vt[2]
    return normal / np.linalg.norm(normal), centroid


def _orient_to_camera(normal, centroid):
    d = float(normal @ centroid)
    if d > 0 or (d == 0 and normal[2] > 0):
        normal = -normal
    return Plane(normal, float(normal @ centroid))


def _robust_trim(points, inlier_dist):
    med = np.median(points, axis=0)
    dev = np.abs(points - med)
    mad = np.median(dev, axis=0)
    keep = np.ones(len(points), dtype=bool)
    for c in range(3):
        if mad[c] > 0:
            keep &= 0.6745 * dev[:, c] / mad[c] <= 3.5
        else:
            keep &= dev[:, c] <= inlier_dist
    return points[keep] if keep.sum() >= 3 else points


def fit_plane(cloud, inlier_dist: float = 0.05) -> Plane:
    """Least-squares plane with one inlier refit, normal facing the camera.

    A per-axis median/MAD trim removes gross outliers before the first total
    least-squares fit; the second fit uses every point within ``inlier_dist``
    of the first plane.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    points = points.reshape(-1, 3)
    if len(points) < 3:
        raise GeometryError("need at least 3 points to fit a plane")
    _tls_plane(points)  # collinearity check on the raw input
    normal, centroid = _tls_plane(_robust_trim(points, inlier_dist))
    first = _orient_to_camera(normal, centroid)
    inliers = points[np.abs(first.distance(points)) <= inlier_dist]
    if len(inliers) < 3:
        return first
    try:
        normal, centroid = _tls_plane(inliers)
    except GeometryError:
        return first
    return _orient_to_camera(normal, centroid)


# --------------------------------------------------------------------------
# quadrilateral fitting


def _convex_hull(pts):
    """Monotone chain; returns hull vertices counter-clockwise (y-up sense)."""
    pts = sorted(set(map(tuple, pts)))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def _polygon_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _line_intersection(p1, d1, p2, d2):
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(den) < 1e-12:
        return None, None, None
    w = p2 - p1
    t = (w[0] * d2[1] - w[1] * d2[0]) / den
    s = (w[0] * d1[1] - w[1] * d1[0]) / den
    return p1 + t * d1, t, s


def _reduce_polygon(poly, target=4):
    """Drop edges one at a time, extending neighbours, adding the least area."""
    poly = [np.asarray(p, dtype=np.float64) for p in poly]
    while len(poly) > target:
        n = len(poly)
        best = None
        for i in range(n):
            a, b = poly[i - 1], poly[i]
            c, d = poly[(i + 1) % n], poly[(i + 2) % n]
            x, t, s = _line_intersection(b, b - a, c, c - d)
            if x is None or t <= 0 or s <= 0:
                continue
            added = 0.5 * abs((c[0] - b[0]) * (x[1] - b[1]) - (c[1] - b[1]) * (x[0] - b[0]))
            if best is None or added < best[0]:
                best = (added, i, x)
        if best is None:
            # no edge can be removed by extension: drop the flattest vertex
            areas = [
                abs(
                    (poly[i][0] - poly[i - 1][0]) * (poly[(i + 1) % n][1] - poly[i - 1][1])
                    - (poly[i][1] - poly[i - 1][1]) * (poly[(i + 1) % n][0] - poly[i - 1][0])
                )
                for i in range(n)
            ]
            del poly[int(np.argmin(areas))]
            continue
        _, i, x = best
        j = (i + 1) % n
        poly[i] = x
        del poly[j]
    return np.array(poly)


def _order_clockwise_from_top_left(quad):
    c = quad.mean(axis=0)
    # with y down, increasing atan2 angle sweeps clockwise on screen
    ang = np.arctan2(quad[:, 1] - c[1], quad[:, 0] - c[0])
    quad = quad[np.argsort(ang)]
    start = int(np.argmin(quad[:, 0] + quad[:, 1]))
    return np.roll(quad, -start, axis=0)


def fit_quadrilateral(m: Mask) -> np.ndarray:
    """Four corners (x, y) of an enclosing quadrilateral of the largest component.

    Corners are pixel-centre coordinates ordered clockwise on screen starting
    at the top-left corner.
    """
    comps = connected_components(m)
    if not comps:
        raise GeometryError("cannot fit a quadrilateral to an empty mask")
    largest = comps[0][0]
    segs = kernels.row_segments(largest.runs, largest.width)
    pts = np.concatenate([segs[:, [1, 0]], segs[:, [2, 0]]])
    hull = _convex_hull(pts)
    if len(hull) < 3:
        raise GeometryError("mask component is too thin to fit a quadrilateral")
    quad = _reduce_polygon(hull) if len(hull) > 4 else hull
    if len(quad) == 3:
        # triangle hull: split the longest edge so four corners come out
        edges = [np.linalg.norm(quad[(i + 1) % 3] - quad[i]) for i in range(3)]
        i = int(np.argmax(edges))
        mid = (quad[i] + quad[(i + 1) % 3]) / 2.0
        quad = np.insert(quad, i + 1, mid, axis=0)
    return _order_clockwise_from_top_left(quad)


# --------------------------------------------------------------------------
# homographies


def _collinear(p, q, r, scale):
    cross = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    return abs(cross) <= 1e-12 * max(scale, 1.0)


def homography_from_corners(quad, target) -> np.ndarray:
    """3x3 matrix (``h33 = 1``) mapping the 4 ``quad`` points onto ``target``."""
    src = np.asarray(quad, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(target, dtype=np.float64).reshape(4, 2)
    scale = float(np.ptp(src, axis=0).max() ** 2)
    for i in range(4):
        p, q, r = (src[j] for j in range(4) if j != i)
        if _collinear(p, q, r, scale):
            raise GeometryError("three source corners are collinear")
    A = np.zeros((8, 8))
    rhs = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * k] = u
        rhs[2 * k + 1] = v
    try:
        h = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise GeometryError(f"singular corner configuration: {exc}") from None
    H = np.append(h, 1.0).reshape(3, 3)
    if abs(np.linalg.det(H)) <= 1e-12:
        raise GeometryError("homography is not invertible")
    return H


def project_point(H, p) -> np.ndarray:
    x, y = float(p[0]), float(p[1])
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    if abs(w) < 1e-12:
        raise GeometryError(f"point {p} maps to infinity")
    return np.array(
        [(H[0, 0] * x + H[0, 1] * y + H[0, 2]) / w, (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / w]
    )


# --------------------------------------------------------------------------

_ROWS = ("top", "center", "bottom")
_COLS = ("left", "center", "right")
GRID_LABELS = tuple(
    "center" if (r, c) == ("center", "center") else f"{r} {c}" for r in _ROWS for c in _COLS
)


def grid_cell(p) -> str:
    """Name of the 3x3 cell holding normalised point ``p``; thirds go to the higher cell."""
    x = min(max(float(p[0]), 0.0), 1.0)
    y = min(max(float(p[1]), 0.0), 1.0)
    col = int(x >= 1 / 3) + int(x >= 2 / 3)
    row = int(y >= 1 / 3) + int(y >= 2 / 3)
    return GRID_LABELS[row * 3 + col]


# --------------------------------------------------------------------------


def remove_statistical_outliers(points, k: int = 8, std_ratio: float = 2.0):
    """Boolean keep-mask: drop points whose mean k-NN distance exceeds mean + std_ratio*std."""
    points = np.asarray(points, dtype=np.float64)
    if k <= 0 or len(points) <= k:
        return np.ones(len(points), dtype=bool)
    md = kernels.knn_mean_distance(points, k)
    return md <= md.mean() + std_ratio * md.std()


def backproject(
    depth,
    intrinsics: Intrinsics,
    mask: Optional[Mask] = None,
    stride: int = 1,
    outlier_k: int = 8,
    outlier_std: float = 2.0,
) -> PointCloud:
    """Lift (masked) depth pixels into camera-frame points.

    Pixels are subsampled on a ``stride`` grid (``x % stride == 0`` and
    ``y % stride == 0``); ``outlier_k=0`` disables outlier removal.
    """
    depth = np.asarray(depth)
    h, w = depth.shape
    if intrinsics.fx <= 0 or intrinsics.fy <= 0:
        raise GeometryError("focal lengths must be positive")
    if mask is None:
        ys, xs = np.mgrid[0:h, 0:w]
        xs, ys = xs.ravel(), ys.ravel()
    else:
        if (mask.width, mask.height) != (w, h):
            raise GeometryError("mask and depth map sizes differ")
        xs, ys = mask.pixel_coords()
    if stride > 1:
        keep = (xs % stride == 0) & (ys % stride == 0)
        xs, ys = xs[keep], ys[keep]
    z = depth[ys, xs].astype(np.float64)
    pts = np.stack(
        [(xs - intrinsics.cx) / intrinsics.fx * z, (ys - intrinsics.cy) / intrinsics.fy * z, z], axis=1
    )
    if outlier_k > 0 and len(pts) > outlier_k:
        pts = pts[remove_statistical_outliers(pts, outlier_k, outlier_std)]
    return PointCloud(pts)


def box_center_array(boxes: Sequence[Box]) -> np.ndarray:
    return np.array([b.center for b in boxes], dtype=np.float64).reshape(-1, 2)
