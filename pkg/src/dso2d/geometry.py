"""Planar shape decoding, polygon measures and point-set metrics.

Polygons and point sets are plain ``(n, 2)`` float arrays. Polygons are
counter-clockwise and implicitly closed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import seeding
from .errors import DecodeError, GeometryError, InputError

AREA_EPS = 1e-12
COLLINEAR_EPS = 1e-12
MAX_RADIUS = 1e6  # beyond this a decoded shape is treated as garbage


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def decode_shape(latent, K: int | None = None, r_min: float = 0.05) -> np.ndarray:
    """Star-shaped polygon with vertex i at angle 2*pi*i/K, radius r_min + softplus(latent_i)."""
    latent = np.asarray(latent, dtype=np.float64).ravel()
    K = latent.size if K is None else K
    if latent.size != K:
        raise InputError(f"latent has {latent.size} values, expected {K}")
    if r_min <= 0:
        raise InputError("r_min must be positive")
    if not np.isfinite(latent).all():
        raise DecodeError("latent contains non-finite values")
    radii = r_min + softplus(latent)
    if radii.max() > MAX_RADIUS:
        raise DecodeError(f"radius {radii.max():.3g} exceeds {MAX_RADIUS:g}")
    ang = 2.0 * np.pi * np.arange(K) / K
    return np.stack([radii * np.cos(ang), radii * np.sin(ang)], axis=1)


def encode_radii(radii, r_min: float = 0.05) -> np.ndarray:
    """Inverse of the radial part of decode_shape."""
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(radii <= r_min):
        raise InputError("every radius must exceed r_min")
    return softplus_inv(radii - r_min)


def check_polygon(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 3:
        raise GeometryError(f"polygon needs >= 3 vertices of dim 2, got shape {p.shape}")
    if not np.isfinite(p).all():
        raise GeometryError("polygon has non-finite coordinates")
    return p


def signed_area(p) -> float:
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def centroid_area(p) -> tuple[np.ndarray, float]:
    """Centre of mass and area of a uniform-density polygon (shoelace)."""
    p = check_polygon(p)
    x, y = p[:, 0], p[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    if abs(a) <= AREA_EPS:
        raise GeometryError(f"degenerate polygon (area {a:.3e})")
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy]), abs(a)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> np.ndarray:
    """CCW hull by monotone chain, starting at the lexicographically smallest point.

    Collinear boundary points are dropped.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise GeometryError("convex hull needs at least 3 points")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    scale = max(float(np.ptp(pts[:, 0])), float(np.ptp(pts[:, 1])), 1e-300)
    eps = COLLINEAR_EPS * scale * scale
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= eps:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= eps:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise GeometryError("all points are collinear")
    return np.array(hull)


def diameter(p) -> float:
    d = p[:, None, :] - p[None, :, :]
    return float(np.sqrt((d * d).sum(-1).max()))


def perimeter(p) -> float:
    return float(np.linalg.norm(np.roll(p, -1, axis=0) - p, axis=1).sum())


def sample_boundary(p, N: int, seed: int, stratified: bool = True) -> np.ndarray:
    """N points uniform by arc length; stratified draws put one point in each arc cell."""
    p = check_polygon(p)
    if N < 2:
        raise InputError("need at least 2 samples")
    rng = seeding.generator(seed)
    seg = np.roll(p, -1, axis=0) - p
    lengths = np.linalg.norm(seg, axis=1)
    total = lengths.sum()
    if total <= 0:
        raise GeometryError("zero-length boundary")
    u = rng.random(N)
    s = (np.arange(N) + u) / N * total if stratified else np.sort(u) * total
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(p) - 1)
    frac = (s - cum[idx]) / np.where(lengths[idx] > 0, lengths[idx], 1.0)
    return p[idx] + frac[:, None] * seg[idx]


def _check_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2 or len(a) == 0:
        raise InputError("point set must be a non-empty (n, 2) array")
    return a


def nn_dist(a, b) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest neighbour in ``b``."""
    return cKDTree(b).query(a, k=1)[0]


def chamfer(a, b) -> float:
    """Symmetric mean-of-means nearest-neighbour distance, halved."""
    a, b = _check_points(a), _check_points(b)
    return 0.5 * (float(nn_dist(a, b).mean()) + float(nn_dist(b, a).mean()))


def fscore(a, b, tau: float = 0.05) -> float:
    a, b = _check_points(a), _check_points(b)
    if tau <= 0:
        raise InputError("tau must be positive")
    precision = float((nn_dist(a, b) < tau).mean())
    recall = float((nn_dist(b, a) < tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def normalize_unit_box(p) -> np.ndarray:
    """Isotropically fit the bounding box into [0, 1]^2, centred on the shorter axis."""
    p = _check_points(p)
    lo, hi = p.min(axis=0), p.max(axis=0)
    ext = hi - lo
    side = float(ext.max())
    if side <= AREA_EPS:
        raise GeometryError("degenerate bounding box")
    q = (p - lo) / side
    q += (1.0 - ext / side) / 2.0
    return q


@dataclass(frozen=True)
class RigidTransform2D:
    angle: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts) @ self.matrix.T + np.array([self.tx, self.ty])

    def compose(self, other: "RigidTransform2D") -> "RigidTransform2D":
        """self after other."""
        t = self.matrix @ np.array([other.tx, other.ty]) + np.array([self.tx, self.ty])
        return RigidTransform2D(self.angle + other.angle, float(t[0]), float(t[1]))

    def inverse(self) -> "RigidTransform2D":
        t = -(self.matrix.T @ np.array([self.tx, self.ty]))
        return RigidTransform2D(-self.angle, float(t[0]), float(t[1]))


def rigid_fit(src, dst) -> RigidTransform2D:
    """Least-squares rotation + translation mapping src onto dst (paired points)."""
    ca, cb = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ca, dst - cb
    h = a.T @ b
    angle = float(np.arctan2(h[0, 1] - h[1, 0], h[0, 0] + h[1, 1]))
    c, s = np.cos(angle), np.sin(angle)
    t = cb - np.array([c * ca[0] - s * ca[1], s * ca[0] + c * ca[1]])
    return RigidTransform2D(angle, float(t[0]), float(t[1]))


def icp_align(a, b, max_iters: int = 50, tol: float = 1e-9) -> tuple[RigidTransform2D, float]:
    """Rigidly align ``a`` onto ``b``; returns the best transform seen and its chamfer distance."""
    a, b = _check_points(a), _check_points(b)
    if len(a) < 3 or len(b) < 3:
        raise InputError("ICP needs at least 3 points per set")
    tree_b = cKDTree(b)
    best = RigidTransform2D()
    best_cd = prev_cd = chamfer(a, b)
    current = best
    for _ in range(max_iters):
        moved = current.apply(a)
        _, idx = tree_b.query(moved, k=1)
        current = rigid_fit(a, b[idx])
        cd = chamfer(current.apply(a), b)
        if cd < best_cd:
            best, best_cd = current, cd
        if prev_cd - cd < tol:
            break
        prev_cd = cd
    return best, best_cd
