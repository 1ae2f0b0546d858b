"""Quasi-static toppling of a uniform-density rigid polygon on flat ground.

The body is placed on the ground in its (optionally perturbed) upright pose.
While the centre of mass projects outside the interval spanned by the ground
contacts, the body rolls about the support endpoint on the side of the centre
of mass until the next hull vertex touches down. Friction is infinite (no
sliding) and there is no momentum, so each event strictly lowers the centre of
mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import GeometryError, InputError
from .geometry import centroid_area, check_polygon, convex_hull, diameter


@dataclass(frozen=True)
class SimConfig:
    contact_eps: float = 1e-7  # fraction of shape diameter
    max_events: int = 256
    cutoff_deg: float = 20.0
    support_tol: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.cutoff_deg < 90.0:
            raise InputError("cutoff must lie in (0, 90) degrees")
        if self.contact_eps <= 0:
            raise InputError("contact_eps must be positive")


@dataclass(frozen=True)
class ToppleEvent:
    pivot: tuple[float, float]
    rotation_deg: float  # signed, counter-clockwise positive
    com_height_before: float
    com_height_after: float


@dataclass
class StabilityReport:
    tilt_deg: float
    stable: bool
    settled: bool
    topple_count: int
    trace: list[ToppleEvent] = field(default_factory=list)
    pose: np.ndarray | None = None  # settled hull vertices, ground at y = 0
    com: np.ndarray | None = None  # settled centre of mass
    support: tuple[float, float] | None = None


def rotate(pts, angle: float, about=(0.0, 0.0)) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    about = np.asarray(about, dtype=np.float64)
    d = np.asarray(pts, dtype=np.float64) - about
    return np.stack([c * d[..., 0] - s * d[..., 1], s * d[..., 0] + c * d[..., 1]], axis=-1) + about


def _wrap_abs_deg(angle: float) -> float:
    a = (angle + np.pi) % (2.0 * np.pi) - np.pi
    return float(np.degrees(abs(a)))


def settle(p, initial_rotation: float = 0.0, cfg: SimConfig = SimConfig()) -> StabilityReport:
    """Settle polygon ``p`` after rotating it by ``initial_rotation`` radians."""
    p = check_polygon(p)
    if abs(initial_rotation) >= np.pi:
        raise InputError("|initial_rotation| must be below 180 degrees")
    com, _ = centroid_area(p)
    return settle_hull(convex_hull(p), com, initial_rotation, cfg)


def settle_hull(hull, com, initial_rotation: float = 0.0, cfg: SimConfig = SimConfig()) -> StabilityReport:
    """Toppling driven only by the contact hull and a given centre of mass."""
    eps = cfg.contact_eps * diameter(hull)
    pts = rotate(np.asarray(hull) - com, initial_rotation)
    c = np.zeros(2)
    drop = pts[:, 1].min()
    pts[:, 1] -= drop
    c[1] -= drop
    total = 0.0
    trace: list[ToppleEvent] = []
    settled = False
    for event in range(cfg.max_events + 1):
        contact = np.flatnonzero(pts[:, 1] <= eps)
        xs = pts[contact, 0]
        lo, hi = float(xs.min()), float(xs.max())
        if lo - cfg.support_tol <= c[0] <= hi + cfg.support_tol:
            settled = True
            break
        if event == cfg.max_events:
            break
        if c[0] > hi:
            pivot = contact[np.argmax(xs)]
            d = pts - pts[pivot]
            cand = d[:, 0] > 0.0
            phis = np.arctan2(d[cand, 1], d[cand, 0])
            direction = -1.0
        else:
            pivot = contact[np.argmin(xs)]
            d = pts - pts[pivot]
            cand = d[:, 0] < 0.0
            phis = np.arctan2(d[cand, 1], -d[cand, 0])
            direction = 1.0
        phis = phis[phis > 0.0]
        if phis.size == 0:
            raise GeometryError("centre of mass lies outside the contact hull")
        phi = float(phis.min())
        before = float(c[1])
        pv = pts[pivot].copy()
        pts = rotate(pts, direction * phi, pv)
        c = rotate(c, direction * phi, pv)
        drop = pts[:, 1].min()
        pts[:, 1] -= drop
        c[1] -= drop
        total += direction * phi
        trace.append(ToppleEvent((float(pv[0]), float(pv[1])), float(np.degrees(direction * phi)),
                                 before, float(c[1])))
    tilt = _wrap_abs_deg(initial_rotation + total)
    stable = settled and tilt < cfg.cutoff_deg
    return StabilityReport(tilt, stable, settled, len(trace), trace, pts, c, (lo, hi))


def oracle(report: StabilityReport, cfg: SimConfig = SimConfig()) -> int:
    """Binary stability verdict: 1 iff settled with tilt strictly below the cutoff."""
    return int(report.settled and report.tilt_deg < cfg.cutoff_deg)


def _fan_com(p) -> np.ndarray:
    # triangle fan about vertex 0; independent of the shoelace closed form
    o = p[0]
    a, b = p[1:-1] - o, p[2:] - o
    w = 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    cent = o + (a + b) / 3.0
    return (cent * w[:, None]).sum(axis=0) / w.sum()


def com_height(p, com, theta: float) -> float:
    """Height of the centre of mass when ``p`` is rotated by ``theta`` and rests on the ground."""
    c, s = np.cos(theta), np.sin(theta)
    ys = s * p[:, 0] + c * p[:, 1]
    return float(s * com[0] + c * com[1] - ys.min())


def brute_force_settle(p, grid_step_deg: float = 0.05, initial_rotation: float = 0.0,
                       max_deg: float = 720.0) -> float:
    """Greedy descent of centre-of-mass height over a rotation grid; returns |theta*| in degrees."""
    if grid_step_deg > 0.1:
        raise InputError("grid step must be at most 0.1 degrees")
    p = check_polygon(p)
    com = _fan_com(p)
    step = np.radians(grid_step_deg)
    theta = initial_rotation
    h = com_height(p, com, theta)
    for _ in range(int(max_deg / grid_step_deg)):
        hm = com_height(p, com, theta - step)
        hp = com_height(p, com, theta + step)
        if min(hm, hp) >= h:
            break
        if hp < hm:
            theta, h = theta + step, hp
        else:
            theta, h = theta - step, hm
    return _wrap_abs_deg(theta)


def perturbation_sweep(p, theta_max: float, n_runs: int = 100, seed: int = 0,
                       cfg: SimConfig = SimConfig()) -> float:
    """Fraction of runs that end stable when starting from a uniform random tilt in (-theta_max, theta_max)."""
    if n_runs < 1:
        raise InputError("n_runs must be >= 1")
    p = check_polygon(p)
    com, _ = centroid_area(p)
    hull = convex_hull(p)
    thetas = (2.0 * seeding.generator(seed).random(n_runs) - 1.0) * theta_max
    bits = [oracle(settle_hull(hull, com, float(th), cfg), cfg) for th in thetas]
    return float(np.mean(bits))


def flat_cut(p, z: float) -> np.ndarray:
    """Remove everything below ``min_y + z`` and close the polygon with a flat bottom."""
    p = check_polygon(p)
    ymin, ymax = p[:, 1].min(), p[:, 1].max()
    if not 0.0 < z < ymax - ymin:
        raise GeometryError(f"cut height {z} outside (0, {ymax - ymin})")
    cut = ymin + z
    out = []
    n = len(p)
    for i in range(n):
        a, b = p[i], p[(i + 1) % n]
        ina, inb = a[1] >= cut, b[1] >= cut
        if ina:
            out.append(a)
        if ina != inb:
            t = (cut - a[1]) / (b[1] - a[1])
            out.append(np.array([a[0] + t * (b[0] - a[0]), cut]))
    q = np.array(out)
    keep = np.ones(len(q), dtype=bool)
    keep[1:] = np.any(np.abs(np.diff(q, axis=0)) > 1e-15, axis=1)
    q = q[keep]
    if len(q) > 1 and np.all(np.abs(q[0] - q[-1]) <= 1e-15):
        q = q[:-1]
    if len(q) < 3:
        raise GeometryError("cut removed the whole polygon")
    centroid_area(q)
    return q
