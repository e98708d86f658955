"""Axis-aligned boxes, swept boxes and oriented footprints.

Contact is not collision: all overlap tests are strict.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

EPS = 1e-9


@dataclass(frozen=True)
class AABB:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    @classmethod
    def from_center(cls, center, half_extents) -> "AABB":
        c = np.asarray(center, dtype=float)
        h = np.asarray(half_extents, dtype=float)
        return cls(tuple(c - h), tuple(c + h))

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.lo) + np.asarray(self.hi)) / 2

    @property
    def half_extents(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / 2

    def intersects(self, other: "AABB") -> bool:
        return all(self.lo[i] < other.hi[i] - EPS and other.lo[i] < self.hi[i] - EPS for i in range(3))

    def penetration(self, other: "AABB") -> float:
        """Smallest per-axis overlap, 0 when disjoint."""
        if not self.intersects(other):
            return 0.0
        return min(min(self.hi[i], other.hi[i]) - max(self.lo[i], other.lo[i]) for i in range(3))

    def inside(self, other: "AABB") -> bool:
        return all(self.lo[i] >= other.lo[i] - EPS and self.hi[i] <= other.hi[i] + EPS for i in range(3))

    def union(self, other: "AABB") -> "AABB":
        return AABB(tuple(min(a, b) for a, b in zip(self.lo, other.lo)),
                    tuple(max(a, b) for a, b in zip(self.hi, other.hi)))

    def translated(self, delta) -> "AABB":
        return AABB(tuple(a + d for a, d in zip(self.lo, delta)),
                    tuple(a + d for a, d in zip(self.hi, delta)))

    def expanded(self, pad) -> "AABB":
        pad = np.broadcast_to(np.asarray(pad, dtype=float), (3,))
        return AABB(tuple(a - p for a, p in zip(self.lo, pad)), tuple(a + p for a, p in zip(self.hi, pad)))


def sweep_hits(box: AABB, delta, obstacle: AABB) -> bool:
    """True if `box` translated along [0, 1]·delta ever strictly overlaps `obstacle`.

    Minkowski form: the box center's path against the obstacle grown by the
    box half extents, clipped with the slab method on open intervals.
    """
    c = box.center
    h = box.half_extents
    lo = np.asarray(obstacle.lo) - h
    hi = np.asarray(obstacle.hi) + h
    d = np.asarray(delta, dtype=float)
    t0, t1 = 0.0, 1.0
    for i in range(3):
        if abs(d[i]) < 1e-15:
            if not (lo[i] + EPS < c[i] < hi[i] - EPS):
                return False
            continue
        a = (lo[i] + EPS - c[i]) / d[i]
        b = (hi[i] - EPS - c[i]) / d[i]
        if a > b:
            a, b = b, a
        t0 = max(t0, a)
        t1 = min(t1, b)
        if t0 >= t1:
            return False
    return True


def rect_corners(center, half, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    hx, hy = half
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center, dtype=float)


def rect_aabb(center, half, yaw: float) -> tuple[np.ndarray, np.ndarray]:
    """Half extents of the axis-aligned hull of a rotated rectangle, plus its center."""
    c, s = abs(math.cos(yaw)), abs(math.sin(yaw))
    hx, hy = half
    return np.asarray(center, dtype=float), np.array([c * hx + s * hy, s * hx + c * hy])


def rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quads given as 4x2 corner arrays."""
    for quad in (a, b):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() <= pb.min() + EPS or pb.max() <= pa.min() + EPS:
                return False
    return True


def rect_inside(quad: np.ndarray, lo, hi) -> bool:
    return bool(np.all(quad >= np.asarray(lo) - EPS) and np.all(quad <= np.asarray(hi) + EPS))
