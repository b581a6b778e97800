"""
Segment, distance and angle primitives shared by every other module.

Points are plain ``numpy`` arrays of shape (3,) in millimetres (world
coordinates). 2D points are (x, y) pairs in the same frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

TWO_PI = 2.0 * math.pi
_PARALLEL_EPS = 1e-12


class DegenerateDirection(ValueError):
    """Raised when a direction is requested between coincident points."""


def as_point(p: ArrayLike) -> NDArray[np.float64]:
    arr = np.asarray(p, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"expected a 3D point, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point coordinates must be finite")
    return arr


@dataclass(frozen=True)
class Segment3:
    """Straight 3D segment from ``a`` to ``b`` (mm)."""

    a: NDArray[np.float64]
    b: NDArray[np.float64]

    def __post_init__(self) -> None:
        a, b = as_point(self.a), as_point(self.b)
        if np.array_equal(a, b):
            raise ValueError("segment endpoints coincide")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.b - self.a))

    @property
    def direction(self) -> NDArray[np.float64]:
        d = self.b - self.a
        return d / np.linalg.norm(d)

    def reversed(self) -> "Segment3":
        return Segment3(self.b, self.a)

    def point_at(self, t: float | NDArray) -> NDArray[np.float64]:
        t = np.asarray(t, dtype=float)
        return self.a + t[..., None] * (self.b - self.a)


def _endpoints(seg) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    if isinstance(seg, Segment3):
        return seg.a, seg.b
    a, b = seg
    return np.asarray(a, dtype=float), np.asarray(b, dtype=float)


def point_segment_distance(p: ArrayLike, a: ArrayLike, b: ArrayLike) -> float:
    p, a, b = (np.asarray(v, dtype=float) for v in (p, a, b))
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.linalg.norm(p - a))
    t = min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(p - (a + t * ab)))


def closest_points(seg_a, seg_b) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Closest pair of points between two segments.

    Clamped parametric solve on the unit square; when the segments are
    (near) parallel the interior stationary point is not unique and the
    first parameter is pinned to 0 before clamping the second.
    """
    p1, q1 = _endpoints(seg_a)
    p2, q2 = _endpoints(seg_b)
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)

    if a <= _PARALLEL_EPS and e <= _PARALLEL_EPS:
        return p1, p2
    if a <= _PARALLEL_EPS:
        s = 0.0
        t = min(1.0, max(0.0, f / e))
    else:
        c = float(d1 @ r)
        if e <= _PARALLEL_EPS:
            t = 0.0
            s = min(1.0, max(0.0, -c / a))
        else:
            b = float(d1 @ d2)
            denom = a * e - b * b
            if denom > _PARALLEL_EPS * a * e:
                s = min(1.0, max(0.0, (b * f - c * e) / denom))
            else:
                s = 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = min(1.0, max(0.0, -c / a))
            elif t > 1.0:
                t = 1.0
                s = min(1.0, max(0.0, (b - c) / a))
    return p1 + s * d1, p2 + t * d2


def segment_min_distance(seg_a, seg_b) -> float:
    """Minimum Euclidean distance between two 3D segments (mm).

    Segments may be :class:`Segment3` or any ``(a, b)`` pair of points.
    """
    c1, c2 = closest_points(seg_a, seg_b)
    d = float(np.linalg.norm(c1 - c2))
    # the parallel branch picks one stationary point; endpoint checks make
    # the result symmetric in its arguments
    p1, q1 = _endpoints(seg_a)
    p2, q2 = _endpoints(seg_b)
    d1, d2 = q1 - p1, q2 - p2
    if abs(float(d1 @ d1) * float(d2 @ d2) - float(d1 @ d2) ** 2) <= _PARALLEL_EPS * max(
        1.0, float(d1 @ d1) * float(d2 @ d2)
    ):
        d = min(
            d,
            point_segment_distance(p1, p2, q2),
            point_segment_distance(q1, p2, q2),
            point_segment_distance(p2, p1, q1),
            point_segment_distance(q2, p1, q1),
        )
    return d


def wrap_angle(theta: float | NDArray) -> float | NDArray:
    """Wrap to [0, 2*pi)."""
    out = np.mod(theta, TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    return float(out) if np.ndim(out) == 0 else out


def polar_angle(frm: Sequence[float], to: Sequence[float]) -> float:
    """Direction of ``to - frm`` measured from +X, in [0, 2*pi)."""
    dx = float(to[0]) - float(frm[0])
    dy = float(to[1]) - float(frm[1])
    if dx == 0.0 and dy == 0.0:
        raise DegenerateDirection(f"coincident points {tuple(frm)} and {tuple(to)}")
    return wrap_angle(math.atan2(dy, dx))


def circular_diff(t1: float | NDArray, t2: float | NDArray) -> float | NDArray:
    """Unsigned angular difference in [0, pi]."""
    d = np.abs(np.mod(np.asarray(t1, dtype=float) - np.asarray(t2, dtype=float), TWO_PI))
    d = np.minimum(d, TWO_PI - d)
    return float(d) if np.ndim(d) == 0 else d


def circular_mean(angles: ArrayLike, weights: ArrayLike | None = None) -> float:
    angles = np.asarray(angles, dtype=float)
    w = np.ones_like(angles) if weights is None else np.asarray(weights, dtype=float)
    s = float(np.sum(w * np.sin(angles)))
    c = float(np.sum(w * np.cos(angles)))
    if s == 0.0 and c == 0.0:
        return wrap_angle(float(angles[0]))
    return wrap_angle(math.atan2(s, c))


def unit(v: ArrayLike) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateDirection("zero-length vector has no direction")
    return v / n


def angle_between(u: ArrayLike, v: ArrayLike) -> float:
    """Angle between two unit vectors; the dot product is clamped before arccos.

    Near 0 and pi arccos loses about half the significant digits, so there
    the angle comes from the cross-product norm instead.
    """
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    dot = min(1.0, max(-1.0, float(np.dot(u, v))))
    if abs(dot) > 0.99:
        s = float(np.linalg.norm(np.cross(u, v)))
        return math.atan2(s, dot)
    return math.acos(dot)
