"""Cuboid geometry: poses, corners, bounding boxes and rectangle overlap.

World frame is right-handed with z up; the ground is the plane z = 0.
Quaternions are stored scalar-first as (w, x, y, z).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_TOL = 1e-9


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.sqrt(q @ q)


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=float)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    s = np.sin(0.5 * angle)
    return np.array([np.cos(0.5 * angle), *(s * axis)])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class Pose:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        q = np.asarray(self.orientation, dtype=float).reshape(4)
        if abs(np.sqrt(q @ q) - 1.0) > QUAT_TOL:
            q = quat_normalize(q)
        object.__setattr__(self, "orientation", q)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def apply(self, points) -> np.ndarray:
        """Map body-frame points (..., 3) to world frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.position

    def inverse(self) -> "Pose":
        qi = quat_conj(self.orientation)
        return Pose(-quat_to_matrix(qi) @ self.position, qi)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first, then `self`."""
        return Pose(self.apply(other.position), quat_normalize(quat_mul(self.orientation, other.orientation)))

    def translated(self, offset) -> "Pose":
        return Pose(self.position + np.asarray(offset, dtype=float), self.orientation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.position, other.position)
                and np.array_equal(self.orientation, other.orientation))

    def __hash__(self):
        return hash((self.position.tobytes(), self.orientation.tobytes()))


@dataclass(frozen=True)
class Cuboid:
    half_extents: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.half_extents, dtype=float).reshape(3)
        if not np.all(h > 0):
            raise ValueError(f"half extents must be strictly positive, got {h}")
        object.__setattr__(self, "half_extents", h)

    @classmethod
    def from_full_extents(cls, sx: float, sy: float, sz: float) -> "Cuboid":
        return cls(np.array([sx, sy, sz], dtype=float) / 2.0)

    @property
    def full_extents(self) -> np.ndarray:
        return 2.0 * self.half_extents

    @property
    def volume(self) -> float:
        return float(np.prod(self.full_extents))

    def __eq__(self, other):
        if not isinstance(other, Cuboid):
            return NotImplemented
        return np.array_equal(self.half_extents, other.half_extents)

    def __hash__(self):
        return hash(self.half_extents.tobytes())


# Corner sign pattern; corner k has sign bits (x: bit 0, y: bit 1, z: bit 2).
CORNER_SIGNS = np.array([[1 if k & 1 else -1, 1 if k & 2 else -1, 1 if k & 4 else -1]
                         for k in range(8)], dtype=float)


def cuboid_corners(c: Cuboid, p: Pose) -> np.ndarray:
    """The 8 world-space corners, shape (8, 3)."""
    return p.apply(CORNER_SIGNS * c.half_extents)


@dataclass(frozen=True)
class AABB:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, points, tol: float = 0.0) -> bool:
        pts = np.atleast_2d(points)
        return bool(np.all(pts >= self.lo - tol) and np.all(pts <= self.hi + tol))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extents(self) -> np.ndarray:
        return self.hi - self.lo


def world_aabb(c: Cuboid, p: Pose) -> AABB:
    # |R| h is the tight half-size of a rotated box
    half = np.abs(p.rotation) @ c.half_extents
    return AABB(p.position - half, p.position + half)


@dataclass(frozen=True)
class Rect2:
    """Axis-aligned rectangle in a horizontal plane; `empty` is explicit."""
    min: tuple = (0.0, 0.0)
    max: tuple = (0.0, 0.0)
    empty: bool = False

    def __post_init__(self):
        object.__setattr__(self, "min", tuple(float(v) for v in self.min))
        object.__setattr__(self, "max", tuple(float(v) for v in self.max))
        if not self.empty and (self.min[0] > self.max[0] or self.min[1] > self.max[1]):
            raise ValueError(f"degenerate rectangle {self.min} > {self.max}")

    @classmethod
    def make_empty(cls) -> "Rect2":
        return cls((0.0, 0.0), (0.0, 0.0), empty=True)

    @property
    def area(self) -> float:
        if self.empty:
            return 0.0
        return (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.min) + np.array(self.max))

    def contains(self, pt) -> bool:
        return (not self.empty and self.min[0] <= pt[0] <= self.max[0]
                and self.min[1] <= pt[1] <= self.max[1])


def rect_overlap(a: Rect2, b: Rect2) -> Rect2:
    if a.empty or b.empty:
        return Rect2.make_empty()
    lo = (max(a.min[0], b.min[0]), max(a.min[1], b.min[1]))
    hi = (min(a.max[0], b.max[0]), min(a.max[1], b.max[1]))
    if lo[0] > hi[0] or lo[1] > hi[1]:
        return Rect2.make_empty()
    return Rect2(lo, hi)


def footprint(c: Cuboid, p: Pose) -> Rect2:
    """Horizontal (x, y) extent of the world AABB."""
    box = world_aabb(c, p)
    return Rect2((box.lo[0], box.lo[1]), (box.hi[0], box.hi[1]))


def obb_separation(c1: Cuboid, p1: Pose, c2: Cuboid, p2: Pose) -> float:
    """Largest separation over the 15 separating-axis candidates.

    Positive means the boxes are disjoint by at least that distance along
    some axis; negative is (minus) the smallest penetration depth found.
    """
    r1, r2 = p1.rotation, p2.rotation
    d = p2.position - p1.position
    axes = [r1[:, i] for i in range(3)] + [r2[:, j] for j in range(3)]
    for i in range(3):
        for j in range(3):
            ax = np.cross(r1[:, i], r2[:, j])
            n = np.linalg.norm(ax)
            if n > 1e-9:
                axes.append(ax / n)
    best = -np.inf
    for ax in axes:
        ra = np.sum(c1.half_extents * np.abs(r1.T @ ax))
        rb = np.sum(c2.half_extents * np.abs(r2.T @ ax))
        best = max(best, abs(d @ ax) - ra - rb)
    return float(best)


def boxes_interpenetrate(c1: Cuboid, p1: Pose, c2: Cuboid, p2: Pose, tol: float = 1e-4) -> bool:
    return obb_separation(c1, p1, c2, p2) < -tol


def axis_aligned_half_extents(c: Cuboid, p: Pose, tol: float = 1e-9):
    """World half extents if the pose maps body axes onto world axes, else None."""
    r = p.rotation
    a = np.abs(r)
    if not np.all((a < tol) | (np.abs(a - 1.0) < tol)):
        return None
    return np.rint(a) @ c.half_extents
