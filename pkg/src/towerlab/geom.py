"""Small geometry helpers shared by scene generation, statics and rendering.

Quaternions are stored as (w, x, y, z) numpy arrays. These are plain numpy
implementations; the simulation kernels carry their own jitted copies.
"""
from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.sqrt(float(np.dot(q, q)))
    if n == 0.0:
        return IDENTITY_QUAT.copy()
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.sqrt(float(np.dot(axis, axis)))
    if n == 0.0:
        return IDENTITY_QUAT.copy()
    half = 0.5 * angle
    s = np.sin(half) / n
    return np.array([np.cos(half), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix whose columns are the body axes in world frame."""
    w, x, y, z = quat_normalize(np.asarray(q, dtype=float))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


_CORNER_SIGNS = np.array([
    [-1, -1, -1], [+1, -1, -1], [+1, +1, -1], [-1, +1, -1],
    [-1, -1, +1], [+1, -1, +1], [+1, +1, +1], [-1, +1, +1],
], dtype=float)


def box_vertices(position, orientation, half_extents) -> np.ndarray:
    """World-space corners of an oriented box, shape (8, 3)."""
    rot = quat_to_mat(orientation)
    local = _CORNER_SIGNS * np.asarray(half_extents, dtype=float)
    return np.asarray(position, dtype=float) + local @ rot.T


def is_axis_aligned(orientation, tol: float = 1e-9) -> bool:
    rot = quat_to_mat(orientation)
    return bool(np.all(np.abs(np.abs(rot) - np.eye(3)) < tol) or
                np.all((np.abs(rot) < tol) | (np.abs(np.abs(rot) - 1.0) < tol)))


def aligned_footprint(position, half_extents):
    """(xmin, xmax, ymin, ymax) of an axis-aligned box footprint."""
    p = np.asarray(position, dtype=float)
    h = np.asarray(half_extents, dtype=float)
    return p[0] - h[0], p[0] + h[0], p[1] - h[1], p[1] + h[1]


def rect_overlap(a, b):
    """Intersection of two (xmin, xmax, ymin, ymax) rects, or None if empty."""
    xmin = max(a[0], b[0])
    xmax = min(a[1], b[1])
    ymin = max(a[2], b[2])
    ymax = min(a[3], b[3])
    if xmax <= xmin or ymax <= ymin:
        return None
    return xmin, xmax, ymin, ymax


def box_separation(pos_a, quat_a, half_a, pos_b, quat_b, half_b) -> float:
    """Largest separation over the 15 SAT axes of two oriented boxes.

    Positive: a separating axis exists with that gap. Negative: the boxes
    overlap on every axis; the value is the least overlap (penetration as
    a negative number).
    """
    ra = quat_to_mat(quat_a)
    rb = quat_to_mat(quat_b)
    d = np.asarray(pos_b, dtype=float) - np.asarray(pos_a, dtype=float)
    half_a = np.asarray(half_a, dtype=float)
    half_b = np.asarray(half_b, dtype=float)
    axes = [ra[:, i] for i in range(3)] + [rb[:, i] for i in range(3)]
    for i in range(3):
        for j in range(3):
            c = np.cross(ra[:, i], rb[:, j])
            n = np.linalg.norm(c)
            if n > 1e-12:
                axes.append(c / n)
    best = -np.inf
    for axis in axes:
        proj_a = float(np.sum(half_a * np.abs(axis @ ra)))
        proj_b = float(np.sum(half_b * np.abs(axis @ rb)))
        sep = abs(float(axis @ d)) - (proj_a + proj_b)
        if sep > best:
            best = sep
    return best
