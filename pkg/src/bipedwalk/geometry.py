"""Shared planar/spatial geometry helpers.

Small, dependency-free building blocks used across the stack: planar
rotations, angle wrapping, SO(3) primitives, polynomial swing profiles and
convex polygon utilities.
"""
from __future__ import annotations

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    w = float(theta) % TWO_PI
    if w > np.pi:
        w -= TWO_PI
    return w


def rot2(theta: float) -> np.ndarray:
    """Planar rotation matrix R2(theta)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


# 90 degree planar rotation, S2 = R2(pi/2)
S2 = np.array([[0.0, -1.0], [1.0, 0.0]])


def skew(v) -> np.ndarray:
    """Skew-symmetric matrix S(v) with S(v) @ u = v x u."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m) -> np.ndarray:
    """Inverse of skew for a skew-symmetric 3x3 matrix."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def rotz(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def so3_exp(w) -> np.ndarray:
    """Exponential map from a rotation vector to SO(3) (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        # second order series keeps orthogonality error at O(angle^4)
        s = skew(w)
        return np.eye(3) + s + 0.5 * (s @ s)
    axis = w / angle
    s = skew(axis)
    return np.eye(3) + np.sin(angle) * s + (1.0 - np.cos(angle)) * (s @ s)


def yaw_of(rotation: np.ndarray) -> float:
    """Yaw angle of a rotation matrix (Z-Y-X convention)."""
    return float(np.arctan2(rotation[1, 0], rotation[0, 0]))


def quintic_coeffs(p0: float, v0: float, a0: float,
                   p1: float, v1: float, a1: float, T: float) -> np.ndarray:
    """Quintic polynomial coefficients (ascending power) matching endpoint
    position, velocity and acceleration over [0, T]."""
    if T <= 0.0:
        raise ValueError("quintic duration must be positive")
    T2, T3, T4, T5 = T * T, T**3, T**4, T**5
    b = np.array([
        p1 - p0 - v0 * T - 0.5 * a0 * T2,
        v1 - v0 - a0 * T,
        a1 - a0,
    ])
    m = np.array([
        [T3, T4, T5],
        [3 * T2, 4 * T3, 5 * T4],
        [6 * T, 12 * T2, 20 * T3],
    ])
    c345 = np.linalg.solve(m, b)
    return np.array([p0, v0, 0.5 * a0, c345[0], c345[1], c345[2]])


def poly_eval(coeffs: np.ndarray, t: float) -> tuple[float, float, float]:
    """Evaluate an ascending-power polynomial and its first two derivatives."""
    p = 0.0
    v = 0.0
    a = 0.0
    for c in coeffs[::-1]:
        a = a * t + 2.0 * v
        v = v * t + p
        p = p * t + c
    # note: the recurrences above fold Horner for p, p', p''/1 with v=p', a=p''
    return p, v, a


def half_cosine(s: float) -> float:
    """Smooth monotone ramp h(s) from 0 to 1 with zero end slopes, s in [0,1]."""
    s = min(max(s, 0.0), 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * s))


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Convex hull of 2D points (monotone chain), counter-clockwise order."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) <= 2:
        return pts
    # lexicographic sort is given by np.unique already
    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 1e-15:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 1e-15:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_halfspaces(vertices: np.ndarray, margin: float = 0.0):
    """Half-space form G x <= h of a convex CCW polygon shrunk by ``margin``.

    Each edge is shifted inward by ``margin`` along its outward normal.
    """
    verts = np.asarray(vertices, dtype=float)
    nv = len(verts)
    if nv < 3:
        raise ValueError("polygon needs at least 3 vertices")
    G = np.zeros((nv, 2))
    h = np.zeros(nv)
    for i in range(nv):
        a = verts[i]
        b = verts[(i + 1) % nv]
        edge = b - a
        n = np.array([edge[1], -edge[0]])  # outward for CCW order
        n_norm = np.linalg.norm(n)
        if n_norm < 1e-14:
            raise ValueError("degenerate polygon edge")
        n = n / n_norm
        G[i] = n
        h[i] = n @ a - margin
    return G, h


def rect_corners(center: np.ndarray, yaw: float, half_length: float,
                 half_width: float) -> np.ndarray:
    """Corners of an oriented rectangle, CCW order."""
    r = rot2(yaw)
    local = np.array([
        [half_length, half_width],
        [-half_length, half_width],
        [-half_length, -half_width],
        [half_length, -half_width],
    ])
    return np.asarray(center)[None, :] + local @ r.T
