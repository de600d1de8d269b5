"""Axis-angle rotations: exponential/log maps and derivatives."""

from __future__ import annotations

import numpy as np


def hat(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee_skew(a: np.ndarray) -> np.ndarray:
    """Return v with <a, hat(w)> = v . w for every w."""
    return np.array([a[2, 1] - a[1, 2], a[0, 2] - a[2, 0], a[1, 0] - a[0, 1]])


def exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    th2 = float(w @ w)
    k = hat(w)
    if th2 < 1e-16:
        return np.eye(3) + k + 0.5 * k @ k
    th = np.sqrt(th2)
    return np.eye(3) + (np.sin(th) / th) * k + ((1.0 - np.cos(th)) / th2) * (k @ k)


def exp_jacobian(w: np.ndarray) -> np.ndarray:
    """dR/dw as a (3, 3, 3) array, last axis indexing the component of w.

    Uses dR/dw_i = (w_i [w] + [w x (I - R) e_i]) R / |w|^2, with the
    first-order series at the origin.
    """
    w = np.asarray(w, dtype=np.float64)
    th2 = float(w @ w)
    out = np.empty((3, 3, 3))
    if th2 < 1e-16:
        r = exp(w)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            # d exp(w)/dw_i ~= [e_i] + ([e_i][w] + [w][e_i]) / 2
            out[:, :, i] = hat(e) + 0.5 * (hat(e) @ hat(w) + hat(w) @ hat(e))
        return out
    r = exp(w)
    k = hat(w)
    eye = np.eye(3)
    for i in range(3):
        v = np.cross(w, (eye - r)[:, i])
        out[:, :, i] = (w[i] * k + hat(v)) @ r / th2
    return out


def log(r: np.ndarray) -> np.ndarray:
    """Principal axis-angle of a rotation matrix (|w| <= pi)."""
    r = np.asarray(r, dtype=np.float64)
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(c)
    v = vee_skew(r) / 2.0  # sin(th) * axis
    if th < 1e-8:
        return v
    if np.pi - th < 1e-6:
        # near pi: axis from the symmetric part
        b = (r + np.eye(3)) / 2.0
        axis = b[:, int(np.argmax(np.diag(b)))]
        axis = axis / np.linalg.norm(axis)
        if axis @ v < 0:
            axis = -axis
        return th * axis
    return th / np.sin(th) * v


def euler_zyx(r: np.ndarray) -> np.ndarray:
    """Intrinsic z-y-x Euler angles (yaw, pitch, roll) in radians, for reporting."""
    pitch = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    yaw = np.arctan2(r[1, 0], r[0, 0])
    roll = np.arctan2(r[2, 1], r[2, 2])
    return np.array([yaw, pitch, roll])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])
