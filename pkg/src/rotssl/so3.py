"""Rotation utilities on SO(3).

Conventions:

- Rotation matrices act on column vectors, ``v' = R @ v``.
- Quaternions are scalar first, ``(w, x, y, z)``.
- Euler angles are intrinsic Y-X-Z, ``R = Ry(yaw) @ Rx(pitch) @ Rz(roll)``,
  reported in degrees as ``(pitch, yaw, roll)``.

Every function accepts stacked inputs with arbitrary leading dimensions
unless stated otherwise.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

GIMBAL_PITCH_DEG = 89.99


class ProperSvd(NamedTuple):
    """SVD with ``det(u) = det(v) = +1``; the sign lives in ``s[..., 2]``."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


class EulerAngles(NamedTuple):
    pitch: np.ndarray
    yaw: np.ndarray
    roll: np.ndarray
    gimbal_lock: np.ndarray


def is_rotation(m, tol=1e-9):
    m = np.asarray(m, dtype=float)
    eye = np.eye(3)
    ortho = np.linalg.norm(m @ np.swapaxes(m, -1, -2) - eye, axis=(-2, -1))
    return np.all(ortho < tol) and np.all(np.abs(np.linalg.det(m) - 1.0) < tol)


def quat_to_matrix(q):
    """Unit quaternion ``(w, x, y, z)`` to rotation matrix.

    Raises:
        ValueError: if any quaternion deviates from unit norm by more than 1e-6.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise ValueError("quaternion must have unit norm")
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z,
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Rotation matrix to unit quaternion with ``w >= 0``."""
    m = np.asarray(m, dtype=float)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, r in enumerate(flat):
        # Largest-diagonal branch keeps the square root well conditioned.
        t = np.trace(r)
        if t > 0:
            w = 0.5 * np.sqrt(1.0 + t)
            out[i] = (w, (r[2, 1] - r[1, 2]) / (4 * w),
                      (r[0, 2] - r[2, 0]) / (4 * w), (r[1, 0] - r[0, 1]) / (4 * w))
        else:
            k = int(np.argmax(np.diag(r)))
            j, l = (k + 1) % 3, (k + 2) % 3
            a = 0.5 * np.sqrt(1.0 + r[k, k] - r[j, j] - r[l, l])
            q = np.empty(4)
            q[0] = (r[l, j] - r[j, l]) / (4 * a)
            q[1 + k] = a
            q[1 + j] = (r[j, k] + r[k, j]) / (4 * a)
            q[1 + l] = (r[l, k] + r[k, l]) / (4 * a)
            out[i] = q
    out *= np.where(out[:, :1] < 0, -1.0, 1.0)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out.reshape(m.shape[:-2] + (4,))


def _axis_rot(axis, angle_rad):
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    one, zero = np.ones_like(c), np.zeros_like(c)
    if axis == "x":
        rows = [one, zero, zero, zero, c, -s, zero, s, c]
    elif axis == "y":
        rows = [c, zero, s, zero, one, zero, -s, zero, c]
    else:
        rows = [c, -s, zero, s, c, zero, zero, zero, one]
    return np.stack(rows, axis=-1).reshape(np.shape(c) + (3, 3))


def euler_to_matrix(pitch, yaw, roll):
    """Intrinsic Y-X-Z Euler angles in degrees to a rotation matrix."""
    p, y, r = (np.deg2rad(np.asarray(a, dtype=float)) for a in (pitch, yaw, roll))
    return _axis_rot("y", y) @ _axis_rot("x", p) @ _axis_rot("z", r)


def matrix_to_euler(m):
    """Rotation matrix to ``EulerAngles`` in degrees.

    Near ``|pitch| = 90`` the yaw/roll split is not unique. Those entries get
    ``roll = 0`` and ``gimbal_lock = True``; nothing is raised.
    """
    m = np.asarray(m, dtype=float)
    sp = np.clip(-m[..., 1, 2], -1.0, 1.0)
    pitch = np.arcsin(sp)
    yaw = np.arctan2(m[..., 0, 2], m[..., 2, 2])
    roll = np.arctan2(m[..., 1, 0], m[..., 1, 1])
    lock = np.abs(np.rad2deg(pitch)) >= GIMBAL_PITCH_DEG
    yaw = np.where(lock, np.arctan2(-m[..., 2, 0], m[..., 0, 0]), yaw)
    roll = np.where(lock, 0.0, roll)
    return EulerAngles(np.rad2deg(pitch), np.rad2deg(yaw), np.rad2deg(roll), lock)


def wrap_degrees(a):
    """Wrap angles into [-180, 180)."""
    return (np.asarray(a, dtype=float) + 180.0) % 360.0 - 180.0


def geodesic_angle(r1, r2):
    """Rotation angle of ``r1 @ r2.T`` in degrees, in [0, 180].

    Uses ``atan2(sin, cos)`` rather than a bare ``acos`` so that small angles
    keep full precision.
    """
    q = np.asarray(r1, dtype=float) @ np.swapaxes(np.asarray(r2, dtype=float), -1, -2)
    cos = np.clip((np.trace(q, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    skew = q - np.swapaxes(q, -1, -2)
    sin = 0.5 * np.sqrt(skew[..., 2, 1] ** 2 + skew[..., 0, 2] ** 2 + skew[..., 1, 0] ** 2)
    return np.rad2deg(np.arctan2(sin, cos))


def frobenius_metric(r1, r2):
    """``||I - r1 @ r2.T||_F``; equals ``2*sqrt(2)*sin(theta/2)``."""
    q = np.asarray(r1, dtype=float) @ np.swapaxes(np.asarray(r2, dtype=float), -1, -2)
    return np.linalg.norm(np.eye(3) - q, axis=(-2, -1))


def inplane_rotation(theta_deg):
    """In-plane rotation about the viewing (z) axis.

    Layout ``[[cos, sin, 0], [-sin, cos, 0], [0, 0, 1]]``, so a positive angle
    turns the projected image content clockwise (for a y-up image plane).
    """
    t = np.deg2rad(np.asarray(theta_deg, dtype=float))
    return _axis_rot("z", -t)


def sample_uniform_quat(rng, size=None):
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    q = rng.standard_normal(shape + (4,))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def sample_uniform_rotation(rng, size=None):
    """Haar-uniform rotations from normalized Gaussian quaternions."""
    return quat_to_matrix(sample_uniform_quat(rng, size))


def proper_svd(a):
    """SVD ``a = u @ diag(s) @ v.T`` with ``u, v`` proper rotations.

    When ``det(u @ v.T) < 0`` the sign is pushed into the smallest singular
    value, so ``s1 >= s2 >= |s3|``. Works on stacks of matrices.
    """
    a = np.asarray(a, dtype=float)
    u, s, vt = np.linalg.svd(a)
    v = np.swapaxes(vt, -1, -2).copy()
    u = u.copy()
    s = s.copy()
    du = np.linalg.det(u) < 0
    dv = np.linalg.det(v) < 0
    u[..., :, 2] = np.where(du[..., None], -u[..., :, 2], u[..., :, 2])
    v[..., :, 2] = np.where(dv[..., None], -v[..., :, 2], v[..., :, 2])
    s[..., 2] = np.where(du ^ dv, -s[..., 2], s[..., 2])
    return ProperSvd(u, s, v)


def axis_angle_to_matrix(axis, angle_deg):
    """Rotation by ``angle_deg`` about an arbitrary axis (Rodrigues)."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    t = np.deg2rad(angle_deg)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(t) * kx + (1 - np.cos(t)) * kx @ kx
