"""Unit-quaternion helpers shared by the geometry modules.

Convention: quaternions are (w, x, y, z); matrices act on column
vectors.  Functions normalize defensively so callers may hand in
unnormalized parameters (the optimizers re-project after every step,
but gradients flow through the normalization explicitly).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "quat_normalize",
    "quat_to_matrix",
    "quat_to_matrix_jacobian",
    "quat_to_matrix_jacobian_batch",
    "matrix_to_quat",
    "quat_slerp",
    "quat_angle",
    "look_at",
]


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _matrix_from_unit(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of q/|q|; supports batched leading dims."""
    return _matrix_from_unit(quat_normalize(q))


def quat_to_matrix_jacobian(q: np.ndarray):
    """Return (R, dR/dq) at a single quaternion, chaining normalization.

    dR/dq has shape (3, 3, 4) and differentiates R(q/|q|) with respect
    to the raw (unnormalized) q.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    u = q / n
    w, x, y, z = u
    r = _matrix_from_unit(u)

    # dR/du for the polynomial form, on the unit sphere
    du = np.zeros((3, 3, 4))
    du[0, 0] = [0, 0, -4 * y, -4 * z]
    du[0, 1] = [-2 * z, 2 * y, 2 * x, -2 * w]
    du[0, 2] = [2 * y, 2 * z, 2 * w, 2 * x]
    du[1, 0] = [2 * z, 2 * y, 2 * x, 2 * w]
    du[1, 1] = [0, -4 * x, 0, -4 * z]
    du[1, 2] = [-2 * x, -2 * w, 2 * z, 2 * y]
    du[2, 0] = [-2 * y, 2 * z, -2 * w, 2 * x]
    du[2, 1] = [2 * x, 2 * w, 2 * z, 2 * y]
    du[2, 2] = [0, -4 * x, -4 * y, 0]

    proj = (np.eye(4) - np.outer(u, u)) / n  # du/dq
    return r, np.einsum("abu,uq->abq", du, proj)


def quat_to_matrix_jacobian_batch(q: np.ndarray):
    """Vectorized quat_to_matrix_jacobian: (N,4) -> (N,3,3), (N,3,3,4)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    r = _matrix_from_unit(u)

    m = q.shape[0]
    du = np.zeros((m, 3, 3, 4))
    zero = np.zeros(m)
    du[:, 0, 0] = np.stack([zero, zero, -4 * y, -4 * z], axis=-1)
    du[:, 0, 1] = np.stack([-2 * z, 2 * y, 2 * x, -2 * w], axis=-1)
    du[:, 0, 2] = np.stack([2 * y, 2 * z, 2 * w, 2 * x], axis=-1)
    du[:, 1, 0] = np.stack([2 * z, 2 * y, 2 * x, 2 * w], axis=-1)
    du[:, 1, 1] = np.stack([zero, -4 * x, zero, -4 * z], axis=-1)
    du[:, 1, 2] = np.stack([-2 * x, -2 * w, 2 * z, 2 * y], axis=-1)
    du[:, 2, 0] = np.stack([-2 * y, 2 * z, -2 * w, 2 * x], axis=-1)
    du[:, 2, 1] = np.stack([2 * x, 2 * w, 2 * z, 2 * y], axis=-1)
    du[:, 2, 2] = np.stack([zero, -4 * x, -4 * y, zero], axis=-1)

    proj = (np.eye(4) - u[:, :, None] * u[:, None, :]) / n[:, :, None]
    return r, np.einsum("nabu,nuq->nabq", du, proj)


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (w, x, y, z) with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1, dot = -q1, -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(q0 + t * (q1 - q0))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return (np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1) / s


def quat_angle(q0: np.ndarray, q1: np.ndarray) -> float:
    """Geodesic angle (radians) between two rotations."""
    dot = abs(float(np.dot(quat_normalize(q0), quat_normalize(q1))))
    return 2.0 * np.arccos(np.clip(dot, -1.0, 1.0))


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)):
    """World-to-camera (R, t) looking from eye to target.

    Proper rotation (det +1) with camera axes x-right, y-along-up,
    z-forward: a world point p maps to camera coordinates R @ p + t with
    positive z in front of the camera.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise ValueError("look_at: eye and target coincide")
    forward = forward / fn
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(upv, forward)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        upv = np.array([0.0, 0.0, 1.0]) if abs(forward[1]) > 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(upv, forward)
        rn = np.linalg.norm(right)
    right = right / rn
    ydir = np.cross(forward, right)
    rot = np.stack([right, ydir, forward], axis=0)
    return rot, -rot @ eye
