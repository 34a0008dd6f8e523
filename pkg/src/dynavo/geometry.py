"""Camera model, SE(3) rigid transforms and the robust reprojection penalty.

Conventions used throughout the package:

- A ``Pose`` is camera-to-world: ``apply(pose, x_cam) = x_world``. Transforming
  a world point into the camera therefore goes through ``inverse(pose)``.
- A twist is a 6-vector ``[wx, wy, wz, vx, vy, vz]`` (rotation first).
- Pixels are ``(u, v)`` with u along image columns, v along rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class BehindCameraError(ValueError):
    """Raised when a point with non-positive depth is projected."""


class InvalidDepthError(ValueError):
    """Raised when a depth measurement is missing or outside the valid window."""


# Depth readings outside this window (meters) are treated as missing.
DEFAULT_MIN_DEPTH = 0.1
DEFAULT_MAX_DEPTH = 8.0

DEFAULT_HUBER_DELTA = 2.0  # pixels


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus the raw-depth-to-meters divisor."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``x_out = rotation @ x_in + translation``."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_rt(rotation, translation) -> "Pose":
        r = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        return Pose(r, t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) via SVD (det +1 enforced)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return (u * np.array([1.0, 1.0, d])) @ vt


def compose(a: Pose, b: Pose) -> Pose:
    """a ∘ b, re-orthonormalized so drift cannot accumulate over long runs."""
    r = _orthonormalize(a.rotation @ b.rotation)
    t = a.rotation @ b.translation + a.translation
    return Pose(r, t)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt.copy(), -rt @ p.translation)


def apply(p: Pose, x) -> np.ndarray:
    """Transform one point (3,) or many (N, 3)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return p.rotation @ x + p.translation
    return x @ p.rotation.T + p.translation


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = _skew(omega)
    t2 = theta * theta
    if theta < 1e-3:
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / t2
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    trace = min(3.0, max(-1.0, float(np.trace(r))))
    theta = math.acos(max(-1.0, min(1.0, 0.5 * (trace - 1.0))))
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-8:
        return vee
    if math.pi - theta < 1e-6:
        # near pi the vee part vanishes; recover the axis from the diagonal
        diag = np.diag(r)
        k = int(np.argmax(diag))
        axis = np.zeros(3)
        axis[k] = math.sqrt(max(0.0, (diag[k] + 1.0) * 0.5))
        for j in range(3):
            if j != k:
                axis[j] = r[k, j] / (2.0 * axis[k])
        axis /= np.linalg.norm(axis)
        if np.dot(axis, vee) < 0:
            axis = -axis
        return axis * theta
    return vee * theta / math.sin(theta)


def _so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    k = _skew(omega)
    t2 = theta * theta
    if theta < 1e-3:
        # series keeps 1 - cos(theta) cancellation out of the coefficients
        a = 0.5 - t2 / 24.0
        b = 1.0 / 6.0 - t2 / 120.0
    else:
        a = (1.0 - math.cos(theta)) / t2
        b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * k + b * (k @ k)


def _so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    k = _skew(omega)
    t2 = theta * theta
    if theta < 1e-3:
        coeff = 1.0 / 12.0 + t2 / 720.0
    else:
        half = 0.5 * theta
        cot = half / math.tan(half)
        coeff = (1.0 - cot) / t2
    return np.eye(3) - 0.5 * k + coeff * (k @ k)


def se3_exp(twist) -> Pose:
    """Exponential map; twist = [omega, rho] with rotation first."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    omega, rho = twist[:3], twist[3:]
    r = so3_exp(omega)
    t = _so3_left_jacobian(omega) @ rho
    return Pose(r, t)


def se3_log(p: Pose) -> np.ndarray:
    omega = so3_log(p.rotation)
    rho = _so3_left_jacobian_inv(omega) @ p.translation
    return np.concatenate([omega, rho])


def project(point, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of a camera-frame point; no bounds clipping."""
    point = np.asarray(point, dtype=np.float64)
    z = point[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError(f"point has non-positive depth z={z}")
    u = intr.fx * point[..., 0] / z + intr.cx
    v = intr.fy * point[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def project_many(points: np.ndarray, intr: CameraIntrinsics):
    """Vectorized projection returning (pixels, valid) with behind-camera
    rows flagged invalid instead of raising."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = points[:, 2]
    valid = z > 1e-12
    zs = np.where(valid, z, 1.0)
    pix = np.empty((len(points), 2))
    pix[:, 0] = intr.fx * points[:, 0] / zs + intr.cx
    pix[:, 1] = intr.fy * points[:, 1] / zs + intr.cy
    return pix, valid


def backproject(
    pixel,
    raw_depth: float,
    intr: CameraIntrinsics,
    min_depth: float = DEFAULT_MIN_DEPTH,
    max_depth: float = DEFAULT_MAX_DEPTH,
) -> np.ndarray:
    """Right-inverse of project: pixel + raw depth -> camera-frame meters."""
    if raw_depth <= 0:
        raise InvalidDepthError("missing depth measurement")
    z = float(raw_depth) / intr.depth_scale
    if not (min_depth <= z <= max_depth):
        raise InvalidDepthError(f"depth {z:.3f} m outside [{min_depth}, {max_depth}]")
    pixel = np.asarray(pixel, dtype=np.float64)
    x = (pixel[0] - intr.cx) * z / intr.fx
    y = (pixel[1] - intr.cy) * z / intr.fy
    return np.array([x, y, z])


def backproject_grid(
    us: np.ndarray,
    vs: np.ndarray,
    z: np.ndarray,
    intr: CameraIntrinsics,
) -> np.ndarray:
    """Vectorized backprojection of already-validated metric depths (N,)."""
    x = (us - intr.cx) * z / intr.fx
    y = (vs - intr.cy) * z / intr.fy
    return np.stack([x, y, z], axis=-1)


def depth_to_meters(
    raw: np.ndarray,
    intr: CameraIntrinsics,
    min_depth: float = DEFAULT_MIN_DEPTH,
    max_depth: float = DEFAULT_MAX_DEPTH,
):
    """Convert a raw depth image to meters plus a validity mask."""
    z = raw.astype(np.float64) / intr.depth_scale
    valid = (raw > 0) & (z >= min_depth) & (z <= max_depth)
    return z, valid


def huber(squared_residual, delta: float = DEFAULT_HUBER_DELTA):
    """Robust penalty on a squared residual: quadratic inside ``delta``,
    linear outside, C1-continuous at the switch."""
    s = np.asarray(squared_residual, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("squared residual must be non-negative")
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = np.sqrt(s)
    out = np.where(r <= delta, 0.5 * s, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_weight(residual_norm, delta: float = DEFAULT_HUBER_DELTA):
    """IRLS weight matching ``huber``: 1 inside the knee, delta/|r| outside."""
    r = np.asarray(residual_norm, dtype=np.float64)
    return np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (x, y, z, w), w >= 0 canonical."""
    m = np.asarray(r, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def quat_to_rotmat(q) -> np.ndarray:
    """Unit quaternion (x, y, z, w) -> rotation matrix; normalizes input."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    c = 0.5 * (float(np.trace(r)) - 1.0)
    return math.acos(max(-1.0, min(1.0, c)))
