"""Vector, quaternion, and Euler-angle primitives.

Conventions, fixed package-wide:

* Quaternions are scalar-first ``[w, x, y, z]`` unit quaternions with the
  Hamilton product.  A module orientation quaternion ``q`` maps body-frame
  vectors into the reference frame: ``v_ref = R(q) v_body``.
* ``normalize`` enforces the canonical sign ``w >= 0`` so that round-trip
  comparisons are well defined (q and -q encode the same rotation).
* Euler angles are intrinsic Z-Y-X: yaw about z, then pitch about the new y,
  then roll about the new x.  Radians.  Ranges: yaw and roll in (-pi, pi],
  pitch in [-pi/2, pi/2].
* Gimbal lock (|pitch| within GIMBAL_EPS of pi/2) keeps yaw, sets roll = 0,
  and emits :class:`GimbalLockWarning`.

Scalar value types (:class:`Vec3`, :class:`Quaternion`, :class:`EulerAngles`)
are frozen dataclasses.  The ``*_arr`` functions are vectorized variants on
``(n, 3)`` / ``(n, 4)`` float arrays; the simulator and pipeline use those.
All functions are pure, so concurrent callers need no synchronization.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

GIMBAL_EPS = 1e-6


class GimbalLockWarning(UserWarning):
    """Pitch is numerically at +-pi/2; the yaw/roll split is by convention."""


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a) -> "Vec3":
        return Vec3(float(a[0]), float(a[1]), float(a[2]))

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a) -> "Quaternion":
        return Quaternion(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    def normalized(self) -> "Quaternion":
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if n == 0.0:
            raise ValueError("cannot normalize zero quaternion")
        s = 1.0 / n
        if self.w < 0.0:
            s = -s
        return Quaternion(self.w * s, self.x * s, self.y * s, self.z * s)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)


@dataclass(frozen=True)
class EulerAngles:
    yaw: float
    pitch: float
    roll: float


def quat_mul(a: Quaternion, b: Quaternion) -> Quaternion:
    """Hamilton product a (x) b, renormalized with canonical sign."""
    w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z
    x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y
    y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x
    z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w
    return Quaternion(w, x, y, z).normalized()


def rotate_vec(q: Quaternion, v: Vec3) -> Vec3:
    """Rotate v by unit quaternion q: returns R(q) v."""
    out = rotate_vec_arr(q.as_array()[None, :], v.as_array()[None, :])[0]
    return Vec3.from_array(out)


def relative_orientation(q_tx: Quaternion, q_rx: Quaternion) -> Quaternion:
    """Quaternion taking Rx-frame vectors into the Tx frame.

    Both arguments are module-to-reference orientations sharing the same
    reference frame; the result is conjugate(q_tx) (x) q_rx.
    """
    return quat_mul(q_tx.conjugate(), q_rx)


def quat_to_euler(q: Quaternion) -> EulerAngles:
    """Convert a unit quaternion to intrinsic Z-Y-X Euler angles."""
    e = quat_to_euler_arr(q.as_array()[None, :])[0]
    return EulerAngles(float(e[0]), float(e[1]), float(e[2]))


def euler_to_quat(e: EulerAngles) -> Quaternion:
    """Inverse of quat_to_euler for angles within the declared ranges."""
    q = euler_to_quat_arr(np.array([[e.yaw, e.pitch, e.roll]], dtype=float))[0]
    return Quaternion.from_array(q)


# ---------------------------------------------------------------------------
# Array variants: quaternions (n, 4) scalar-first, vectors (n, 3).
# ---------------------------------------------------------------------------


def normalize_quat_arr(q: np.ndarray) -> np.ndarray:
    """Row-wise normalize with canonical sign w >= 0."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("cannot normalize zero quaternion")
    out = q / n
    flip = out[..., 0] < 0.0
    out[flip] = -out[flip]
    return out


def quat_conj_arr(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=float, copy=True)
    out[..., 1:] = -out[..., 1:]
    return out


def quat_mul_raw_arr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Hamilton product without normalization (needed when either
    factor is not a unit quaternion, e.g. quaternion derivatives)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_mul_arr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Hamilton product; result normalized, canonical sign."""
    return normalize_quat_arr(quat_mul_raw_arr(a, b))


def rotate_vec_arr(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise rotation v_ref = R(q) v.  Broadcasts q against v."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    # v' = v + 2w (u x v) + 2 u x (u x v), exact for unit q
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_euler_arr(q: np.ndarray, warn_gimbal: bool = True) -> np.ndarray:
    """(n, 4) unit quaternions to (n, 3) [yaw, pitch, roll] arrays."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    sinp = 2.0 * (w * y - x * z)
    sinp = np.clip(sinp, -1.0, 1.0)
    pitch = np.arcsin(sinp)
    yaw = np.arctan2(2.0 * (x * y + w * z), 1.0 - 2.0 * (y * y + z * z))
    roll = np.arctan2(2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y))

    locked = np.abs(sinp) >= 1.0 - GIMBAL_EPS
    if np.any(locked):
        if warn_gimbal:
            warnings.warn(
                "pitch at +-pi/2: yaw/roll split fixed by roll = 0 convention",
                GimbalLockWarning,
                stacklevel=2,
            )
        # R01 = 2(xy - wz), R11 = 1 - 2(x^2 + z^2); yaw absorbs the free angle
        r01 = 2.0 * (x * y - w * z)
        r11 = 1.0 - 2.0 * (x * x + z * z)
        yaw = np.where(locked, np.arctan2(-r01, r11), yaw)
        roll = np.where(locked, 0.0, roll)
    return np.stack([yaw, pitch, roll], axis=-1)


def euler_to_quat_arr(e: np.ndarray) -> np.ndarray:
    """(n, 3) [yaw, pitch, roll] arrays to (n, 4) unit quaternions."""
    e = np.asarray(e, dtype=float)
    hy, hp, hr = e[..., 0] / 2.0, e[..., 1] / 2.0, e[..., 2] / 2.0
    cy, sy = np.cos(hy), np.sin(hy)
    cp, sp = np.cos(hp), np.sin(hp)
    cr, sr = np.cos(hr), np.sin(hr)
    out = np.stack(
        [
            cy * cp * cr + sy * sp * sr,
            cy * cp * sr - sy * sp * cr,
            cy * sp * cr + sy * cp * sr,
            sy * cp * cr - cy * sp * sr,
        ],
        axis=-1,
    )
    return normalize_quat_arr(out)


def rotvec_to_quat_arr(rv: np.ndarray) -> np.ndarray:
    """Rotation vectors (n, 3), angle = norm, to unit quaternions."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(half)/angle -> 0.5 as angle -> 0
    small = angle < 1e-12
    scale = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angle))
    out = np.concatenate([np.cos(half), rv * scale], axis=-1)
    return normalize_quat_arr(out)


def enforce_quat_continuity(q: np.ndarray) -> np.ndarray:
    """Flip signs along axis 0 so consecutive quaternions stay in the same
    hemisphere (needed before component-wise interpolation or differences)."""
    q = np.array(q, dtype=float, copy=True)
    dots = np.sum(q[1:] * q[:-1], axis=-1)
    flips = np.cumsum(dots < 0.0) % 2 == 1
    q[1:][flips] = -q[1:][flips]
    return q
