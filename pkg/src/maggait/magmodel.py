"""Point-dipole field model and its closed-form inversion.

The transmitter coil at the origin of the Tx frame produces, at position
``(x, y, z)`` with ``r = sqrt(x^2 + y^2 + z^2)``:

    B_x = 3 M x z / (4 pi r^5)
    B_y = 3 M y z / (4 pi r^5)
    B_z = 2 M (2 z^2 - x^2 - y^2) / (4 pi r^5)

with M the magnetic moment.  The axial component keeps its leading factor 2
as a model definition here, so the field is not the textbook dipole; the
inversion below is derived from these exact expressions and is insensitive
to the constant.

Inversion route (per measurement, vectorized): with c = z/r and u = c^2,

    |B|^2        = M^2 (27 u^2 - 15 u + 4) / (16 pi^2 r^6)
    g = B_z/|B|  = 2 (3 u - 1) / sqrt(27 u^2 - 15 u + 4)

so g determines u through a quadratic, |B| then gives r, and the azimuth
comes from atan2(B_y, B_x) once the sign of z is fixed.  The field is
invariant under point inversion (B(p) = B(-p)), so a configured half-space
picks between the two remaining candidates.  A safeguarded Newton polish on
the forward model removes the last few ulps of algebraic error.

All functions are stateless; callers may parallelize per measurement.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geom import Quaternion, Vec3, quat_conj_arr, relative_orientation, rotate_vec, rotate_vec_arr

# min of 27u^2 - 15u + 4 over u in [0, 1], attained at u = 5/18
_ANGULAR_MIN = 23.0 / 12.0
_ANGULAR_MAX = 16.0

_NEWTON_MAX_ITERS = 5
_NEWTON_RTOL = 1e-13


class TrackingError(Exception):
    """Base class for field-model errors."""


class DegeneratePosition(TrackingError):
    """Position too close to the transmitter for the point-source model."""


class OutOfRange(TrackingError):
    """Field magnitude outside the configured tracking shell."""


class AmbiguousAzimuthWarning(UserWarning):
    """Transverse field components vanish; azimuth fixed by convention."""


@dataclass(frozen=True)
class DipoleParams:
    """Field model configuration.

    moment must be positive; r_min/r_max bound the tracking shell (they are
    configuration, not physical claims) and define the admissible field
    magnitude band used by :func:`invert_field`.
    """

    moment: float = 1.0
    r_min: float = 0.05
    r_max: float = 1.5

    def __post_init__(self):
        if self.moment <= 0.0:
            raise ValueError("moment must be > 0")
        if not 0.0 < self.r_min < self.r_max:
            raise ValueError("need 0 < r_min < r_max")

    def field_band(self) -> tuple[float, float]:
        """(b_min, b_max): attainable |B| over the tracking shell."""
        k = self.moment / (4.0 * math.pi)
        b_min = k * math.sqrt(_ANGULAR_MIN) / self.r_max**3
        b_max = k * math.sqrt(_ANGULAR_MAX) / self.r_min**3
        return b_min, b_max


@dataclass(frozen=True)
class HalfSpace:
    """Selects which of the two point-inversion candidates is the real one."""

    normal: Vec3 = field(default_factory=lambda: Vec3(0.0, 0.0, 1.0))

    def __post_init__(self):
        n = self.normal.norm()
        if abs(n - 1.0) > 1e-9:
            raise ValueError("half-space normal must be unit length")


@dataclass(frozen=True)
class Measurement:
    """One field sample: amplitude vector in the Rx frame plus both
    module-to-earth orientations."""

    b_rx: Vec3
    q_rx: Quaternion
    q_tx: Quaternion
    t: float = 0.0


@dataclass(frozen=True)
class Pose:
    position: Vec3
    orientation: Quaternion


def forward_field(p: Vec3 | np.ndarray, params: DipoleParams) -> Vec3:
    """Field at position p in the Tx frame."""
    a = p.as_array() if isinstance(p, Vec3) else np.asarray(p, dtype=float)
    return Vec3.from_array(forward_field_arr(a[None, :], params)[0])


def forward_field_arr(p: np.ndarray, params: DipoleParams) -> np.ndarray:
    """Vectorized forward model, p of shape (n, 3)."""
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r2 = x * x + y * y + z * z
    if np.any(r2 < params.r_min**2):
        raise DegeneratePosition(
            f"|p| < r_min = {params.r_min}; point-source model diverges"
        )
    r5 = r2**2.5
    k = params.moment / (4.0 * math.pi * r5)
    return np.stack(
        [3.0 * k * x * z, 3.0 * k * y * z, 2.0 * k * (2.0 * z * z - x * x - y * y)],
        axis=-1,
    )


def field_jacobian_arr(p: np.ndarray, params: DipoleParams) -> np.ndarray:
    """d(forward_field)/dp, shape (n, 3, 3).  Used by the Newton polish."""
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r2 = x * x + y * y + z * z
    r7 = r2**3.5
    k = params.moment / (4.0 * math.pi * r7)
    q = 2.0 * z * z - x * x - y * y
    jac = np.empty(p.shape[:-1] + (3, 3), dtype=float)
    jac[..., 0, 0] = 3.0 * k * z * (r2 - 5.0 * x * x)
    jac[..., 0, 1] = -15.0 * k * x * y * z
    jac[..., 0, 2] = 3.0 * k * x * (r2 - 5.0 * z * z)
    jac[..., 1, 0] = jac[..., 0, 1]
    jac[..., 1, 1] = 3.0 * k * z * (r2 - 5.0 * y * y)
    jac[..., 1, 2] = 3.0 * k * y * (r2 - 5.0 * z * z)
    jac[..., 2, 0] = 2.0 * k * x * (-2.0 * r2 - 5.0 * q)
    jac[..., 2, 1] = 2.0 * k * y * (-2.0 * r2 - 5.0 * q)
    jac[..., 2, 2] = 2.0 * k * z * (4.0 * r2 - 5.0 * q)
    return jac


def _solve_cos2(g: np.ndarray) -> np.ndarray:
    """Solve (27 g^2 - 36) u^2 + (24 - 15 g^2) u + 4 (g^2 - 1) = 0 for the
    root consistent with sign(g) = sign(3u - 1), clipped to [0, 1]."""
    g2 = g * g
    a = 27.0 * g2 - 36.0  # always in [-36, -9]
    b = 24.0 - 15.0 * g2
    c = 4.0 * (g2 - 1.0)
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    sq = np.sqrt(disc)
    # stable pair: qf and c/qf avoid cancellation for either root
    qf = -0.5 * (b + np.where(b >= 0.0, sq, -sq))
    u1 = qf / a
    with np.errstate(divide="ignore", invalid="ignore"):
        u2 = np.where(qf != 0.0, c / qf, 0.0)
    want_high = g >= 0.0
    third = 1.0 / 3.0
    pick_u1 = np.where(want_high, u1 >= third, u1 <= third)
    u = np.where(pick_u1, u1, u2)
    return np.clip(u, 0.0, 1.0)


def invert_field(
    b_tx: Vec3 | np.ndarray, params: DipoleParams, hs: HalfSpace | None = None
) -> Vec3:
    """Recover the source-relative position from a Tx-frame field vector."""
    a = b_tx.as_array() if isinstance(b_tx, Vec3) else np.asarray(b_tx, dtype=float)
    return Vec3.from_array(invert_field_arr(a[None, :], params, hs)[0])


def invert_field_arr(
    b_tx: np.ndarray,
    params: DipoleParams,
    hs: HalfSpace | None = None,
    polish: bool = True,
) -> np.ndarray:
    """Vectorized inversion, b_tx of shape (n, 3) in the Tx frame.

    Raises OutOfRange if any row's magnitude falls outside the attainable
    band for the configured shell, or if a recovered radius leaves
    [r_min, r_max].  Emits AmbiguousAzimuthWarning for rows whose transverse
    components are exactly zero (on-axis or equatorial measurements).
    """
    if hs is None:
        hs = HalfSpace()
    b = np.asarray(b_tx, dtype=float)
    bmag = np.linalg.norm(b, axis=-1)
    b_min, b_max = params.field_band()
    if np.any(bmag < b_min) or np.any(bmag > b_max):
        bad = int(np.argmax((bmag < b_min) | (bmag > b_max)))
        raise OutOfRange(
            f"|b| = {bmag.flat[bad]:.6g} outside [{b_min:.6g}, {b_max:.6g}] "
            f"for r in [{params.r_min}, {params.r_max}] (row {bad})"
        )

    g = b[..., 2] / bmag
    u = _solve_cos2(g)
    angular = 27.0 * u * u - 15.0 * u + 4.0
    r = (params.moment * np.sqrt(angular) / (4.0 * math.pi * bmag)) ** (1.0 / 3.0)

    ambiguous = (b[..., 0] == 0.0) & (b[..., 1] == 0.0)
    if np.any(ambiguous):
        warnings.warn(
            "transverse field components are zero; azimuth fixed to 0",
            AmbiguousAzimuthWarning,
            stacklevel=2,
        )
    # candidate with z >= 0: common factor 3Mz/(4 pi r^5) >= 0, so the
    # transverse field direction equals the position azimuth directly
    phi = np.arctan2(b[..., 1], b[..., 0])
    rho = r * np.sqrt(np.maximum(1.0 - u, 0.0))
    p = np.stack(
        [rho * np.cos(phi), rho * np.sin(phi), r * np.sqrt(u)], axis=-1
    )

    if polish:
        p = _newton_polish(p, b, params)
        r = np.linalg.norm(p, axis=-1)

    # point-inversion ambiguity: keep the candidate inside the half-space
    n = hs.normal.as_array()
    flip = p @ n < 0.0
    p[flip] = -p[flip]

    eps = 1e-9
    if np.any(r < params.r_min * (1.0 - eps)) or np.any(r > params.r_max * (1.0 + eps)):
        bad = int(np.argmax((r < params.r_min * (1 - eps)) | (r > params.r_max * (1 + eps))))
        raise OutOfRange(
            f"recovered radius {r.flat[bad]:.6g} outside "
            f"[{params.r_min}, {params.r_max}] (row {bad})"
        )
    return p


def _newton_polish(p: np.ndarray, b: np.ndarray, params: DipoleParams) -> np.ndarray:
    """Up to _NEWTON_MAX_ITERS damped Newton steps on the forward model.

    Steps are only accepted where they reduce the residual, so the closed
    form result is never made worse (noisy inputs included)."""
    p = np.array(p, copy=True)
    bnorm = np.linalg.norm(b, axis=-1)
    res = forward_field_arr(p, params) - b
    err = np.linalg.norm(res, axis=-1) / bnorm
    for _ in range(_NEWTON_MAX_ITERS):
        active = err > _NEWTON_RTOL
        if not np.any(active):
            break
        jac = field_jacobian_arr(p[active], params)
        det = np.linalg.det(jac)
        ok = np.abs(det) > 0.0
        step = np.zeros_like(p[active])
        if np.any(ok):
            step[ok] = np.linalg.solve(jac[ok], -res[active][ok][..., None])[..., 0]
        cand = p[active] + step
        # reject candidates that leave the model's domain
        good_r = np.linalg.norm(cand, axis=-1) >= params.r_min
        cand_res = np.where(
            good_r[:, None],
            _forward_unchecked(cand, params) - b[active],
            np.inf,
        )
        cand_err = np.linalg.norm(cand_res, axis=-1) / bnorm[active]
        better = cand_err < err[active]
        idx = np.flatnonzero(active)[better]
        p[idx] = cand[better]
        res[idx] = cand_res[better]
        new_err = err.copy()
        new_err[idx] = cand_err[better]
        if np.all(new_err[active] >= err[active]):
            break
        err = new_err
    return p


def _forward_unchecked(p: np.ndarray, params: DipoleParams) -> np.ndarray:
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r2 = x * x + y * y + z * z
    r5 = r2**2.5
    k = params.moment / (4.0 * math.pi * r5)
    return np.stack(
        [3.0 * k * x * z, 3.0 * k * y * z, 2.0 * k * (2.0 * z * z - x * x - y * y)],
        axis=-1,
    )


def resolve_frame(m: Measurement) -> Vec3:
    """Rotate the measured field from the Rx frame into the Tx frame."""
    return rotate_vec(relative_orientation(m.q_tx, m.q_rx), m.b_rx)


def resolve_frame_arr(
    b_rx: np.ndarray, q_rx: np.ndarray, q_tx: np.ndarray
) -> np.ndarray:
    """Vectorized resolve: R(conj(q_tx) (x) q_rx) applied row-wise."""
    from .geom import quat_mul_arr

    q_rel = quat_mul_arr(quat_conj_arr(q_tx), q_rx)
    return rotate_vec_arr(q_rel, b_rx)


def track(m: Measurement, params: DipoleParams, hs: HalfSpace | None = None) -> Pose:
    """Full tracking step: one measurement to one relative pose."""
    if hs is None:
        hs = HalfSpace()
    b_tx = resolve_frame(m)
    position = invert_field(b_tx, params, hs)
    orientation = relative_orientation(m.q_tx, m.q_rx)
    return Pose(position=position, orientation=orientation)
