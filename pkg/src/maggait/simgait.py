"""Synthetic two-foot gait recordings for the four activities (W, WW, J, M).

Stands in for human data collection: generates per-subject foot trajectories
relative to a waist-worn transmitter, then synthesizes the two sensor
modalities (magnetic pose packets and IMU + magnetometer packets) with
timestamp jitter, packet loss, and asynchronous interleaving.

Frame conventions:

* The level waist frame is NED-like: +x forward (walking direction),
  +y to the wearer's right, +z down the legs.  The feet therefore live in
  the z > 0 half-space, matching the default tracking HalfSpace.
* The Tx module frame differs from the level frame by a mount rotation
  (small periodic wobble, plus a forward-lean pitch when carrying weight);
  magnetic packets report poses in the Tx module frame, so the lean leaks
  across position channels for that modality only.  The foot IMUs are
  unaffected by what the waist does.
* Gravity is (0, 0, +9.81) in the level frame; the accelerometer reads the
  specific force R(q_foot)^T (a_world - g).

The trajectory generator is a pure function of its inputs; all randomness
(subject profiles, per-recording variation, sensor noise) enters through
numpy SeedSequences derived from the cohort master seed, so cohort
generation is byte-reproducible and per-subject work could be farmed out in
parallel without changing the output.

Trajectory model: stance/swing composition with a quintic-smoothstep swing
and a sin^2 lift bump, half-cycle phase offset between feet.  W translates
forward (sawtooth relative to the waist), WW shortens and slows it per
weight_effect and tilts the Tx mount, J doubles cadence and lift, M zeroes
the forward step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import dataio
from .geom import (
    enforce_quat_continuity,
    euler_to_quat_arr,
    normalize_quat_arr,
    quat_conj_arr,
    quat_mul_arr,
    quat_mul_raw_arr,
    rotate_vec_arr,
    rotvec_to_quat_arr,
)
from .magmodel import DipoleParams, HalfSpace, forward_field_arr, invert_field_arr

GRAVITY = 9.81
# earth field unit vector in the level frame (x north, z down), dip ~65 deg
EARTH_FIELD = np.array([math.cos(math.radians(65.0)), 0.0, math.sin(math.radians(65.0))])

TRACE_RATE_HZ = 1000.0

LEFT, RIGHT = 0, 1
FOOT_RX_ID = {LEFT: 1, RIGHT: 2}


@dataclass(frozen=True)
class SubjectProfile:
    """Kinematic parameters of one synthetic participant."""

    subject_id: int
    cadence_hz: float  # steps per second, both feet combined
    step_length_m: float
    foot_lift_m: float
    noise_seed: int
    waist_to_foot_m: float = 0.9
    hip_width_m: float = 0.2
    toe_out_rad: float = 0.08
    pitch_amp_rad: float = 0.3
    bob_amp_m: float = 0.012
    sway_amp_m: float = 0.012
    duty_jitter: float = 0.0  # added to the activity duty factor

    def __post_init__(self):
        if not 0.5 <= self.cadence_hz <= 4.0:
            raise ValueError("cadence_hz outside [0.5, 4]")
        if not 0.0 <= self.step_length_m <= 1.2:
            raise ValueError("step_length_m outside [0, 1.2]")
        if not 0.01 <= self.foot_lift_m <= 0.5:
            raise ValueError("foot_lift_m outside [0.01, 0.5]")


@dataclass(frozen=True)
class ActivityParams:
    """One recording's activity settings plus per-recording variation."""

    activity: str  # W, WW, J, M
    duration_s: float = 10.0
    weight_effect: float = 0.07  # WW only: fractional step/lift reduction
    phase0: float = 0.0  # gait phase at t = 0, cycles
    cadence_scale: float = 1.0  # per-recording wobble around the profile
    amp_scale: float = 1.0

    def __post_init__(self):
        if self.activity not in dataio.ACTIVITIES:
            raise ValueError(f"unknown activity {self.activity!r}")
        if self.duration_s <= 0.0:
            raise ValueError("duration_s must be > 0")
        if not 0.0 <= self.weight_effect <= 1.0:
            raise ValueError("weight_effect outside [0, 1]")


@dataclass(frozen=True)
class NoiseSpec:
    """Sensor and channel noise configuration (all overridable)."""

    field_noise_rel: float = 1e-3  # additive field noise, sigma = rel * |B|
    orient_noise_rad: float = math.radians(0.5)
    jitter_frac: float = 0.1  # timestamp jitter sigma, fraction of period
    p_drop: float = 0.02
    accel_sigma: float = 0.05  # m/s^2
    gyro_sigma: float = 0.005  # rad/s
    magno_sigma: float = 0.005  # fraction of unit field
    accel_bias_sigma: float = 0.1
    gyro_bias_sigma: float = 0.01
    magno_bias_sigma: float = 0.01

    @staticmethod
    def off() -> "NoiseSpec":
        return NoiseSpec(
            field_noise_rel=0.0, orient_noise_rad=0.0, jitter_frac=0.0, p_drop=0.0,
            accel_sigma=0.0, gyro_sigma=0.0, magno_sigma=0.0,
            accel_bias_sigma=0.0, gyro_bias_sigma=0.0, magno_bias_sigma=0.0,
        )


@dataclass
class TruthTrace:
    """Dense ground truth at TRACE_RATE_HZ.

    rel_pos/rel_quat are the foot pose in the Tx module frame (what the
    magnetic system tracks); world_pos/world_quat are the foot kinematics in
    the level frame (what the foot IMU feels); q_tx is the Tx module's
    orientation in the level frame.  Foot axis 0 = left, 1 = right.
    """

    t: np.ndarray  # (n,)
    rel_pos: np.ndarray  # (2, n, 3)
    rel_quat: np.ndarray  # (2, n, 4)
    world_pos: np.ndarray  # (2, n, 3)
    world_quat: np.ndarray  # (2, n, 4)
    q_tx: np.ndarray  # (n, 4)
    rate_hz: float = TRACE_RATE_HZ


# duty factor (stance fraction), cadence/step/lift multipliers per activity
_ACTIVITY_SHAPE = {
    "W": dict(duty=0.60, cad=1.0, step=1.0, lift=1.0, wobble=1.0),
    "WW": dict(duty=0.63, cad=1.0, step=1.0, lift=1.0, wobble=0.9),
    "J": dict(duty=0.40, cad=2.0, step=1.0, lift=2.0, wobble=1.6),
    "M": dict(duty=0.50, cad=1.0, step=0.0, lift=1.1, wobble=0.5),
}

# WW-only: Tx mount forward lean per unit weight_effect (backpack posture)
_LEAN_PER_WEIGHT = 0.6
# WW-only: cadence slowdown per unit weight_effect
_CADENCE_DROP = 1.0 / 3.0


def _smoothstep5(w: np.ndarray) -> np.ndarray:
    """Quintic smoothstep: zero velocity and acceleration at both ends."""
    return w * w * w * (w * (6.0 * w - 15.0) + 10.0)


def gen_trajectory(profile: SubjectProfile, act: ActivityParams) -> TruthTrace:
    """Deterministic two-foot trajectory for one recording."""
    shape = _ACTIVITY_SHAPE[act.activity]
    we = act.weight_effect if act.activity == "WW" else 0.0

    cadence = profile.cadence_hz * shape["cad"] * act.cadence_scale * (1.0 - _CADENCE_DROP * we)
    step = profile.step_length_m * shape["step"] * act.amp_scale * (1.0 - we)
    lift = profile.foot_lift_m * shape["lift"] * act.amp_scale * (1.0 - we)
    duty = min(max(shape["duty"] + profile.duty_jitter, 0.2), 0.8)
    lean = _LEAN_PER_WEIGHT * we
    wob = shape["wobble"]

    n = int(round(act.duration_s * TRACE_RATE_HZ))
    t = np.arange(n) / TRACE_RATE_HZ
    T = 2.0 / cadence  # per-foot cycle: each foot steps once per two steps
    stride = 2.0 * step
    v = step * cadence  # waist speed

    rel_pos = np.empty((2, n, 3))
    rel_quat = np.empty((2, n, 4))
    world_pos = np.empty((2, n, 3))
    world_quat = np.empty((2, n, 4))

    # waist vertical bob (twice per cycle) and lateral sway (once per cycle),
    # expressed as what they add to the feet's waist-relative coordinates
    tau_w = t / T + act.phase0
    bob = profile.bob_amp_m * wob * (1.0 - 1.5 * we) * np.cos(4.0 * math.pi * tau_w)
    sway = profile.sway_amp_m * wob * np.sin(2.0 * math.pi * tau_w)

    for foot, (phase_off, y_sign) in ((LEFT, (0.5, -1.0)), (RIGHT, (0.0, 1.0))):
        tau = t / T + act.phase0 + phase_off
        k = np.floor(tau)
        u = tau - k
        swing = u >= duty
        w = np.clip((u - duty) / (1.0 - duty), 0.0, 1.0)
        s = _smoothstep5(w) * swing

        x_world = stride * (k + s) + 0.01 * np.sin(2.0 * math.pi * tau)
        y_world = np.full(n, y_sign * profile.hip_width_m / 2.0)
        z_world = profile.waist_to_foot_m - lift * np.square(np.sin(math.pi * w)) * swing
        world_pos[foot] = np.stack([x_world, y_world, z_world], axis=-1)

        # waist-relative, level-frame coordinates
        x_rel = x_world - stride * tau + stride * duty / 2.0
        y_rel = y_world + sway
        z_rel = z_world + bob
        p_level = np.stack([x_rel, y_rel, z_rel], axis=-1)

        yaw_f = y_sign * profile.toe_out_rad + 0.02 * wob * np.sin(2.0 * math.pi * tau)
        pitch_f = -profile.pitch_amp_rad * wob * np.sin(2.0 * math.pi * w) * swing
        roll_f = 0.05 * wob * y_sign * np.sin(2.0 * math.pi * w) * swing
        q_foot = euler_to_quat_arr(np.stack([yaw_f, pitch_f, roll_f], axis=-1))
        world_quat[foot] = q_foot

        rel_pos[foot] = p_level  # rotated into the Tx frame below
        rel_quat[foot] = q_foot

    # Tx mount wobble; the WW lean tilts the whole Tx frame
    pitch_m = lean + 0.02 * wob * np.sin(4.0 * math.pi * tau_w + 0.4)
    roll_m = 0.025 * wob * np.sin(2.0 * math.pi * tau_w + 1.1)
    yaw_m = 0.03 * wob * np.sin(2.0 * math.pi * 0.15 * t + 0.7)
    q_tx = euler_to_quat_arr(np.stack([yaw_m, pitch_m, roll_m], axis=-1))
    q_tx_conj = quat_conj_arr(q_tx)

    for foot in (LEFT, RIGHT):
        rel_pos[foot] = rotate_vec_arr(q_tx_conj, rel_pos[foot])
        rel_quat[foot] = quat_mul_arr(q_tx_conj, rel_quat[foot])

    return TruthTrace(
        t=t, rel_pos=rel_pos, rel_quat=rel_quat,
        world_pos=world_pos, world_quat=world_quat, q_tx=q_tx,
    )


# ---------------------------------------------------------------------------
# Sensor synthesis
# ---------------------------------------------------------------------------


def _sample_times(rng: np.random.Generator, duration: float, rate_hz: float,
                  jitter_frac: float, t_max: float) -> np.ndarray:
    n = int(math.floor(duration * rate_hz))
    base = (np.arange(n) + 0.5) / rate_hz
    ts = base + rng.normal(0.0, jitter_frac / rate_hz, size=n)
    return np.sort(np.clip(ts, 0.0, t_max))


def _interp_cols(t_src: np.ndarray, vals: np.ndarray, t_new: np.ndarray) -> np.ndarray:
    out = np.empty((len(t_new), vals.shape[1]))
    for j in range(vals.shape[1]):
        out[:, j] = np.interp(t_new, t_src, vals[:, j])
    return out


def _interp_quat(t_src: np.ndarray, q: np.ndarray, t_new: np.ndarray) -> np.ndarray:
    qc = enforce_quat_continuity(q)
    return normalize_quat_arr(_interp_cols(t_src, qc, t_new))


def synth_magnetic(
    trace: TruthTrace,
    params: DipoleParams,
    noise: NoiseSpec,
    rate_hz: float = 300.0,
    rng: np.random.Generator | None = None,
) -> pd.DataFrame:
    """Pose packets as the tracking system would emit them.

    Position noise enters in field space: true position -> forward field ->
    additive field noise -> inversion, mimicking the physical error path.
    """
    if not 100.0 <= rate_hz <= 1000.0:
        raise ValueError("rate_hz outside [100, 1000]")
    if rng is None:
        rng = np.random.default_rng(0)
    hs = HalfSpace()
    frames = []
    for foot in (LEFT, RIGHT):
        ts = _sample_times(rng, trace.t[-1] + 1.0 / trace.rate_hz, rate_hz,
                           noise.jitter_frac, trace.t[-1])
        p = _interp_cols(trace.t, trace.rel_pos[foot], ts)
        q = _interp_quat(trace.t, trace.rel_quat[foot], ts)

        b = forward_field_arr(p, params)
        if noise.field_noise_rel > 0.0:
            sigma = noise.field_noise_rel * np.linalg.norm(b, axis=1, keepdims=True)
            b = b + sigma * rng.standard_normal(b.shape)
        p = invert_field_arr(b, params, hs)
        if noise.orient_noise_rad > 0.0:
            rv = rng.normal(0.0, noise.orient_noise_rad / math.sqrt(3.0), size=(len(ts), 3))
            q = quat_mul_arr(q, rotvec_to_quat_arr(rv))

        keep = rng.random(len(ts)) >= noise.p_drop
        df = pd.DataFrame(
            np.column_stack([ts, p, q])[keep],
            columns=["t", "x", "y", "z", "qw", "qx", "qy", "qz"],
        )
        df.insert(1, "rx_id", np.int64(FOOT_RX_ID[foot]))
        frames.append(df)
    out = pd.concat(frames, ignore_index=True)
    out = out.sort_values("t", kind="mergesort", ignore_index=True)
    return out[dataio.MAG_COLUMNS]


def _world_kinematics(trace: TruthTrace, foot: int):
    """Foot world acceleration (with gravity, body frame), body rates, and
    body-frame earth field, all on the dense grid."""
    dt = 1.0 / trace.rate_hz
    p = trace.world_pos[foot]
    a_world = np.empty_like(p)
    a_world[1:-1] = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / dt**2
    a_world[0] = a_world[1]
    a_world[-1] = a_world[-2]

    q = enforce_quat_continuity(trace.world_quat[foot])
    qdot = np.empty_like(q)
    qdot[1:-1] = (q[2:] - q[:-2]) / (2.0 * dt)
    qdot[0] = qdot[1]
    qdot[-1] = qdot[-2]
    omega_body = 2.0 * quat_mul_raw_arr(quat_conj_arr(q), qdot)[:, 1:]

    g = np.array([0.0, 0.0, GRAVITY])
    q_conj = quat_conj_arr(q)
    accel_body = rotate_vec_arr(q_conj, a_world - g)
    magno_body = rotate_vec_arr(q_conj, np.broadcast_to(EARTH_FIELD, p.shape))
    return accel_body, omega_body, magno_body


def synth_imu(
    trace: TruthTrace,
    noise: NoiseSpec,
    rate_hz: float = 300.0,
    rng: np.random.Generator | None = None,
    bias: dict | None = None,
) -> pd.DataFrame:
    """IMU + magnetometer packets from the dense trace.

    bias, when given, holds per-subject constant offsets: arrays of shape
    (2, 3) under keys 'accel', 'gyro', 'magno' (foot-indexed).
    """
    if not 100.0 <= rate_hz <= 1000.0:
        raise ValueError("rate_hz outside [100, 1000]")
    if rng is None:
        rng = np.random.default_rng(0)
    frames = []
    for foot in (LEFT, RIGHT):
        accel, gyro, magno = _world_kinematics(trace, foot)
        ts = _sample_times(rng, trace.t[-1] + 1.0 / trace.rate_hz, rate_hz,
                           noise.jitter_frac, trace.t[-1])
        a = _interp_cols(trace.t, accel, ts) + noise.accel_sigma * rng.standard_normal((len(ts), 3))
        g = _interp_cols(trace.t, gyro, ts) + noise.gyro_sigma * rng.standard_normal((len(ts), 3))
        m = _interp_cols(trace.t, magno, ts) + noise.magno_sigma * rng.standard_normal((len(ts), 3))
        if bias is not None:
            a += bias["accel"][foot]
            g += bias["gyro"][foot]
            m += bias["magno"][foot]
        keep = rng.random(len(ts)) >= noise.p_drop
        df = pd.DataFrame(
            np.column_stack([ts, g, a, m])[keep],
            columns=["t", "gx", "gy", "gz", "ax", "ay", "az", "mx", "my", "mz"],
        )
        df.insert(1, "rx_id", np.int64(FOOT_RX_ID[foot]))
        frames.append(df)
    out = pd.concat(frames, ignore_index=True)
    out = out.sort_values("t", kind="mergesort", ignore_index=True)
    return out[dataio.IMU_COLUMNS]


def synth_field_log(
    trace: TruthTrace,
    params: DipoleParams,
    noise: NoiseSpec,
    rate_hz: float = 300.0,
    rng: np.random.Generator | None = None,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Debug modality: raw Rx-frame field measurements plus both module
    orientations, and the matching ground-truth poses row for row."""
    if rng is None:
        rng = np.random.default_rng(0)
    frames = []
    truth_frames = []
    for foot in (LEFT, RIGHT):
        ts = _sample_times(rng, trace.t[-1] + 1.0 / trace.rate_hz, rate_hz,
                           noise.jitter_frac, trace.t[-1])
        p = _interp_cols(trace.t, trace.rel_pos[foot], ts)
        q_rel = _interp_quat(trace.t, trace.rel_quat[foot], ts)
        q_tx = _interp_quat(trace.t, trace.q_tx, ts)
        q_rx = quat_mul_arr(q_tx, q_rel)

        b_tx = forward_field_arr(p, params)
        if noise.field_noise_rel > 0.0:
            sigma = noise.field_noise_rel * np.linalg.norm(b_tx, axis=1, keepdims=True)
            b_tx = b_tx + sigma * rng.standard_normal(b_tx.shape)
        b_rx = rotate_vec_arr(quat_conj_arr(q_rel), b_tx)

        keep = rng.random(len(ts)) >= noise.p_drop
        df = pd.DataFrame(
            np.column_stack([ts, b_rx, q_rx, q_tx])[keep],
            columns=["t", "bx", "by", "bz", "qrw", "qrx", "qry", "qrz",
                     "qtw", "qtx", "qty", "qtz"],
        )
        df.insert(1, "rx_id", np.int64(FOOT_RX_ID[foot]))
        frames.append(df)
        tdf = pd.DataFrame(
            np.column_stack([ts, p, q_rel])[keep],
            columns=["t", "x", "y", "z", "qw", "qx", "qy", "qz"],
        )
        tdf.insert(1, "rx_id", np.int64(FOOT_RX_ID[foot]))
        truth_frames.append(tdf)
    log = pd.concat(frames, ignore_index=True).sort_values("t", kind="mergesort", ignore_index=True)
    truth = pd.concat(truth_frames, ignore_index=True).sort_values("t", kind="mergesort", ignore_index=True)
    return log[dataio.FIELD_COLUMNS], truth[dataio.MAG_COLUMNS]


# ---------------------------------------------------------------------------
# Cohort generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CohortConfig:
    master_seed: int = 7
    duration_s: float = 10.0
    reps_per_activity: int = 6
    rate_hz: float = 300.0
    weight_effect: float = 0.07
    dipole: DipoleParams = field(default_factory=DipoleParams)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    modalities: tuple[str, ...] = ("mag", "imu")
    field_logs: bool = False


def gen_profiles(n_subjects: int, master_seed: int) -> list[SubjectProfile]:
    profiles = []
    for s in range(n_subjects):
        rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(1, s)))
        profiles.append(
            SubjectProfile(
                subject_id=s + 1,
                cadence_hz=rng.uniform(1.7, 2.1),
                step_length_m=rng.uniform(0.55, 0.8),
                foot_lift_m=rng.uniform(0.06, 0.11),
                noise_seed=int(rng.integers(0, 2**31 - 1)),
                waist_to_foot_m=rng.uniform(0.82, 1.0),
                hip_width_m=rng.uniform(0.16, 0.24),
                toe_out_rad=rng.uniform(0.04, 0.12),
                pitch_amp_rad=rng.uniform(0.25, 0.4),
                bob_amp_m=rng.uniform(0.008, 0.02),
                sway_amp_m=rng.uniform(0.008, 0.02),
                duty_jitter=rng.uniform(-0.01, 0.01),
            )
        )
    return profiles


def _subject_bias(profile: SubjectProfile, noise: NoiseSpec) -> dict:
    rng = np.random.default_rng(profile.noise_seed)
    return {
        "accel": rng.normal(0.0, noise.accel_bias_sigma, size=(2, 3)),
        "gyro": rng.normal(0.0, noise.gyro_bias_sigma, size=(2, 3)),
        "magno": rng.normal(0.0, noise.magno_bias_sigma, size=(2, 3)),
    }


def _rep_activity_params(activity: str, config: CohortConfig,
                         rng: np.random.Generator) -> ActivityParams:
    return ActivityParams(
        activity=activity,
        duration_s=config.duration_s,
        weight_effect=config.weight_effect,
        phase0=rng.uniform(0.0, 1.0),
        cadence_scale=float(np.clip(1.0 + 0.02 * rng.standard_normal(), 0.95, 1.05)),
        amp_scale=float(np.clip(1.0 + 0.03 * rng.standard_normal(), 0.9, 1.1)),
    )


def gen_cohort(n_subjects: int, config: CohortConfig, out_dir: str | Path) -> Path:
    """Write all recordings plus the manifest; returns the manifest path.

    Layout: <out_dir>/s<NN>/<activity>_r<rep>_<modality>.csv and
    <out_dir>/manifest.csv.  Fully deterministic in (n_subjects, config).
    """
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    profiles = gen_profiles(n_subjects, config.master_seed)
    rows = []
    modalities = list(config.modalities) + (["field"] if config.field_logs else [])
    for s_idx, profile in enumerate(profiles):
        bias = _subject_bias(profile, config.noise)
        for a_idx, activity in enumerate(dataio.ACTIVITIES):
            for rep in range(config.reps_per_activity):
                traj_ss = np.random.SeedSequence(
                    config.master_seed, spawn_key=(2, s_idx, a_idx, rep)
                )
                act = _rep_activity_params(activity, config, np.random.default_rng(traj_ss))
                trace = gen_trajectory(profile, act)
                for modality in modalities:
                    mod_idx = {"mag": 0, "imu": 1, "field": 2}[modality]
                    ss = np.random.SeedSequence(
                        config.master_seed, spawn_key=(3, s_idx, a_idx, rep, mod_idx)
                    )
                    rng = np.random.default_rng(ss)
                    rel = Path(f"s{profile.subject_id:02d}") / f"{activity}_r{rep}_{modality}.csv"
                    path = out_dir / rel
                    if modality == "mag":
                        df = synth_magnetic(trace, config.dipole, config.noise,
                                            config.rate_hz, rng)
                        dataio.write_packet_csv(df, path)
                    elif modality == "imu":
                        df = synth_imu(trace, config.noise, config.rate_hz, rng, bias)
                        dataio.write_packet_csv(df, path)
                    else:
                        log, truth = synth_field_log(trace, config.dipole, config.noise,
                                                     config.rate_hz, rng)
                        dataio.write_packet_csv(log, path)
                        dataio.write_packet_csv(
                            truth, path.with_name(path.stem + "_truth.csv")
                        )
                    rows.append(
                        {
                            "subject_id": profile.subject_id,
                            "activity": activity,
                            "modality": modality,
                            "rep": rep,
                            "duration_s": config.duration_s,
                            "rate_hz": config.rate_hz,
                            "seed": int(ss.generate_state(1)[0]),
                            "path": rel.as_posix(),
                        }
                    )
    manifest = pd.DataFrame(rows)
    manifest_path = out_dir / "manifest.csv"
    dataio.write_manifest(manifest, manifest_path)
    return manifest_path
