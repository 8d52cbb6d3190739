"""Preprocessing: packet logs in, labeled normalized window tensors out.

Per-recording chain, identical for both modalities except where noted:

1. de-interleave the packet stream into per-foot series
2. fill each foot's missing samples (the other foot's timestamps and any
   dropped packets) by per-channel linear interpolation onto the union time
   grid; quaternion channels are lerped component-wise and renormalized
3. sliding median filter, window 5, shrinking at the edges
4. linear resampling onto a uniform grid of round(duration * 300) points
5. magnetic modality only: quaternion channels to yaw/pitch/roll, yaw
   unwrapped along time
6. zero-phase elliptic low-pass, cutoff 15 Hz (embedded coefficients below)
7. sliding-window segmentation (600-sample windows slide by 300, 500 by 250)
8. per-window, per-feature min-max normalization to [0, 1]

Feature column order follows the recording tables: left foot block then
right foot block; magnetic blocks are position x, y, z then yaw, pitch,
roll (12 features total); IMU blocks are gyro, accel, magno x, y, z each
(18 features).

Per-recording processing is independent; dataset assembly iterates the
manifest in a canonical order so the result is reproducible regardless of
input ordering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.signal

from . import dataio
from .geom import enforce_quat_continuity, normalize_quat_arr, quat_to_euler_arr

TARGET_RATE_HZ = 300.0
MAX_GAP_S = 0.25
MEDIAN_WINDOW = 5
WINDOW_SLIDES = {600: 300, 500: 250}

# Elliptic low-pass, order 4, fs = 300 Hz, passband edge 15 Hz, designed
# offline (scripts/design_lowpass.py): 0.2 dB single-pass ripple, 40 dB
# single-pass stopband, DC gain normalized to 1.  Applied forward-backward,
# so the effective response has 0.4 dB passband deviation and ~80 dB
# attenuation beyond 45 Hz.
LOWPASS_SOS_15HZ_300HZ = np.array([
    [0.01264281719508011, -0.009082354923561336, 0.01264281719508011,
     1.0, -1.6450268747338035, 0.6952666697153381],
    [1.0, -1.6629815231198821, 1.0,
     1.0, -1.7871631977400564, 0.8958579997053736],
])
_FILTFILT_PAD = 60  # ~3x the slowest section's transient length

_QUAT_COLS = ["qw", "qx", "qy", "qz"]


class PipelineError(Exception):
    pass


class UnknownRxId(PipelineError):
    pass


class TooSparse(PipelineError):
    pass


class SeriesTooShort(PipelineError):
    pass


class LabelMissing(PipelineError):
    pass


def magnetic_feature_names() -> list[str]:
    return [f"{s}_{c}" for s in ("L", "R") for c in ("x", "y", "z", "yaw", "pitch", "roll")]


def imu_feature_names() -> list[str]:
    return [
        f"{s}_{c}"
        for s in ("L", "R")
        for c in ("gx", "gy", "gz", "ax", "ay", "az", "mx", "my", "mz")
    ]


FEATURE_NAMES = {"mag": magnetic_feature_names(), "imu": imu_feature_names()}


@dataclass
class FrameSeries:
    """Uniformly resampled, filtered two-foot series for one recording."""

    t0: float
    rate_hz: float
    channels: np.ndarray  # (n_samples, n_features)
    feature_names: list[str]


@dataclass(frozen=True)
class SplitSpec:
    train: int = 80
    val: int = 10
    test: int = 10
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.train + self.val + self.test != 100:
            raise ValueError("split ratios must sum to 100")


def deinterleave(df: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Split a packet log into (left, right) per-Rx series, rows verbatim."""
    ids = df["rx_id"].to_numpy()
    bad = ~np.isin(ids, (1, 2))
    if bad.any():
        raise UnknownRxId(f"rx_id {ids[bad][0]} at row {int(np.flatnonzero(bad)[0])}")
    left = df[ids == 1].reset_index(drop=True)
    right = df[ids == 2].reset_index(drop=True)
    return left, right


def fill_gaps(series: pd.DataFrame, target_times: np.ndarray) -> pd.DataFrame:
    """Per-channel linear interpolation of one foot's series onto a target
    grid (the union of both feet's timestamps).  Quaternion columns are
    interpolated component-wise and renormalized."""
    if len(series) < 2:
        raise TooSparse(f"need >= 2 samples, got {len(series)}")
    t = series["t"].to_numpy()
    gaps = np.diff(t)
    if gaps.size and gaps.max() > MAX_GAP_S:
        raise TooSparse(
            f"gap of {gaps.max():.3f} s exceeds {MAX_GAP_S} s at t = "
            f"{t[int(np.argmax(gaps))]:.3f}"
        )
    out = {"t": target_times}
    cols = [c for c in series.columns if c not in ("t", "rx_id")]
    has_quat = all(c in cols for c in _QUAT_COLS)
    for c in cols:
        if has_quat and c in _QUAT_COLS:
            continue
        out[c] = np.interp(target_times, t, series[c].to_numpy())
    if has_quat:
        q = enforce_quat_continuity(series[_QUAT_COLS].to_numpy())
        qi = np.stack([np.interp(target_times, t, q[:, k]) for k in range(4)], axis=1)
        qi = normalize_quat_arr(qi)
        for k, c in enumerate(_QUAT_COLS):
            out[c] = qi[:, k]
    return pd.DataFrame(out)[["t"] + cols]


def median_filter(values: np.ndarray, window: int = MEDIAN_WINDOW) -> np.ndarray:
    """Per-channel sliding median; the window shrinks near the edges."""
    if window % 2 == 0:
        raise ValueError("window must be odd")
    values = np.asarray(values, dtype=float)
    n = len(values)
    half = window // 2
    out = np.empty_like(values)
    if n >= window:
        sw = np.lib.stride_tricks.sliding_window_view(values, window, axis=0)
        out[half : n - half] = np.median(sw, axis=-1)
    for i in range(min(half, n)):
        out[i] = np.median(values[: i + half + 1], axis=0)
        out[n - 1 - i] = np.median(values[n - 1 - i - half :], axis=0)
    return out


def resample(t: np.ndarray, values: np.ndarray, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear resampling onto n_out uniform points spanning [t[0], t[-1]]."""
    t_new = np.linspace(t[0], t[-1], n_out)
    out = np.stack(
        [np.interp(t_new, t, values[:, j]) for j in range(values.shape[1])], axis=1
    )
    return t_new, out


def quat_channels_to_euler(values: np.ndarray) -> np.ndarray:
    """One foot's [x, y, z, qw, qx, qy, qz] columns to
    [x, y, z, yaw, pitch, roll]; yaw unwrapped along time."""
    q = normalize_quat_arr(enforce_quat_continuity(values[:, 3:7]))
    e = quat_to_euler_arr(q, warn_gimbal=False)
    e[:, 0] = np.unwrap(e[:, 0])
    return np.concatenate([values[:, :3], e], axis=1)


def _sos_steady_state(sos: np.ndarray) -> np.ndarray:
    """Direct-form-II-transposed steady-state per unit step, per section."""
    zi = np.empty((len(sos), 2))
    for i, (b0, b1, b2, _, a1, a2) in enumerate(sos):
        h1 = (b0 + b1 + b2) / (1.0 + a1 + a2)
        z2 = b2 - a2 * h1
        z1 = b1 - a1 * h1 + z2
        zi[i] = (z1, z2)
    return zi


def _sosfilt_init(x: np.ndarray) -> np.ndarray:
    """One causal pass of the embedded cascade with steady-state priming."""
    ss = _sos_steady_state(LOWPASS_SOS_15HZ_300HZ)
    y = x
    for sec, zrow in zip(LOWPASS_SOS_15HZ_300HZ, ss):
        zi = np.outer(zrow, y[0])
        y, _ = scipy.signal.sosfilt(sec[None, :], y, axis=0, zi=zi[None, :, :])
    return y


def lowpass(values: np.ndarray) -> np.ndarray:
    """Zero-phase 15 Hz elliptic low-pass (forward-backward, odd-reflection
    padding).  Linear, unity DC gain."""
    x = np.asarray(values, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    pad = min(_FILTFILT_PAD, len(x) - 1)
    if pad < 1:
        raise SeriesTooShort("input too short to filter")
    ext = np.concatenate(
        [2.0 * x[0] - x[pad:0:-1], x, 2.0 * x[-1] - x[-2 : -2 - pad : -1]], axis=0
    )
    y = _sosfilt_init(ext)
    y = _sosfilt_init(y[::-1])[::-1]
    y = y[pad : len(y) - pad]
    return y[:, 0] if squeeze else y


def segment(values: np.ndarray, window_len: int) -> np.ndarray:
    """Sliding windows: (n_windows, window_len, n_features)."""
    if window_len not in WINDOW_SLIDES:
        raise ValueError(f"window_len must be one of {sorted(WINDOW_SLIDES)}")
    slide = WINDOW_SLIDES[window_len]
    n = len(values)
    if n < window_len:
        raise SeriesTooShort(f"series of {n} samples < window {window_len}")
    starts = range(0, n - window_len + 1, slide)
    return np.stack([values[s : s + window_len] for s in starts])


def normalize(window: np.ndarray) -> np.ndarray:
    """Per-feature min-max scaling to [0, 1]; constant features map to 0."""
    lo = window.min(axis=0)
    span = window.max(axis=0) - lo
    safe = np.where(span == 0.0, 1.0, span)
    out = (window - lo) / safe
    out[:, span == 0.0] = 0.0
    return out


def preprocess_recording(df: pd.DataFrame, modality: str, n_out: int) -> FrameSeries:
    """Full chain for one packet log; returns the two-foot FrameSeries."""
    left, right = deinterleave(df)
    union_t = np.union1d(left["t"].to_numpy(), right["t"].to_numpy())
    feet = []
    t_new = None
    for series in (left, right):
        filled = fill_gaps(series, union_t)
        vals = filled.drop(columns="t").to_numpy()
        vals = median_filter(vals)
        t_new, vals = resample(union_t, vals, n_out)
        if modality == "mag":
            vals = quat_channels_to_euler(vals)
        vals = lowpass(vals)
        feet.append(vals)
    channels = np.concatenate(feet, axis=1)
    return FrameSeries(
        t0=float(t_new[0]),
        rate_hz=TARGET_RATE_HZ,
        channels=channels,
        feature_names=FEATURE_NAMES[modality],
    )


@dataclass
class Dataset:
    """Labeled, shuffled, split window collection for one modality."""

    windows: np.ndarray  # (n, window_len, n_features) in [0, 1]
    labels: np.ndarray  # (n,) int64, J=0 M=1 W=2 WW=3
    subject_ids: np.ndarray  # (n,) int64
    recording_ids: np.ndarray  # (n,) int64, canonical manifest row order
    idx_train: np.ndarray
    idx_val: np.ndarray
    idx_test: np.ndarray
    meta: dict

    @property
    def window_len(self) -> int:
        return self.windows.shape[1]

    @property
    def n_features(self) -> int:
        return self.windows.shape[2]

    def subset(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.idx_train, "val": self.idx_val, "test": self.idx_test}[which]
        return self.windows[idx], self.labels[idx]

    def train_val(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.concatenate([self.idx_train, self.idx_val])
        return self.windows[idx], self.labels[idx]

    def save(self, path) -> None:
        dataio.save_bundle(
            path,
            meta=self.meta,
            arrays={
                "windows": self.windows,
                "labels": self.labels,
                "subject_ids": self.subject_ids,
                "recording_ids": self.recording_ids,
                "idx_train": self.idx_train,
                "idx_val": self.idx_val,
                "idx_test": self.idx_test,
            },
        )

    @staticmethod
    def load(path) -> "Dataset":
        meta, arrays = dataio.load_bundle(path)
        return Dataset(meta=meta, **{k: arrays[k] for k in arrays})


def build_dataset(
    manifest: pd.DataFrame,
    base_dir: str | Path,
    modality: str,
    window_len: int,
    split: SplitSpec,
    extra_meta: dict | None = None,
) -> Dataset:
    """Process every manifest recording of one modality into a Dataset.

    The manifest is iterated in canonical (subject, activity, rep) order, so
    shuffled manifests produce the identical dataset.
    """
    if modality not in FEATURE_NAMES:
        raise ValueError(f"modality must be one of {sorted(FEATURE_NAMES)}")
    rows = manifest[manifest["modality"] == modality].copy()
    if rows.empty:
        raise LabelMissing(f"manifest has no {modality} recordings")
    rows = rows.sort_values(["subject_id", "activity", "rep"], kind="mergesort")
    base_dir = Path(base_dir)

    all_windows, labels, subjects, rec_ids = [], [], [], []
    for rec_id, (_, row) in enumerate(rows.iterrows()):
        activity = str(row["activity"])
        if not activity or activity == "nan":
            raise LabelMissing(f"recording {row['path']} has no activity label")
        if activity not in dataio.ACTIVITY_LABELS:
            raise LabelMissing(f"recording {row['path']}: unknown activity {activity!r}")
        df = dataio.read_packet_csv(base_dir / row["path"], modality)
        n_out = int(round(float(row["duration_s"]) * TARGET_RATE_HZ))
        series = preprocess_recording(df, modality, n_out)
        wins = segment(series.channels, window_len)
        for w in wins:
            all_windows.append(normalize(w))
        labels.extend([dataio.ACTIVITY_LABELS[activity]] * len(wins))
        subjects.extend([int(row["subject_id"])] * len(wins))
        rec_ids.extend([rec_id] * len(wins))

    windows = np.stack(all_windows)
    labels = np.asarray(labels, dtype=np.int64)
    subjects = np.asarray(subjects, dtype=np.int64)
    rec_ids = np.asarray(rec_ids, dtype=np.int64)

    n = len(windows)
    rng = np.random.default_rng(split.shuffle_seed)
    perm = rng.permutation(n)
    n_train = n * split.train // 100
    n_val = n * split.val // 100
    idx_train = perm[:n_train]
    idx_val = perm[n_train : n_train + n_val]
    idx_test = perm[n_train + n_val :]

    meta = {
        "modality": modality,
        "window_len": window_len,
        "n_windows": n,
        "feature_names": FEATURE_NAMES[modality],
        "split": {"train": split.train, "val": split.val, "test": split.test,
                  "shuffle_seed": split.shuffle_seed},
        "cohort": {
            "subjects": sorted(int(s) for s in rows["subject_id"].unique()),
            "activities": sorted(str(a) for a in rows["activity"].unique()),
            "reps": int(rows["rep"].max()) + 1,
        },
        "label_names": {str(v): k for k, v in dataio.ACTIVITY_LABELS.items()},
    }
    if extra_meta:
        meta.update(extra_meta)
    return Dataset(
        windows=windows, labels=labels, subject_ids=subjects, recording_ids=rec_ids,
        idx_train=idx_train, idx_val=idx_val, idx_test=idx_test, meta=meta,
    )
