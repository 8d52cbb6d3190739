"""File formats: packet-log CSVs, cohort manifest, and the binary bundle
container used for datasets, model parameters, and reports.

Packet-log CSVs are UTF-8, LF line endings, full float precision (17
significant digits), one row per packet:

* magnetic (pose packets):  ``t,rx_id,x,y,z,qw,qx,qy,qz``
* IMU packets:              ``t,rx_id,gx,gy,gz,ax,ay,az,mx,my,mz``
* field debug packets:      ``t,rx_id,bx,by,bz,qrw,qrx,qry,qrz,qtw,qtx,qty,qtz``
  (field vector in the Rx frame plus Rx and Tx module-to-earth orientations;
  consumed by the ``track`` command)

rx_id 1 is the left foot, 2 the right foot; timestamps are non-decreasing
per rx_id.

The manifest is a CSV with one row per recording file:
``subject_id,activity,modality,rep,duration_s,rate_hz,seed,path`` with paths
relative to the manifest's directory.

Bundle container (.bundle): little-endian, deterministic byte layout::

    magic  b"MGBN"
    u32    format version (currently 1)
    u64    header length in bytes
    bytes  header JSON (sorted keys): {"meta": {...}, "arrays": [
               {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    bytes  raw C-order array data, concatenated in array-table order

Arrays are stored sorted by name so identical inputs produce identical
bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import pandas as pd

MAG_COLUMNS = ["t", "rx_id", "x", "y", "z", "qw", "qx", "qy", "qz"]
IMU_COLUMNS = ["t", "rx_id", "gx", "gy", "gz", "ax", "ay", "az", "mx", "my", "mz"]
FIELD_COLUMNS = [
    "t", "rx_id", "bx", "by", "bz",
    "qrw", "qrx", "qry", "qrz", "qtw", "qtx", "qty", "qtz",
]
MANIFEST_COLUMNS = [
    "subject_id", "activity", "modality", "rep", "duration_s", "rate_hz", "seed", "path",
]

SCHEMAS = {"mag": MAG_COLUMNS, "imu": IMU_COLUMNS, "field": FIELD_COLUMNS}

ACTIVITIES = ("W", "WW", "J", "M")
ACTIVITY_LABELS = {"J": 0, "M": 1, "W": 2, "WW": 3}
LABEL_NAMES = {v: k for k, v in ACTIVITY_LABELS.items()}

_FLOAT_FMT = "%.17g"

_MAGIC = b"MGBN"
_VERSION = 1


class DataFormatError(Exception):
    """Malformed packet log, manifest, or bundle."""


def write_packet_csv(df: pd.DataFrame, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=_FLOAT_FMT, lineterminator="\n")


def read_packet_csv(path: str | Path, modality: str) -> pd.DataFrame:
    cols = SCHEMAS[modality]
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if list(df.columns) != cols:
        raise DataFormatError(
            f"{path}: expected columns {cols}, got {list(df.columns)}"
        )
    df["rx_id"] = df["rx_id"].astype(np.int64)
    return df


def write_manifest(df: pd.DataFrame, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df[MANIFEST_COLUMNS].to_csv(
        path, index=False, float_format=_FLOAT_FMT, lineterminator="\n"
    )


def read_manifest(path: str | Path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise DataFormatError(f"{path}: manifest missing columns {missing}")
    return df


def save_bundle(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a deterministic binary bundle (see module docstring)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        blob = a.tobytes()
        table.append(
            {
                "name": name,
                "dtype": a.dtype.str,
                "shape": list(a.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_bundle(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataFormatError(f"{path}: not a bundle file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise DataFormatError(f"{path}: unsupported bundle version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        data = fh.read()
    arrays = {}
    for ent in header["arrays"]:
        raw = data[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(raw, dtype=np.dtype(ent["dtype"])).reshape(
            ent["shape"]
        ).copy()
    return header["meta"], arrays
