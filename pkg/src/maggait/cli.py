"""Command-line entry point tying the stages into reproducible experiments.

Commands: simulate, track, preprocess, train, eval, ablate, compare.

Configuration can come from an INI file (--config) with one section per
command; flags mirror the keys one to one and take precedence.  Every
command echoes its effective configuration into its outputs in the same
INI shape, so a run's echo is directly reusable as its config file.
Timestamps are confined to '#' header lines.

Exit codes: 0 success, 2 validation/usage error, 3 runtime or data error.
A lock file guards each output directory against concurrent runs.
"""

from __future__ import annotations

import argparse
import configparser
import datetime
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import dataio, evaluation, nn, pipeline, simgait
from .geom import normalize_quat_arr, quat_conj_arr, quat_mul_arr
from .magmodel import DipoleParams, HalfSpace, TrackingError, invert_field_arr, resolve_frame_arr

LOCK_NAME = ".maggait.lock"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class ValidationError(Exception):
    pass


# dest -> (type, default, help); None default means "required"
_SPECS = {
    "simulate": {
        "out": (str, None, "output directory for the cohort"),
        "subjects": (int, 12, "number of synthetic participants"),
        "seed": (int, 7, "master seed"),
        "duration": (float, 10.0, "seconds per recording"),
        "reps": (int, 6, "recordings per activity"),
        "rate": (float, 300.0, "per-foot packet rate, Hz"),
        "modalities": (str, "mag,imu", "comma list from {mag, imu}"),
        "field_logs": (bool, False, "also emit raw field debug logs"),
        "weight_effect": (float, 0.07, "WW step/lift reduction fraction"),
    },
    "track": {
        "field_log": (str, None, "field packet CSV (simulate --field-logs)"),
        "out": (str, None, "output pose CSV"),
        "truth": (str, "", "optional truth pose CSV for an error summary"),
        "moment": (float, 1.0, "dipole moment"),
    },
    "preprocess": {
        "manifest": (str, None, "cohort manifest CSV"),
        "modality": (str, "mag", "mag or imu"),
        "window": (int, 600, "window length in samples (600 or 500)"),
        "out": (str, None, "output dataset bundle"),
        "seed": (int, 0, "shuffle seed for the train/val/test split"),
    },
    "train": {
        "dataset": (str, None, "dataset bundle"),
        "model": (str, "lstm", "cnn or lstm"),
        "out": (str, None, "output parameter bundle"),
        "epochs": (int, nn.TrainConfig.epochs, "training epochs"),
        "batch": (int, nn.TrainConfig.batch_size, "batch size"),
        "lr": (float, nn.TrainConfig.lr, "Adam learning rate"),
        "seed": (int, 0, "training seed"),
    },
    "eval": {
        "dataset": (str, None, "dataset bundle"),
        "model": (str, "lstm", "cnn or lstm"),
        "runs": (int, 8, "repeated training runs"),
        "epochs": (int, nn.TrainConfig.epochs, "training epochs per run"),
        "batch": (int, nn.TrainConfig.batch_size, "batch size"),
        "lr": (float, nn.TrainConfig.lr, "Adam learning rate"),
        "seed": (int, 0, "base seed; run i uses seed + 1000 i"),
        "out_prefix": (str, None, "report path prefix (.json/.txt)"),
        "roc_csv": (str, "", "optionally write closest-run ROC points here"),
    },
    "ablate": {
        "dataset": (str, None, "magnetic dataset bundle"),
        "model": (str, "lstm", "cnn or lstm"),
        "runs": (int, 8, "repeated training runs per subset"),
        "epochs": (int, nn.TrainConfig.epochs, "training epochs per run"),
        "batch": (int, nn.TrainConfig.batch_size, "batch size"),
        "lr": (float, nn.TrainConfig.lr, "Adam learning rate"),
        "seed": (int, 0, "base seed shared by all subsets"),
        "out_prefix": (str, None, "report path prefix (.json/.txt)"),
    },
    "compare": {
        "mag_dataset": (str, None, "magnetic dataset bundle"),
        "imu_dataset": (str, None, "IMU dataset bundle"),
        "model": (str, "lstm", "cnn or lstm"),
        "runs": (int, 8, "repeated training runs per modality"),
        "epochs": (int, nn.TrainConfig.epochs, "training epochs per run"),
        "batch": (int, nn.TrainConfig.batch_size, "batch size"),
        "lr": (float, nn.TrainConfig.lr, "Adam learning rate"),
        "seed": (int, 0, "base seed shared by both modalities"),
        "out_prefix": (str, None, "report path prefix (.json/.txt)"),
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maggait",
        description="Magnetic 6DoF gait tracking: simulation, preprocessing, "
                    "classification, evaluation.",
    )
    parser.add_argument("--config", default=None, help="INI config file")
    subs = parser.add_subparsers(dest="command", required=True)
    for cmd, spec in _SPECS.items():
        sp = subs.add_parser(cmd, help=f"{cmd} stage")
        for dest, (typ, default, help_text) in spec.items():
            flag = "--" + dest.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, dest=dest, action="store_const", const=True,
                                default=None, help=help_text)
            else:
                sp.add_argument(flag, dest=dest, type=typ, default=None,
                                help=help_text + ("" if default is None
                                                  else f" (default {default})"))
    return parser


def _effective_config(args: argparse.Namespace) -> dict:
    """flag > config-file > built-in default; missing required -> error."""
    spec = _SPECS[args.command]
    file_vals = {}
    if args.config:
        ini = configparser.ConfigParser()
        read = ini.read(args.config)
        if not read:
            raise ValidationError(f"config file {args.config} not found")
        if ini.has_section(args.command):
            file_vals = dict(ini.items(args.command))
    out = {}
    for dest, (typ, default, _) in spec.items():
        flag_val = getattr(args, dest)
        if flag_val is not None:
            out[dest] = flag_val
        elif dest in file_vals:
            raw = file_vals[dest]
            out[dest] = (ini.getboolean(args.command, dest) if typ is bool
                         else typ(raw))
        elif default is not None:
            out[dest] = default
        else:
            raise ValidationError(f"missing required option --{dest.replace('_', '-')}")
    return out


def _config_echo(command: str, cfg: dict) -> str:
    lines = [f"[{command}]"]
    for key in sorted(cfg):
        lines.append(f"{key} = {cfg[key]}")
    return "\n".join(lines) + "\n"


def _timestamp() -> str:
    return datetime.datetime.now().isoformat(timespec="seconds")


class _DirLock:
    def __init__(self, directory: Path):
        directory.mkdir(parents=True, exist_ok=True)
        self.path = directory / LOCK_NAME
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if that run is dead"
            ) from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)


def _train_config(cfg: dict) -> nn.TrainConfig:
    return nn.TrainConfig(batch_size=cfg["batch"], epochs=cfg["epochs"],
                          lr=cfg["lr"], seed=cfg["seed"])


def _model_config(arch: str, dataset: pipeline.Dataset) -> nn.ModelConfig:
    if arch not in ("cnn", "lstm"):
        raise ValidationError(f"unknown model {arch!r}")
    return nn.ModelConfig(arch=arch, window_len=dataset.window_len,
                          n_features=dataset.n_features)


def cmd_simulate(cfg: dict) -> int:
    modalities = tuple(m.strip() for m in cfg["modalities"].split(",") if m.strip())
    for m in modalities:
        if m not in ("mag", "imu"):
            raise ValidationError(f"unknown modality {m!r}")
    if cfg["subjects"] < 1:
        raise ValidationError("subjects must be >= 1")
    if not 100.0 <= cfg["rate"] <= 1000.0:
        raise ValidationError("rate must be within [100, 1000] Hz")
    if cfg["duration"] <= 0:
        raise ValidationError("duration must be positive")
    out_dir = Path(cfg["out"])
    cohort = simgait.CohortConfig(
        master_seed=cfg["seed"],
        duration_s=cfg["duration"],
        reps_per_activity=cfg["reps"],
        rate_hz=cfg["rate"],
        weight_effect=cfg["weight_effect"],
        modalities=modalities,
        field_logs=cfg["field_logs"],
    )
    with _DirLock(out_dir):
        manifest_path = simgait.gen_cohort(cfg["subjects"], cohort, out_dir)
        echo = f"# generated {_timestamp()}\n" + _config_echo("simulate", cfg)
        (out_dir / "effective_config.ini").write_text(echo)
    manifest = dataio.read_manifest(manifest_path)
    counts = manifest.groupby("modality").size().to_dict()
    print(f"manifest: {manifest_path}")
    print("recordings: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def cmd_track(cfg: dict) -> int:
    log = dataio.read_packet_csv(cfg["field_log"], "field")
    bad = log.isna().any(axis=1)
    if bad.any():
        # +2: header line plus 1-based numbering
        raise dataio.DataFormatError(
            f"{cfg['field_log']}: unparseable value at line {int(bad.idxmax()) + 2}"
        )
    params = DipoleParams(moment=cfg["moment"])
    b_rx = log[["bx", "by", "bz"]].to_numpy()
    q_rx = normalize_quat_arr(log[["qrw", "qrx", "qry", "qrz"]].to_numpy())
    q_tx = normalize_quat_arr(log[["qtw", "qtx", "qty", "qtz"]].to_numpy())
    b_tx = resolve_frame_arr(b_rx, q_rx, q_tx)
    pos = invert_field_arr(b_tx, params, HalfSpace())
    q_rel = quat_mul_arr(quat_conj_arr(q_tx), q_rx)
    out = pd.DataFrame(
        np.column_stack([log["t"].to_numpy(), pos, q_rel]),
        columns=["t", "x", "y", "z", "qw", "qx", "qy", "qz"],
    )
    out.insert(1, "rx_id", log["rx_id"].to_numpy())
    out_path = Path(cfg["out"])
    with _DirLock(out_path.parent):
        dataio.write_packet_csv(out, out_path)
    print(f"poses: {out_path} ({len(out)} rows)")
    if cfg["truth"]:
        truth = dataio.read_packet_csv(cfg["truth"], "mag")
        if len(truth) != len(out):
            raise dataio.DataFormatError("truth file row count differs from log")
        perr = np.linalg.norm(
            truth[["x", "y", "z"]].to_numpy() - pos, axis=1
        )
        qt = normalize_quat_arr(truth[["qw", "qx", "qy", "qz"]].to_numpy())
        chord = np.minimum(
            np.linalg.norm(qt - q_rel, axis=1), np.linalg.norm(qt + q_rel, axis=1)
        )
        aerr = 2.0 * chord
        print(f"position error: max {perr.max():.3e} m, median {np.median(perr):.3e} m")
        print(f"orientation error: max {aerr.max():.3e} rad, "
              f"median {np.median(aerr):.3e} rad")
    return EXIT_OK


def cmd_preprocess(cfg: dict) -> int:
    if cfg["window"] not in pipeline.WINDOW_SLIDES:
        raise ValidationError(
            f"window must be one of {sorted(pipeline.WINDOW_SLIDES)}"
        )
    if cfg["modality"] not in ("mag", "imu"):
        raise ValidationError(f"unknown modality {cfg['modality']!r}")
    manifest_path = Path(cfg["manifest"])
    manifest = dataio.read_manifest(manifest_path)
    ds = pipeline.build_dataset(
        manifest, manifest_path.parent, cfg["modality"], cfg["window"],
        pipeline.SplitSpec(shuffle_seed=cfg["seed"]),
        extra_meta={"effective_config": _config_echo("preprocess", cfg)},
    )
    out_path = Path(cfg["out"])
    with _DirLock(out_path.parent):
        ds.save(out_path)
    per_class = {dataio.LABEL_NAMES[k]: int((ds.labels == k).sum()) for k in range(4)}
    print(f"dataset: {out_path}")
    print(f"windows: {len(ds.windows)} " +
          " ".join(f"{k}={v}" for k, v in per_class.items()))
    print(f"split: train={len(ds.idx_train)} val={len(ds.idx_val)} "
          f"test={len(ds.idx_test)}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    ds = pipeline.Dataset.load(cfg["dataset"])
    model_cfg = _model_config(cfg["model"], ds)
    model = nn.build_model(model_cfg, seed=cfg["seed"], dtype=np.float32)
    x, y = ds.subset("train")
    history = nn.train(model, x.astype(np.float32), y, _train_config(cfg))
    if history.diverged:
        raise RuntimeError("training diverged (non-finite loss)")
    xv, yv = ds.subset("val")
    val_acc = float(
        (nn.predict(model, xv.astype(np.float32)).argmax(axis=1) == yv).mean()
    )
    out_path = Path(cfg["out"])
    with _DirLock(out_path.parent):
        model.save(out_path)
    print(f"parameters: {out_path}")
    print(f"train accuracy: {history.accuracy[-1]:.4f}  "
          f"val accuracy: {val_acc:.4f}  final loss: {history.loss[-1]:.4f}")
    return EXIT_OK


def _write_roc_csv(path: Path, report: evaluation.RunReport):
    rows = []
    for k, curve in report.roc.items():
        for fpr, tpr in zip(curve["fpr"], curve["tpr"]):
            rows.append({"class": dataio.LABEL_NAMES[int(k)], "fpr": fpr, "tpr": tpr})
    pd.DataFrame(rows).to_csv(path, index=False, lineterminator="\n")


def cmd_eval(cfg: dict) -> int:
    ds = pipeline.Dataset.load(cfg["dataset"])
    model_cfg = _model_config(cfg["model"], ds)
    report = evaluation.repeated_runs(
        model_cfg, ds, _train_config(cfg), n_runs=cfg["runs"],
        base_seed=cfg["seed"],
        tags={"model": cfg["model"], "modality": ds.meta.get("modality"),
              "window_len": ds.window_len},
    )
    payload = {"effective_config": cfg, "report": report.to_dict()}
    prefix = Path(cfg["out_prefix"])
    with _DirLock(prefix.parent):
        evaluation.write_reports(prefix, payload,
                                 evaluation.aggregate_to_text(report),
                                 timestamp=_timestamp())
        if cfg["roc_csv"]:
            _write_roc_csv(Path(cfg["roc_csv"]), report.closest_run)
    print(f"report: {prefix}.json / {prefix}.txt")
    print(f"mean accuracy: {100 * report.mean_accuracy:.2f} +- "
          f"{100 * report.std_accuracy:.2f} % over {len(report.runs)} runs")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    ds = pipeline.Dataset.load(cfg["dataset"])
    model_cfg = _model_config(cfg["model"], ds)
    out = evaluation.ablation(ds, model_cfg, _train_config(cfg),
                              n_runs=cfg["runs"], base_seed=cfg["seed"])
    payload = {"effective_config": cfg,
               "subsets": {k: v.to_dict() for k, v in out.items()}}
    text_parts = []
    for name in ("position", "orientation", "both"):
        text_parts.append(f"== {name} ==")
        text_parts.append(evaluation.aggregate_to_text(out[name]))
    prefix = Path(cfg["out_prefix"])
    with _DirLock(prefix.parent):
        evaluation.write_reports(prefix, payload, "\n".join(text_parts),
                                 timestamp=_timestamp())
    print(f"report: {prefix}.json / {prefix}.txt")
    for name in ("position", "orientation", "both"):
        print(f"{name}: {100 * out[name].mean_accuracy:.2f} %")
    return EXIT_OK


def cmd_compare(cfg: dict) -> int:
    ds_mag = pipeline.Dataset.load(cfg["mag_dataset"])
    ds_imu = pipeline.Dataset.load(cfg["imu_dataset"])
    model_cfg = _model_config(cfg["model"], ds_mag)
    out = evaluation.modality_compare(ds_mag, ds_imu, model_cfg,
                                      _train_config(cfg), n_runs=cfg["runs"],
                                      base_seed=cfg["seed"])
    payload = {
        "effective_config": cfg,
        "mag": out["mag"].to_dict(),
        "imu": out["imu"].to_dict(),
        "w_ww_gap": out["w_ww_gap"],
        "overall_gap": out["overall_gap"],
    }
    text = (
        "== magnetic ==\n" + evaluation.aggregate_to_text(out["mag"]) +
        "\n== imu ==\n" + evaluation.aggregate_to_text(out["imu"]) +
        f"\nW/WW gap (mag - imu): restricted {100 * out['w_ww_gap']['restricted']:+.2f} %"
        f", recall-mean {100 * out['w_ww_gap']['recall_mean']:+.2f} %\n"
        f"overall gap (mag - imu): {100 * out['overall_gap']:+.2f} %\n"
    )
    prefix = Path(cfg["out_prefix"])
    with _DirLock(prefix.parent):
        evaluation.write_reports(prefix, payload, text, timestamp=_timestamp())
    print(f"report: {prefix}.json / {prefix}.txt")
    print(f"overall gap (mag - imu): {100 * out['overall_gap']:+.2f} %")
    return EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "track": cmd_track,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _effective_config(args)
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return _COMMANDS[args.command](cfg)
    except (ValidationError, ValueError, nn.ShapeMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError, TrackingError, dataio.DataFormatError,
            pipeline.PipelineError, evaluation.EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
