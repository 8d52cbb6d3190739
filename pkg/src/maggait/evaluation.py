"""Evaluation protocol: repeated-run accuracy statistics, confusion
matrices, one-vs-rest ROC/AUC, the position/orientation ablation, and the
modality comparison.

Protocol per run: retrain from scratch on the combined train+validation
split with a run-specific seed (which reshuffles batches and
re-initializes parameters), then evaluate on the fixed test split.  The
aggregate reports mean and sample standard deviation over runs plus the
single run whose accuracy is closest to the mean (smallest seed wins ties).

The W-vs-WW pair statistic is reported two ways, since either reading is
defensible: "restricted" counts test windows of the two classes whose
4-way argmax prediction is correct, "recall_mean" averages the two
per-class recalls.

Runs are independent given their seeds; aggregation sorts by seed so a
parallel driver would reduce to the same report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .dataio import ACTIVITY_LABELS, LABEL_NAMES
from .pipeline import Dataset


class EvaluationError(Exception):
    pass


class EmptyClass(EvaluationError):
    pass


class MismatchedCohort(EvaluationError):
    pass


PAIR_W_WW = (ACTIVITY_LABELS["W"], ACTIVITY_LABELS["WW"])


@dataclass
class RunReport:
    run_seed: int
    accuracy: float
    confusion: np.ndarray  # (n_classes, n_classes) rows = true label
    precision: np.ndarray  # per class
    recall: np.ndarray
    roc: dict  # class index -> {"fpr": [...], "tpr": [...]}
    auc: np.ndarray
    n_test: int

    def pair_accuracy(self, a: int, b: int) -> dict:
        c = self.confusion
        n_pair = c[a].sum() + c[b].sum()
        restricted = (c[a, a] + c[b, b]) / n_pair
        recall_mean = 0.5 * (c[a, a] / c[a].sum() + c[b, b] / c[b].sum())
        return {"restricted": float(restricted), "recall_mean": float(recall_mean)}

    def to_dict(self) -> dict:
        return {
            "run_seed": self.run_seed,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "roc": {str(k): v for k, v in self.roc.items()},
            "auc": self.auc.tolist(),
            "n_test": self.n_test,
        }


@dataclass
class AggregateReport:
    runs: list  # of RunReport
    mean_accuracy: float
    std_accuracy: float
    closest_seed: int
    pair_w_ww: dict
    tags: dict = field(default_factory=dict)

    @property
    def closest_run(self) -> RunReport:
        return next(r for r in self.runs if r.run_seed == self.closest_seed)

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "n_runs": len(self.runs),
            "closest_seed": self.closest_seed,
            "pair_w_ww": self.pair_w_ww,
            "tags": self.tags,
            "runs": [r.to_dict() for r in self.runs],
        }


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (y_true, y_pred), 1)
    return out


def roc_curve(scores: np.ndarray, positive: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-vs-rest ROC by sweeping a threshold over every distinct score.

    Returns (fpr, tpr), both monotone non-decreasing, anchored at (0, 0)
    and (1, 1)."""
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EmptyClass("ROC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="mergesort")
    sorted_pos = positive[order]
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(~sorted_pos)
    # collapse runs of equal scores: keep the last index of each run
    s = scores[order]
    last = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    return fpr, tpr


def auc_trapezoid(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.trapezoid(tpr, fpr))


def evaluate(model: nn.Model, windows: np.ndarray, labels: np.ndarray,
             run_seed: int = 0) -> RunReport:
    """Metrics on a held-out set from the model's softmax scores."""
    n_classes = model.config.n_classes
    counts = np.bincount(labels, minlength=n_classes)
    if (counts == 0).any():
        missing = int(np.argmin(counts))
        raise EmptyClass(f"class {missing} ({LABEL_NAMES.get(missing)}) has no test windows")
    probs = nn.predict(model, windows)
    pred = probs.argmax(axis=1)
    conf = confusion_matrix(labels, pred, n_classes)
    with np.errstate(invalid="ignore"):
        precision = np.where(conf.sum(axis=0) > 0, np.diag(conf) / conf.sum(axis=0), 0.0)
    recall = np.diag(conf) / conf.sum(axis=1)
    roc = {}
    auc = np.empty(n_classes)
    for k in range(n_classes):
        fpr, tpr = roc_curve(probs[:, k].astype(np.float64), labels == k)
        roc[k] = {"fpr": fpr.tolist(), "tpr": tpr.tolist()}
        auc[k] = auc_trapezoid(fpr, tpr)
    return RunReport(
        run_seed=run_seed,
        accuracy=float(np.trace(conf) / len(labels)),
        confusion=conf,
        precision=precision,
        recall=recall,
        roc=roc,
        auc=auc,
        n_test=len(labels),
    )


def run_seeds(base_seed: int, n: int) -> list[int]:
    return [base_seed + 1000 * i for i in range(n)]


def repeated_runs(
    model_config: nn.ModelConfig,
    dataset: Dataset,
    train_config: nn.TrainConfig,
    n_runs: int = 8,
    base_seed: int = 0,
    tags: dict | None = None,
    feature_columns: np.ndarray | None = None,
    seeds: list[int] | None = None,
) -> AggregateReport:
    """Retrain n_runs times on train+val (reshuffled and re-initialized per
    seed) and evaluate each on the fixed test split.  Explicit seeds
    override the derived base_seed + 1000 * i sequence."""
    if seeds is None:
        seeds = run_seeds(base_seed, n_runs)
    if len(seeds) < 2:
        raise ValueError("need n_runs >= 2")
    x_fit, y_fit = dataset.train_val()
    x_test, y_test = dataset.subset("test")
    if feature_columns is not None:
        if len(feature_columns) == 0:
            raise ValueError("feature subset is empty")
        x_fit = x_fit[:, :, feature_columns]
        x_test = x_test[:, :, feature_columns]
    x_fit = x_fit.astype(np.float32)
    x_test = x_test.astype(np.float32)
    reports = []
    for seed in seeds:
        model = nn.build_model(model_config, seed=seed, dtype=np.float32)
        cfg = replace(train_config, seed=seed)
        history = nn.train(model, x_fit, y_fit, cfg)
        report = evaluate(model, x_test, y_test, run_seed=seed)
        if history.diverged:
            report.accuracy = float("nan")
        reports.append(report)
    reports.sort(key=lambda r: r.run_seed)
    accs = np.array([r.accuracy for r in reports])
    ok = np.isfinite(accs)
    mean = float(accs[ok].mean())
    std = float(accs[ok].std(ddof=1)) if ok.sum() > 1 else 0.0
    # run closest to the mean; ties go to the smallest seed (reports are
    # already seed-sorted, so argmin picks it)
    deltas = np.where(ok, np.abs(accs - mean), np.inf)
    closest = reports[int(np.argmin(deltas))].run_seed
    pair = _aggregate_pair(reports, PAIR_W_WW)
    return AggregateReport(
        runs=reports,
        mean_accuracy=mean,
        std_accuracy=std,
        closest_seed=closest,
        pair_w_ww=pair,
        tags=tags or {},
    )


def _aggregate_pair(reports, pair) -> dict:
    rs = [r.pair_accuracy(*pair) for r in reports if np.isfinite(r.accuracy)]
    return {
        "restricted": float(np.mean([r["restricted"] for r in rs])),
        "recall_mean": float(np.mean([r["recall_mean"] for r in rs])),
    }


FEATURE_SUBSETS_MAG = {
    "position": np.array([0, 1, 2, 6, 7, 8]),
    "orientation": np.array([3, 4, 5, 9, 10, 11]),
    "both": np.arange(12),
}


def ablation(
    dataset: Dataset,
    model_config: nn.ModelConfig,
    train_config: nn.TrainConfig,
    n_runs: int = 8,
    base_seed: int = 0,
) -> dict:
    """Retrain on position-only, orientation-only, and combined feature
    subsets with identical seeds and hyperparameters."""
    if dataset.meta.get("modality") != "mag":
        raise EvaluationError("ablation is defined for the magnetic modality")
    out = {}
    for name, cols in FEATURE_SUBSETS_MAG.items():
        cfg = replace(model_config, n_features=len(cols))
        if cfg.arch == "cnn" and name != "both":
            # narrow subsets leave too few feature columns for (.., 2) pools
            cfg = replace(cfg, pool_shapes=tuple((pt, 1) for pt, _ in cfg.pool_shapes))
        out[name] = repeated_runs(
            cfg, dataset, train_config, n_runs=n_runs, base_seed=base_seed,
            tags={"subset": name}, feature_columns=cols,
        )
    return out


def modality_compare(
    mag_dataset: Dataset,
    imu_dataset: Dataset,
    model_config: nn.ModelConfig,
    train_config: nn.TrainConfig,
    n_runs: int = 8,
    base_seed: int = 0,
) -> dict:
    """Side-by-side aggregate reports plus the W-vs-WW gap statistics."""
    if mag_dataset.meta.get("cohort") != imu_dataset.meta.get("cohort"):
        raise MismatchedCohort(
            f"cohorts differ: {mag_dataset.meta.get('cohort')} vs "
            f"{imu_dataset.meta.get('cohort')}"
        )
    out = {}
    for name, ds in (("mag", mag_dataset), ("imu", imu_dataset)):
        cfg = replace(model_config, n_features=ds.n_features,
                      window_len=ds.window_len)
        out[name] = repeated_runs(
            cfg, ds, train_config, n_runs=n_runs, base_seed=base_seed,
            tags={"modality": name},
        )
    out["w_ww_gap"] = {
        kind: out["mag"].pair_w_ww[kind] - out["imu"].pair_w_ww[kind]
        for kind in ("restricted", "recall_mean")
    }
    out["overall_gap"] = out["mag"].mean_accuracy - out["imu"].mean_accuracy
    return out


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------


def aggregate_to_text(report: AggregateReport) -> str:
    lines = []
    tags = " ".join(f"{k}={v}" for k, v in sorted(report.tags.items()))
    lines.append(f"runs: {len(report.runs)} {tags}".rstrip())
    lines.append(
        f"accuracy: {100 * report.mean_accuracy:.2f} +- "
        f"{100 * report.std_accuracy:.2f} %"
    )
    lines.append(
        "W/WW pair accuracy: restricted "
        f"{100 * report.pair_w_ww['restricted']:.2f} %, recall-mean "
        f"{100 * report.pair_w_ww['recall_mean']:.2f} %"
    )
    lines.append(f"closest run to mean: seed {report.closest_seed}")
    run = report.closest_run
    lines.append("confusion matrix (rows = true J, M, W, WW):")
    for row in run.confusion:
        lines.append("  " + " ".join(f"{v:6d}" for v in row))
    lines.append(
        "per-class AUC: "
        + " ".join(f"{LABEL_NAMES[k]}={run.auc[k]:.4f}" for k in range(len(run.auc)))
    )
    return "\n".join(lines) + "\n"


def write_reports(path_prefix, payload: dict, text: str, timestamp: str | None = None):
    """payload -> <prefix>.json (no timestamps), text -> <prefix>.txt with
    the timestamp confined to the first header line."""
    from pathlib import Path

    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(prefix.with_suffix(".json"), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    header = f"# generated {timestamp}\n" if timestamp else "#\n"
    with open(prefix.with_suffix(".txt"), "w") as fh:
        fh.write(header)
        fh.write(text)
