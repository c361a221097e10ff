"""Metrics and reports: MAE, aCC, R-squared, boxplots, inference timing.

Conventions, pinned so the oracle tests are exact:

* per-sample MAE averages the absolute error over the three force
  components (switchable to the Euclidean norm via ``sample_error="l2"``);
* aCC is the per-component Pearson correlation between predictions and
  targets, averaged over components; a zero-variance component counts
  as 0 with a warning;
* R-squared comes from the pooled least-squares regression of targets on
  predictions (so a constant predictor scores 0, a perfect one 1);
* quartiles use linear interpolation (the inclusive method).

The evaluator sees only (checkpoint, dataset), so every model family
goes through the same code path.
"""

from __future__ import annotations

import json
import os
import platform
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datapipe import Volume
from .errors import ConfigError
from .models import ModelGraph
from .phantom import PairDataset
from .trainer import Checkpoint, predict_batch, prepare_pair_arrays, restore_model


def mae(preds: np.ndarray, targets: np.ndarray,
        sample_error: str = "mean") -> tuple[np.ndarray, float, float]:
    """Per-sample MAE list plus its mean and standard deviation (newtons)."""
    preds = np.asarray(preds, np.float64)
    targets = np.asarray(targets, np.float64)
    err = np.abs(preds - targets)
    if sample_error == "mean":
        per_sample = err.mean(axis=1)
    elif sample_error == "l2":
        per_sample = np.sqrt((err ** 2).sum(axis=1))
    else:
        raise ConfigError(f"sample_error: expected 'mean' or 'l2', got {sample_error!r}")
    return per_sample, float(per_sample.mean()), float(per_sample.std())


def acc(preds: np.ndarray, targets: np.ndarray) -> float:
    """Average per-component Pearson correlation."""
    preds = np.asarray(preds, np.float64)
    targets = np.asarray(targets, np.float64)
    ccs = []
    for i in range(preds.shape[1]):
        p = preds[:, i] - preds[:, i].mean()
        t = targets[:, i] - targets[:, i].mean()
        denom = np.sqrt((p * p).sum() * (t * t).sum())
        if denom == 0.0:
            warnings.warn(f"aCC: component {i} has zero variance, counting its CC as 0")
            ccs.append(0.0)
        else:
            ccs.append(float((p * t).sum() / denom))
    return float(np.mean(ccs))


def r2_and_residuals(preds: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Pooled regression R-squared plus per-component residuals (y - y_hat)."""
    preds = np.asarray(preds, np.float64)
    targets = np.asarray(targets, np.float64)
    residuals = targets - preds
    x = preds.reshape(-1)
    y = targets.reshape(-1)
    ss_tot = ((y - y.mean()) ** 2).sum()
    xvar = ((x - x.mean()) ** 2).sum()
    if xvar == 0.0 or ss_tot == 0.0:
        return (1.0 if np.allclose(x, y) else 0.0), residuals
    slope = ((x - x.mean()) * (y - y.mean())).sum() / xvar
    fit = y.mean() + slope * (x - x.mean())
    r2 = 1.0 - ((y - fit) ** 2).sum() / ss_tot
    return float(r2), residuals


def boxplot_stats(per_sample: np.ndarray) -> dict[str, float]:
    """Five-number summary with linearly interpolated quartiles."""
    vals = np.asarray(per_sample, np.float64)
    if vals.size == 0:
        raise ConfigError("boxplot_stats: empty sample list")
    q = np.percentile(vals, [0, 25, 50, 75, 100], method="linear")
    return {"min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
            "q3": float(q[3]), "max": float(q[4])}


def time_inference(ckpt: Checkpoint, n_warmup: int = 2, n_trials: int = 10,
                   threads: int | None = None) -> dict:
    """Wall-clock single-pair inference timing with hardware metadata."""
    if n_trials < 1:
        raise ConfigError(f"time_inference: n_trials must be >= 1, got {n_trials}")
    model = restore_model(ckpt)
    e = ckpt.arch.input_extent
    shape = (1,) + (e,) * ckpt.arch.ndim + (1,)
    rng = np.random.default_rng(0)
    ref = rng.random(shape, dtype=np.float32)
    samp = rng.random(shape, dtype=np.float32)
    for _ in range(n_warmup):
        predict_batch(model, ckpt.scaler, ref, samp)
    times = []
    for _ in range(n_trials):
        t0 = time.perf_counter()
        predict_batch(model, ckpt.scaler, ref, samp)
        times.append((time.perf_counter() - t0) * 1e3)
    times = np.asarray(times)
    return {
        "mean_ms": float(times.mean()), "std_ms": float(times.std()),
        "n_trials": n_trials, "input_extent": e, "family": ckpt.family,
        "threads": threads if threads is not None else -1,
        "cpu_count": os.cpu_count(),
        "platform": platform.platform(), "machine": platform.machine(),
    }


@dataclass
class EvalReport:
    """All reported statistics for one model on one or more splits."""

    dataset_id: str
    model_id: str
    splits: dict[str, dict] = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"dataset_id": self.dataset_id, "model_id": self.model_id,
                "splits": self.splits, "timing": self.timing}

    def save(self, out_dir: str | Path) -> Path:
        """Write report.json plus per-split residual/error column files."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as f:
            json.dump(self.to_dict(), f, indent=1)
            f.write("\n")
        for name, sec in self.splits.items():
            cols = np.column_stack([sec["residuals"][c] for c in range(3)])
            np.savetxt(out / f"residuals_{name}.tsv", cols, delimiter="\t",
                       header="res_fx_n\tres_fy_n\tres_fz_n", comments="")
            np.savetxt(out / f"per_sample_mae_{name}.tsv",
                       np.asarray(sec["per_sample_mae"]), delimiter="\t",
                       header="mae_n", comments="")
        return out / "report.json"


def evaluate_split(model: ModelGraph, ckpt: Checkpoint, ds: PairDataset,
                   indices: list[int], sample_error: str = "mean") -> dict:
    refs, samps, labels_n = prepare_pair_arrays(ds, ckpt.arch, indices)
    preds = predict_batch(model, ckpt.scaler, refs, samps)
    per_sample, mean_, std_ = mae(preds, labels_n, sample_error)
    r2, residuals = r2_and_residuals(preds, labels_n)
    return {
        "n": len(indices),
        "mae_mean_n": mean_, "mae_std_n": std_,
        "acc": acc(preds, labels_n), "r2": r2,
        "per_sample_mae": per_sample.tolist(),
        "residuals": [residuals[:, i].tolist() for i in range(residuals.shape[1])],
        "boxplot": boxplot_stats(per_sample),
    }


def evaluate(ckpt: Checkpoint, ds: PairDataset, splits: dict[str, list[int]],
             dataset_id: str = "", with_timing: bool = False,
             threads: int | None = None, sample_error: str = "mean") -> EvalReport:
    """Evaluate one checkpoint on named index splits of one dataset."""
    model = restore_model(ckpt)
    report = EvalReport(dataset_id=dataset_id, model_id=ckpt.family)
    for name, idx in splits.items():
        report.splits[name] = evaluate_split(model, ckpt, ds, idx, sample_error)
    if with_timing:
        report.timing = time_inference(ckpt, threads=threads)
    return report
