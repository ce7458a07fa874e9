"""Masked MAE, cross-window aggregation and report output.

All errors are computed in the z-normalized space used for training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

RESULT_COLUMNS = ("dataset", "method", "tau", "horizon", "window_id", "mae")


def mae(pred, truth, mask=None) -> float:
    """Mean absolute error over the positions selected by ``mask``."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape:
        raise ContractError("mask shape differs from prediction shape")
    if not mask.any():
        raise ContractError("MAE over an empty mask")
    return float(np.mean(np.abs(pred[mask] - truth[mask])))


@dataclass
class EvalReport:
    per_window: list[float]
    mean: float
    std: float
    metadata: dict = field(default_factory=dict)

    def __str__(self):
        return f"{self.mean:.3f} ± {self.std:.3f}"


def aggregate(values: Iterable[float], **metadata) -> EvalReport:
    """Mean and population standard deviation across windows."""
    vals = [float(v) for v in values]
    if not vals:
        raise ContractError("aggregate needs at least one window")
    arr = np.sort(np.asarray(vals))  # order-free summation
    return EvalReport(vals, float(arr.mean()), float(arr.std()), dict(metadata))


def split_errors(lookback_pred, lookback_truth, observed, horizon_pred, horizon_truth) -> tuple[float, float]:
    """(imputation MAE on unobserved look-back points, forecast MAE on horizon).

    With nothing missing from the look-back the imputation error is 0.
    """
    observed = np.asarray(observed, dtype=bool)
    lb_truth = np.asarray(lookback_truth, dtype=np.float64)
    missing = ~observed & ~np.isnan(lb_truth)
    imp = mae(lookback_pred, np.nan_to_num(lb_truth), missing) if missing.any() else 0.0
    hz_truth = np.asarray(horizon_truth, dtype=np.float64)
    fc = mae(horizon_pred, np.nan_to_num(hz_truth), ~np.isnan(hz_truth))
    return imp, fc


@dataclass
class ResultRow:
    dataset: str
    method: str
    tau: float | str
    horizon: int | str
    window_id: int | str
    mae: float

    def as_list(self):
        return [self.dataset, self.method, self.tau, self.horizon, self.window_id, f"{self.mae:.6f}"]


def write_results(rows: Sequence[ResultRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow(r.as_list())


def read_results(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def format_table(reports: Sequence[EvalReport], keys: Sequence[str] = ("dataset", "method", "tau", "horizon")) -> str:
    """Plain-text summary, one row per report."""
    header = list(keys) + ["mae"]
    body = [[str(r.metadata.get(k, "")) for k in keys] + [str(r)] for r in reports]
    widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body)
    return "\n".join(lines)
