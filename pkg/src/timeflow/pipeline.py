"""End-to-end evaluation runs shared by the CLI and the benchmark tests.

Every method sees exactly the same observation masks: masks are drawn from
the run seed, per window and per sample, independently of the method.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .baselines import KnnConfig, interpolate_masked, knn_impute_all, linear_interpolate, repeat_forecast
from .config import substream
from .data import TimeSeriesSample
from .errors import ContractError
from .evaluation import mae, split_errors
from .meta import InnerLoopConfig
from .model import TimeFlowModel
from .tasks import (
    TaskWindow,
    WindowSpec,
    build_imputation_tasks,
    infer_forecast,
    infer_impute,
    normalize_time,
    sparse_lookback_mask,
    window_starts,
)

IMPUTE_METHODS = ("timeflow", "linear", "knn")
FORECAST_METHODS = ("timeflow", "repeat")


def impute_windows(series_len: int, window_len: int, window_start: int = 0) -> list[tuple[int, int]]:
    """Consecutive imputation windows of ``window_len`` from ``window_start``."""
    window_len = window_len or series_len - window_start
    if window_len < 2 or window_start + window_len > series_len:
        raise ContractError(f"window of {window_len} from {window_start} exceeds series of {series_len}")
    count = (series_len - window_start) // window_len
    return [(window_start + i * window_len, window_start + (i + 1) * window_len) for i in range(count)]


def imputation_tasks(samples: Sequence[TimeSeriesSample], window: tuple[int, int], tau: float | None,
                     seed: int, window_id: int = 0, observed: Sequence[np.ndarray] | None = None) -> list[TaskWindow]:
    """Tasks for one window: subsample at rate ``tau`` or take explicit masks.

    With ``observed`` the given masks define the input grid; scoring uses the
    remaining points with known values.
    """
    start, stop = window
    parts = [s.window(start, stop) for s in samples]
    if observed is None:
        if tau is None:
            raise ContractError("need either tau or explicit observation masks")
        return build_imputation_tasks(parts, tau, seed=[seed, window_id])
    tasks = []
    n = stop - start
    for part, obs in zip(parts, observed):
        obs = np.asarray(obs, dtype=bool)[start:stop] & part.mask
        idx = np.flatnonzero(obs)
        if idx.size == 0:
            raise ContractError(f"sample {part.sample_id}: no observed point in window {window_id}")
        tasks.append(TaskWindow(
            sample_id=part.sample_id,
            t_in=normalize_time(idx, 0, n),
            values_in=part.values[idx].copy(),
            t_target=normalize_time(np.arange(n), 0, n),
            values_target=part.values.copy(),
            eval_mask=part.mask & ~obs,
        ))
    return tasks


@dataclass
class ImputationRun:
    predictions: list[np.ndarray]
    window_mae: float | None  # mean over samples; None without held-out truth
    sample_mae: list[float | None]


def run_imputation(method: str, tasks: Sequence[TaskWindow], model: TimeFlowModel | None = None,
                   inner: InnerLoopConfig | None = None, knn: KnnConfig | None = None) -> ImputationRun:
    if method == "timeflow":
        if model is None:
            raise ContractError("timeflow needs a trained model")
        preds = infer_impute(model, list(tasks), inner or InnerLoopConfig())
    elif method == "linear":
        preds = [linear_interpolate(w.t_in.coords, w.values_in, w.t_target.coords) for w in tasks]
    elif method == "knn":
        n = len(tasks[0].t_target)
        vals = np.full((len(tasks), n), np.nan)
        for j, w in enumerate(tasks):
            vals[j, w.t_in.to_indices() - w.t_in.window_start] = w.values_in
        preds = [r.values for r in knn_impute_all(vals, ~np.isnan(vals), knn or KnnConfig())]
    else:
        raise ContractError(f"method {method!r} cannot impute")
    per = []
    for p, w in zip(preds, tasks):
        per.append(mae(p, np.nan_to_num(w.values_target), w.eval_mask) if w.eval_mask.any() else None)
    scored = [v for v in per if v is not None]
    return ImputationRun(list(preds), float(np.mean(scored)) if scored else None, per)


@dataclass
class ForecastWindowResult:
    start: int
    sample_ids: list[str]
    lookback_pred: list[np.ndarray]
    horizon_pred: list[np.ndarray]
    observed: list[np.ndarray]
    imputation_error: float
    forecast_error: float
    sample_forecast_errors: list[float]


def run_forecast(method: str, samples: Sequence[TimeSeriesSample], spec: WindowSpec, tau: float, seed: int,
                 region: tuple[int, int] | None = None, model: TimeFlowModel | None = None,
                 inner: InnerLoopConfig | None = None, starts: Sequence[int] | None = None) -> list[ForecastWindowResult]:
    """Forecast every evaluation window of every sample.

    The sparse look-back masks come from a generator seeded per window, so
    TimeFlow and Repeat are compared on identical observations.
    """
    if method not in FORECAST_METHODS:
        raise ContractError(f"method {method!r} cannot forecast")
    if method == "timeflow" and model is None:
        raise ContractError("timeflow needs a trained model")
    n = min(len(s) for s in samples)
    starts = list(starts) if starts is not None else window_starts(n, spec, region)
    out = []
    for wid, start in enumerate(starts):
        lookbacks, truths_lb, truths_hz, masks = [], [], [], []
        rng = substream(seed, f"lookback-{wid}")
        for s in samples:
            lb = np.where(s.mask[start:start + spec.lookback], s.values[start:start + spec.lookback], np.nan)
            lookbacks.append(lb)
            truths_lb.append(lb)
            hz = s.values[start + spec.lookback:start + spec.total]
            truths_hz.append(np.where(s.mask[start + spec.lookback:start + spec.total], hz, np.nan))
            masks.append(sparse_lookback_mask(~np.isnan(lb), tau, rng))
        if method == "timeflow":
            res = infer_forecast(model, lookbacks, spec, inner or InnerLoopConfig(), tau=1.0, observed_masks=masks)
            lb_pred = [r.lookback_pred for r in res]
            hz_pred = [r.horizon_pred for r in res]
        else:
            lb_pred = [interpolate_masked(np.nan_to_num(lb), m) for lb, m in zip(lookbacks, masks)]
            hz_pred = [repeat_forecast(p, spec.horizon) for p in lb_pred]
        imp, fc = [], []
        for lp, hp, tl, th, m in zip(lb_pred, hz_pred, truths_lb, truths_hz, masks):
            i_err, f_err = split_errors(lp, tl, m, hp, th)
            imp.append(i_err)
            fc.append(f_err)
        out.append(ForecastWindowResult(start, [s.sample_id for s in samples], lb_pred, hz_pred, masks,
                                        float(np.mean(imp)), float(np.mean(fc)), fc))
    return out
