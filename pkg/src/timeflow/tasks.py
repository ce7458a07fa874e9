"""Task construction and inference for imputation and forecasting.

Every window is mapped affinely onto ``[0, 1]``. Forecasting windows are
normalized jointly over look-back and horizon (``L + H`` points), so the
look-back covers ``[0, (L-1)/(L+H-1)]`` and the horizon the rest; the model
never has to extrapolate beyond the coordinate range it was trained on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import TimeSeriesSample
from .errors import ContractError
from .meta import InnerLoopConfig, infer_codes, predict
from .model import TimeFlowModel


@dataclass(frozen=True)
class TimeGrid:
    coords: np.ndarray
    source_indices: np.ndarray
    window_start: int = 0
    window_len: int = 2

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        idx = np.asarray(self.source_indices, dtype=np.int64)
        if coords.shape != idx.shape or coords.ndim != 1:
            raise ContractError("coords and source_indices must be equal-length vectors")
        if coords.size > 1 and np.any(np.diff(coords) <= 0):
            raise ContractError("time grid must be strictly increasing")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "source_indices", idx)

    def __len__(self):
        return self.coords.size

    def to_indices(self) -> np.ndarray:
        return np.rint(self.coords * (self.window_len - 1)).astype(np.int64) + self.window_start

    @classmethod
    def empty(cls, window_start: int = 0, window_len: int = 2) -> "TimeGrid":
        return cls(np.empty(0), np.empty(0, dtype=np.int64), window_start, window_len)


def normalize_time(indices, window_start: int, window_len: int) -> TimeGrid:
    """``t = (index - start) / (len - 1)`` for indices inside the window."""
    if window_len < 2:
        raise ContractError(f"window_len must be >= 2, got {window_len}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < window_start or idx.max() >= window_start + window_len):
        raise ContractError(f"indices outside window [{window_start}, {window_start + window_len})")
    return TimeGrid((idx - window_start) / (window_len - 1), idx, window_start, window_len)


@dataclass
class TaskWindow:
    """Observed input grid, optional supervised output grid, and the target
    grid used for scoring. ``eval_mask`` is aligned with ``t_target``."""

    sample_id: str
    t_in: TimeGrid
    values_in: np.ndarray
    t_target: TimeGrid
    values_target: np.ndarray
    eval_mask: np.ndarray
    t_out: TimeGrid = field(default_factory=TimeGrid.empty)
    values_out: np.ndarray = field(default_factory=lambda: np.empty(0))
    lambda_out: int = 0

    def __post_init__(self):
        if len(self.t_in) == 0:
            raise ContractError(f"window {self.sample_id}: empty input grid")
        if self.lambda_out not in (0, 1):
            raise ContractError("lambda_out must be 0 or 1")
        if bool(self.lambda_out) != (len(self.t_out) > 0):
            raise ContractError(f"window {self.sample_id}: lambda=1 iff the output grid is nonempty")


@dataclass(frozen=True)
class WindowSpec:
    lookback: int
    horizon: int
    stride: int | None = None

    def __post_init__(self):
        if self.lookback < 1 or self.horizon < 1:
            raise ContractError("lookback and horizon must be >= 1")
        if self.stride is not None and self.stride < 1:
            raise ContractError("stride must be >= 1")

    @property
    def total(self) -> int:
        return self.lookback + self.horizon


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def subsample_count(tau: float, n: int) -> int:
    if not 0 < tau <= 1:
        raise ContractError(f"tau must be in (0, 1], got {tau}")
    return int(np.floor(tau * n + 0.5))


def build_imputation_task(sample: TimeSeriesSample, tau: float, seed=0) -> TaskWindow:
    """Draw ``round(tau * |T|)`` observed points uniformly without replacement.

    ``T`` is the set of points of ``sample`` with known values; scoring uses
    ``T`` minus the drawn points.
    """
    n = len(sample)
    if n < 2:
        raise ContractError("imputation needs a dense grid of length >= 2")
    dense = np.flatnonzero(sample.mask)
    count = subsample_count(tau, dense.size)
    if count < 1:
        raise ContractError(f"tau={tau} leaves no observed point out of {dense.size}")
    if count == dense.size:
        chosen = dense
    else:
        chosen = np.sort(_as_rng(seed).choice(dense, size=count, replace=False))
    observed = np.zeros(n, dtype=bool)
    observed[chosen] = True
    return TaskWindow(
        sample_id=sample.sample_id,
        t_in=normalize_time(chosen, 0, n),
        values_in=sample.values[chosen].copy(),
        t_target=normalize_time(np.arange(n), 0, n),
        values_target=sample.values.copy(),
        eval_mask=sample.mask & ~observed,
    )


def build_imputation_tasks(samples: Sequence[TimeSeriesSample], tau: float, seed: int = 0) -> list[TaskWindow]:
    """One task per sample, each with its own independent subsampling stream."""
    seeds = np.random.SeedSequence(seed).spawn(len(samples))
    return [build_imputation_task(s, tau, np.random.default_rng(ss)) for s, ss in zip(samples, seeds)]


def forecast_window(sample: TimeSeriesSample, start: int, spec: WindowSpec) -> TaskWindow:
    """The look-back/horizon window beginning at ``start``."""
    stop = start + spec.total
    if start < 0 or stop > len(sample):
        raise ContractError(f"window [{start}, {stop}) outside series of length {len(sample)}")
    mask = sample.mask[start:stop]
    idx = np.arange(start, stop)
    lb = idx[: spec.lookback][mask[: spec.lookback]]
    hz = idx[spec.lookback:][mask[spec.lookback:]]
    if lb.size == 0:
        raise ContractError(f"window at {start}: no observed look-back point")
    eval_mask = np.zeros(spec.total, dtype=bool)
    eval_mask[spec.lookback:] = mask[spec.lookback:]
    return TaskWindow(
        sample_id=sample.sample_id,
        t_in=normalize_time(lb, start, spec.total),
        values_in=sample.values[lb].copy(),
        t_out=normalize_time(hz, start, spec.total) if hz.size else TimeGrid.empty(start, spec.total),
        values_out=sample.values[hz].copy(),
        lambda_out=1 if hz.size else 0,
        t_target=normalize_time(idx, start, spec.total),
        values_target=sample.values[start:stop].copy(),
        eval_mask=eval_mask,
    )


def build_forecast_windows(sample: TimeSeriesSample, spec: WindowSpec, epoch_seed=0, count: int = 1,
                           region: tuple[int, int] | None = None) -> list[TaskWindow]:
    """Draw ``count`` windows with uniformly random start offsets.

    ``region`` restricts windows to ``[lo, hi)`` (e.g. the training period).
    """
    lo, hi = region if region is not None else (0, len(sample))
    if hi - lo < spec.total:
        raise ContractError(f"series region of length {hi - lo} is shorter than L+H={spec.total}")
    rng = _as_rng(epoch_seed)
    starts = rng.integers(lo, hi - spec.total + 1, size=count)
    return [forecast_window(sample, int(s), spec) for s in starts]


def window_starts(series_len: int, spec: WindowSpec, region: tuple[int, int] | None = None) -> list[int]:
    """Deterministic evaluation offsets every ``stride`` steps (default H)."""
    lo, hi = region if region is not None else (0, series_len)
    if hi - lo < spec.total:
        raise ContractError(f"series region of length {hi - lo} is shorter than L+H={spec.total}")
    stride = spec.stride or spec.horizon
    return list(range(lo, hi - spec.total + 1, stride))


class ForecastWindowSampler:
    """Callable task source for :func:`timeflow.meta.fit`: draws fresh
    windows for every sample each epoch."""

    def __init__(self, samples: Sequence[TimeSeriesSample], spec: WindowSpec, draws_per_epoch: int = 1,
                 region: tuple[int, int] | None = None):
        self.samples = list(samples)
        self.spec = spec
        self.draws_per_epoch = draws_per_epoch
        self.region = region
        for s in self.samples:
            lo, hi = region if region is not None else (0, len(s))
            if hi - lo < spec.total:
                raise ContractError(f"sample {s.sample_id}: region too short for L+H={spec.total}")

    def __call__(self, rng: np.random.Generator) -> list[TaskWindow]:
        out = []
        for s in self.samples:
            out.extend(build_forecast_windows(s, self.spec, rng, self.draws_per_epoch, self.region))
        return out


# --------------------------------------------------------------------------
# inference

def infer_impute(model: TimeFlowModel, windows: Sequence[TaskWindow] | TaskWindow,
                 cfg: InnerLoopConfig) -> list[np.ndarray] | np.ndarray:
    """Adapt a fresh code per window on its input grid and predict the
    whole target grid. Shared parameters are never modified."""
    single = isinstance(windows, TaskWindow)
    ws = [windows] if single else list(windows)
    codes = infer_codes(model, [w.t_in.coords for w in ws], [w.values_in for w in ws], cfg)
    preds = predict(model, codes, [w.t_target.coords for w in ws])
    return preds[0] if single else preds


@dataclass
class ForecastResult:
    lookback_pred: np.ndarray
    horizon_pred: np.ndarray
    observed: np.ndarray  # look-back positions used for adaptation

    @property
    def reconstruction_mask(self) -> np.ndarray:
        return ~self.observed


def sparse_lookback_mask(lookback_mask: np.ndarray, tau: float, rng) -> np.ndarray:
    """Keep ``round(tau * n_observed)`` of the observed look-back points.

    ``tau == 1`` keeps every observed point without touching the generator.
    """
    lookback_mask = np.asarray(lookback_mask, dtype=bool)
    avail = np.flatnonzero(lookback_mask)
    count = subsample_count(tau, avail.size)
    if count < 1:
        raise ContractError(f"tau={tau} leaves an empty look-back")
    if count == avail.size:
        return lookback_mask.copy()
    keep = np.zeros_like(lookback_mask)
    keep[_as_rng(rng).choice(avail, size=count, replace=False)] = True
    return keep


def infer_forecast(model: TimeFlowModel, lookbacks: Sequence[np.ndarray], spec: WindowSpec,
                   cfg: InnerLoopConfig, tau: float = 1.0, seed=0,
                   observed_masks: Sequence[np.ndarray] | None = None) -> list[ForecastResult]:
    """Fit a code on (possibly subsampled) look-back values and predict both
    the full look-back and the horizon.

    ``lookbacks`` are length-``L`` arrays; NaN marks a missing value.
    """
    rng = _as_rng(seed)
    lb_idx = np.arange(spec.lookback)
    grid_lb = normalize_time(lb_idx, 0, spec.total).coords
    grid_hz = normalize_time(np.arange(spec.lookback, spec.total), 0, spec.total).coords
    coords, values, masks = [], [], []
    for i, lb in enumerate(lookbacks):
        lb = np.asarray(lb, dtype=np.float64)
        if lb.shape != (spec.lookback,):
            raise ContractError(f"look-back {i} has shape {lb.shape}, expected ({spec.lookback},)")
        base = ~np.isnan(lb)
        if observed_masks is not None:
            base &= np.asarray(observed_masks[i], dtype=bool)
        if not base.any():
            raise ContractError(f"look-back {i} is empty")
        keep = sparse_lookback_mask(base, tau, rng)
        masks.append(keep)
        coords.append(grid_lb[keep])
        values.append(lb[keep])
    codes = infer_codes(model, coords, values, cfg)
    preds = predict(model, codes, [np.concatenate([grid_lb, grid_hz])] * len(coords))
    return [ForecastResult(p[: spec.lookback], p[spec.lookback:], m) for p, m in zip(preds, masks)]
