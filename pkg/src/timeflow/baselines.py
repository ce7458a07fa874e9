"""Classical comparators: linear interpolation, cross-sample KNN imputation
and the Repeat forecaster."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError


def linear_interpolate(obs_coords, obs_values, query_coords) -> np.ndarray:
    """Piecewise-linear interpolation, clamped to the nearest observed value
    outside the observed range."""
    x = np.asarray(obs_coords, dtype=np.float64)
    y = np.asarray(obs_values, dtype=np.float64)
    if x.size == 0:
        raise ContractError("linear_interpolate needs at least one observation")
    if x.shape != y.shape:
        raise ContractError("observed coordinates and values differ in length")
    order = np.argsort(x, kind="stable")
    return np.interp(np.asarray(query_coords, dtype=np.float64), x[order], y[order])


def interpolate_masked(values, mask) -> np.ndarray:
    """Fill the unmasked positions of a regular series by interpolation."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    grid = np.arange(values.size, dtype=np.float64)
    return linear_interpolate(grid[mask], values[mask], grid)


@dataclass(frozen=True)
class KnnConfig:
    k: int = 3

    def validate(self, pool_size: int) -> None:
        if self.k < 1:
            raise ConfigError("knn.k", f"k must be >= 1, got {self.k}")
        if self.k > pool_size:
            raise ConfigError("knn.k", f"k={self.k} exceeds the {pool_size} available neighbours")


@dataclass
class KnnResult:
    values: np.ndarray
    # positions where no neighbour was observed and interpolation was used
    fallback: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def _distances(target, target_mask, pool, pool_masks) -> np.ndarray:
    """Mean squared difference over coordinates observed in both series;
    ``inf`` when nothing overlaps."""
    both = pool_masks & target_mask[None, :]
    counts = both.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        diff = np.where(both, pool - target[None, :], 0.0)
        d = (diff**2).sum(axis=1) / counts
    d[counts == 0] = np.inf
    return d


def knn_impute(target, target_mask, pool, pool_masks, cfg: KnnConfig | None = None) -> KnnResult:
    """Fill missing points of ``target`` from its nearest pool samples.

    At each missing coordinate the ``k`` closest pool samples *that are
    observed there* are averaged. Observed target points are returned as is.
    """
    cfg = cfg or KnnConfig()
    target = np.asarray(target, dtype=np.float64)
    target_mask = np.asarray(target_mask, dtype=bool)
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    pool_masks = np.atleast_2d(np.asarray(pool_masks, dtype=bool))
    if pool.shape != pool_masks.shape or pool.shape[1] != target.size:
        raise ContractError("pool samples must share the target's dense grid")
    cfg.validate(pool.shape[0])

    dist = _distances(target, target_mask, pool, pool_masks)
    # ties broken by pool position; samples with no overlap (inf) rank last
    ranking = np.lexsort((np.arange(dist.size), dist))
    out = np.where(target_mask, target, np.nan)
    missing = np.flatnonzero(~target_mask)
    fallback = []
    for t in missing:
        avail = ranking[pool_masks[ranking, t]]
        if avail.size == 0:
            fallback.append(t)
            continue
        out[t] = pool[avail[: cfg.k], t].mean()
    if fallback:
        if not target_mask.any():
            raise ContractError("no neighbour and no observation to fall back on")
        grid = np.arange(target.size, dtype=np.float64)
        out[fallback] = linear_interpolate(grid[target_mask], target[target_mask], grid[fallback])
    return KnnResult(out, np.asarray(fallback, dtype=np.int64))


def knn_impute_all(values: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                   cfg: KnnConfig | None = None) -> list[KnnResult]:
    """Impute every sample using all the others as its pool."""
    values = np.asarray(values, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    out = []
    for j in range(values.shape[0]):
        others = np.arange(values.shape[0]) != j
        out.append(knn_impute(values[j], masks[j], values[others], masks[others], cfg))
    return out


def repeat_forecast(lookback, horizon: int) -> np.ndarray:
    """Copy the last ``horizon`` look-back values. A horizon longer than the
    look-back repeats the whole look-back periodically after its end."""
    lb = np.asarray(lookback, dtype=np.float64)
    if lb.size < 1:
        raise ContractError("repeat_forecast needs a nonempty look-back")
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    L = lb.size
    if horizon <= L:
        return lb[L - horizon:].copy()
    return lb[np.arange(horizon) % L]
