"""Dataset ingestion, per-sample z-normalization, window splits and a
synthetic multi-seasonal generator."""

from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, ParseError


class ConstantSeriesError(ContractError):
    """z-normalization of a series whose standard deviation is zero."""


@dataclass
class TimeSeriesSample:
    """One univariate series. Unobserved points hold NaN and ``mask`` False."""

    sample_id: str
    values: np.ndarray
    timestamps: np.ndarray
    mask: np.ndarray | None = None
    norm_stats: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.values.shape != self.timestamps.shape or self.values.ndim != 1:
            raise ContractError(
                f"sample {self.sample_id}: values {self.values.shape} and timestamps {self.timestamps.shape} differ"
            )
        if self.mask is None:
            self.mask = ~np.isnan(self.values)
        else:
            self.mask = np.asarray(self.mask, dtype=bool) & ~np.isnan(self.values)

    def __len__(self):
        return self.values.size

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def window(self, start: int, stop: int) -> "TimeSeriesSample":
        if not 0 <= start < stop <= len(self):
            raise ContractError(f"window [{start}, {stop}) outside series of length {len(self)}")
        return replace(
            self,
            values=self.values[start:stop].copy(),
            timestamps=self.timestamps[start:stop].copy(),
            mask=self.mask[start:stop].copy(),
        )

    def denormalize(self, values) -> np.ndarray:
        mean, std = self.norm_stats
        return np.asarray(values, dtype=np.float64) * std + mean


@dataclass(frozen=True)
class CsvLayout:
    """Column conventions for ingestion.

    ``time_column`` is a header name or position; ``sample_columns`` restricts
    which columns become samples (default: every other column).
    """

    time_column: str | int = 0
    sample_columns: Sequence[str] | None = None
    delimiter: str = ","


_MISSING = {"", "nan", "NaN", "NA", "null"}


def _parse_time(cells: list[str], path) -> np.ndarray:
    try:
        return np.array([int(c) for c in cells], dtype=np.int64)
    except ValueError:
        pass
    stamps = []
    for lineno, c in enumerate(cells, start=2):
        try:
            stamps.append(_dt.datetime.fromisoformat(c.strip()))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: time cell {c!r} is neither an integer nor ISO-8601") from None
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise ParseError(f"{path}: timestamps are not strictly increasing")
    return np.arange(len(stamps), dtype=np.int64)


def load_csv(path, layout: CsvLayout | None = None) -> list[TimeSeriesSample]:
    """Read a wide CSV: one time column plus one column per sample."""
    layout = layout or CsvLayout()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=layout.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} cells, found {len(row)}")
            rows.append((lineno, row))

    if isinstance(layout.time_column, int):
        tcol = layout.time_column
    else:
        try:
            tcol = header.index(layout.time_column)
        except ValueError:
            raise ParseError(f"{path}: no time column {layout.time_column!r}") from None
    names = [h for i, h in enumerate(header) if i != tcol]
    if layout.sample_columns is not None:
        missing = set(layout.sample_columns) - set(names)
        if missing:
            raise ParseError(f"{path}: unknown sample columns {sorted(missing)}")
        names = [n for n in names if n in set(layout.sample_columns)]
    if not rows:
        raise ParseError(f"{path}: no data rows")
    timestamps = _parse_time([r[tcol] for _, r in rows], path)

    col_index = {h: i for i, h in enumerate(header)}
    samples = []
    for name in names:
        j = col_index[name]
        vals = np.empty(len(rows))
        for k, (lineno, row) in enumerate(rows):
            cell = row[j].strip()
            if cell in _MISSING:
                vals[k] = np.nan
                continue
            try:
                vals[k] = float(cell)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric cell {cell!r} in column {name!r}") from None
            if not math.isfinite(vals[k]):
                raise ParseError(f"{path}:{lineno}: non-finite cell {cell!r} in column {name!r}")
        samples.append(TimeSeriesSample(name, vals, timestamps.copy()))
    return samples


def write_csv(samples: Sequence[TimeSeriesSample], path, time_header: str = "t") -> None:
    if not samples:
        raise ContractError("nothing to write")
    n = len(samples[0])
    if any(len(s) != n for s in samples):
        raise ContractError("samples must share one grid to be written side by side")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([time_header] + [s.sample_id for s in samples])
        for i in range(n):
            row = [str(int(samples[0].timestamps[i]))]
            for s in samples:
                row.append(format(s.values[i], ".17g") if s.mask[i] else "")
            writer.writerow(row)


def z_normalize(sample: TimeSeriesSample) -> tuple[TimeSeriesSample, tuple[float, float]]:
    """Standardize observed values with the population standard deviation."""
    obs = sample.values[sample.mask]
    if obs.size < 2:
        raise ContractError(f"sample {sample.sample_id}: need >= 2 observed values to normalize")
    mean = float(obs.mean())
    std = float(obs.std())
    if std == 0.0:
        raise ConstantSeriesError(f"sample {sample.sample_id} is constant")
    normed = replace(sample, values=(sample.values - mean) / std, mask=sample.mask.copy(), norm_stats=(mean, std))
    return normed, (mean, std)


def normalize_dataset(samples: Sequence[TimeSeriesSample]) -> list[TimeSeriesSample]:
    """z-normalize each sample; constant series are only centred (std 1)."""
    out = []
    for s in samples:
        try:
            normed, _ = z_normalize(s)
        except ConstantSeriesError:
            mean = float(s.values[s.mask].mean())
            normed = replace(s, values=s.values - mean, mask=s.mask.copy(), norm_stats=(mean, 1.0))
        out.append(normed)
    return out


def apply_stats(sample: TimeSeriesSample, stats: tuple[float, float]) -> TimeSeriesSample:
    mean, std = stats
    return replace(sample, values=(sample.values - mean) / std, mask=sample.mask.copy(), norm_stats=(mean, std))


def denormalize(values, stats: tuple[float, float]) -> np.ndarray:
    mean, std = stats
    return np.asarray(values, dtype=np.float64) * std + mean


@dataclass
class DatasetSplit:
    """Consecutive time windows plus an optional train/new sample partition.

    The first window is the training range; the rest are test ranges.
    """

    windows: list[tuple[int, int]]
    samples_train: set[str] = field(default_factory=set)
    samples_new: set[str] = field(default_factory=set)

    @property
    def train_range(self) -> tuple[int, int]:
        return self.windows[0]

    @property
    def test_ranges(self) -> list[tuple[int, int]]:
        return self.windows[1:]


def split_windows(series_len: int, window_len: int, count: int) -> DatasetSplit:
    if window_len < 1 or count < 1:
        raise ContractError("window_len and count must be >= 1")
    if count * window_len > series_len:
        raise ContractError(f"{count} windows of {window_len} do not fit in {series_len} steps")
    return DatasetSplit([(i * window_len, (i + 1) * window_len) for i in range(count)])


def split_samples(sample_ids: Sequence[str], n_train: int, seed: int = 0) -> tuple[list[str], list[str]]:
    """Random partition of sample ids into known and held-out sets."""
    if not 0 < n_train <= len(sample_ids):
        raise ContractError(f"n_train={n_train} out of range for {len(sample_ids)} samples")
    order = np.random.default_rng(seed).permutation(len(sample_ids))
    ids = list(sample_ids)
    return [ids[i] for i in sorted(order[:n_train])], [ids[i] for i in sorted(order[n_train:])]


def downsample(sample: TimeSeriesSample, stride: int) -> TimeSeriesSample:
    """Keep every ``stride``-th point (10-minute Solar -> hourly uses 6)."""
    if stride < 1:
        raise ContractError("stride must be >= 1")
    return replace(
        sample,
        values=sample.values[::stride].copy(),
        timestamps=np.arange(len(sample.values[::stride]), dtype=np.int64),
        mask=sample.mask[::stride].copy(),
    )


@dataclass(frozen=True)
class SynthConfig:
    """Shared seasonal periods (in time steps) with per-sample amplitude,
    phase and trend drawn from the given ranges."""

    periods: tuple[float, ...] = (24.0, 168.0)
    amplitude_range: tuple[float, float] = (0.5, 1.5)
    phase_range: tuple[float, float] = (0.0, 2 * math.pi)
    trend_range: tuple[float, float] = (0.0, 0.0)
    noise_std: float = 0.0


def synth_generate(n_samples: int, length: int, cfg: SynthConfig | None = None, seed: int = 0) -> list[TimeSeriesSample]:
    """``sum_k a_k sin(2 pi i / P_k + phi_k) + trend * i/(length-1) + noise``."""
    cfg = cfg or SynthConfig()
    if n_samples < 1 or length < 2:
        raise ContractError("synth_generate needs n_samples >= 1 and length >= 2")
    rng = np.random.default_rng(seed)
    steps = np.arange(length, dtype=np.float64)
    ramp = steps / (length - 1)
    periods = np.asarray(cfg.periods, dtype=np.float64)
    out = []
    for j in range(n_samples):
        amps = rng.uniform(*cfg.amplitude_range, size=periods.size)
        phases = rng.uniform(*cfg.phase_range, size=periods.size)
        trend = rng.uniform(*cfg.trend_range)
        values = (amps[:, None] * np.sin(2 * np.pi * steps[None, :] / periods[:, None] + phases[:, None])).sum(axis=0)
        values = values + trend * ramp
        if cfg.noise_std > 0:
            values = values + rng.normal(0.0, cfg.noise_std, size=length)
        out.append(TimeSeriesSample(f"s{j}", values, np.arange(length)))
    return out
