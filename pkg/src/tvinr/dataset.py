"""Time series containers, standardization, masking, windowing and CSV ingestion.

Every cell of a sample is in exactly one of three states:

* ``Cell.OBSERVED`` -- value available and given to the model as context,
* ``Cell.MASKED``   -- value available but hidden; a reconstruction target,
* ``Cell.ABSENT``   -- no value exists; excluded from every loss and metric.

Absent cells carry ``NaN`` in ``features``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

EPS_STD = 1e-8


class Cell(enum.IntEnum):
    ABSENT = 0
    OBSERVED = 1
    MASKED = 2


class DatasetError(ValueError):
    """Base class for dataset contract violations."""


class InvalidSplitError(DatasetError):
    pass


class InsufficientDataError(DatasetError):
    pass


class CsvParseError(DatasetError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class TimeSeriesSample:
    """One (possibly partially observed) multivariate series.

    ``stamps`` are the model-facing time coordinates, ``times`` the original
    ones (used when writing results back out).
    """

    stamps: np.ndarray
    features: np.ndarray
    mask: np.ndarray
    covariates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    times: np.ndarray | None = None
    series_id: str = "0"
    window_id: str = ""

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.mask = np.asarray(self.mask, dtype=np.int8)
        if self.mask.ndim == 1:
            self.mask = self.mask[:, None]
        self.covariates = np.asarray(self.covariates, dtype=np.float64).reshape(-1)
        if self.times is None:
            self.times = self.stamps.copy()
        else:
            self.times = np.asarray(self.times, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        L = len(self.stamps)
        if self.stamps.ndim != 1 or self.features.shape[0] != L or self.mask.shape != self.features.shape:
            raise DatasetError(
                f"inconsistent shapes: stamps {self.stamps.shape}, features {self.features.shape}, "
                f"mask {self.mask.shape}"
            )
        if len(self.times) != L:
            raise DatasetError("times and stamps differ in length")
        if not np.all(np.isfinite(self.stamps)):
            raise DatasetError("stamps must be finite")
        if L > 1 and np.any(np.diff(self.stamps) <= 0):
            raise DatasetError("stamps must be strictly increasing")
        if not np.all(np.isin(self.mask, (Cell.ABSENT, Cell.OBSERVED, Cell.MASKED))):
            raise DatasetError("mask holds an unknown cell state")
        avail = self.mask != Cell.ABSENT
        if not np.all(np.isfinite(self.features[avail])):
            raise DatasetError("features must be finite at observed and masked cells")

    @property
    def length(self) -> int:
        return len(self.stamps)

    @property
    def n_channels(self) -> int:
        return self.features.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return self.mask == Cell.OBSERVED

    @property
    def masked(self) -> np.ndarray:
        return self.mask == Cell.MASKED

    @property
    def absent(self) -> np.ndarray:
        return self.mask == Cell.ABSENT

    @property
    def available(self) -> np.ndarray:
        return self.mask != Cell.ABSENT

    @property
    def tau(self) -> float:
        n_avail = int(self.available.sum())
        return float(self.observed.sum()) / n_avail if n_avail else 1.0

    def slice(self, start: int, stop: int, window_id: str = "") -> "TimeSeriesSample":
        """Rows ``start:stop`` with stamps re-normalized to [0, 1]."""
        times = self.times[start:stop]
        return TimeSeriesSample(
            stamps=normalize_stamps(times),
            features=self.features[start:stop].copy(),
            mask=self.mask[start:stop].copy(),
            covariates=self.covariates.copy(),
            times=times.copy(),
            series_id=self.series_id,
            window_id=window_id,
        )

    def head(self, n: int) -> "TimeSeriesSample":
        """First ``n`` rows, keeping the stamp scale of the full sample."""
        return replace(
            self,
            stamps=self.stamps[:n].copy(),
            features=self.features[:n].copy(),
            mask=self.mask[:n].copy(),
            times=self.times[:n].copy(),
            covariates=self.covariates.copy(),
        )

    def with_mask(self, mask: np.ndarray) -> "TimeSeriesSample":
        return replace(
            self,
            stamps=self.stamps.copy(),
            features=self.features.copy(),
            mask=np.asarray(mask, dtype=np.int8),
            times=self.times.copy(),
            covariates=self.covariates.copy(),
        )


def normalize_stamps(times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if len(times) < 2:
        return np.zeros_like(times)
    return (times - times[0]) / (times[-1] - times[0])


def fully_observed(values: np.ndarray, times: np.ndarray | None = None, **kwargs) -> TimeSeriesSample:
    """Wrap a dense ``L`` or ``L x d`` array as an all-observed sample (NaN -> absent)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if times is None:
        times = np.arange(len(values), dtype=np.float64)
    mask = np.where(np.isnan(values), Cell.ABSENT, Cell.OBSERVED).astype(np.int8)
    return TimeSeriesSample(normalize_stamps(times), values, mask, times=times, **kwargs)


# ---------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def standardize_channels(sample: TimeSeriesSample) -> tuple[TimeSeriesSample, ChannelStats]:
    """Per-channel z-scoring over the non-absent cells (population std, floored)."""
    d = sample.n_channels
    mean = np.zeros(d)
    std = np.ones(d)
    out = sample.features.copy()
    avail = sample.available
    for j in range(d):
        col = sample.features[avail[:, j], j]
        if col.size == 0:
            continue
        mean[j] = col.mean()
        std[j] = max(col.std(), EPS_STD)
        out[avail[:, j], j] = (col - mean[j]) / std[j]
    return replace(sample, features=out, mask=sample.mask.copy()), ChannelStats(mean, std)


# ---------------------------------------------------------------------------
# masking


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_imputation_mask(sample: TimeSeriesSample, tau: float, rng: np.random.Generator) -> TimeSeriesSample:
    """Keep ``round(tau * n_avail)`` uniformly chosen available cells observed; mask the rest."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    avail = np.flatnonzero(sample.available.ravel())
    n_obs = _round_half_up(tau * len(avail))
    keep = avail[rng.permutation(len(avail))[:n_obs]]
    flat = np.where(sample.available.ravel(), Cell.MASKED, Cell.ABSENT).astype(np.int8)
    flat[keep] = Cell.OBSERVED
    return sample.with_mask(flat.reshape(sample.mask.shape))


def make_forecast_mask(sample: TimeSeriesSample, history: int, horizon: int) -> TimeSeriesSample:
    """Mask every available cell at stamp index ``>= history``."""
    if history < 1 or horizon < 1 or history + horizon != sample.length:
        raise InvalidSplitError(
            f"history ({history}) + horizon ({horizon}) must equal the sample length ({sample.length}), both >= 1"
        )
    mask = sample.mask.copy()
    tail = mask[history:]
    tail[tail != Cell.ABSENT] = Cell.MASKED
    return sample.with_mask(mask)


# ---------------------------------------------------------------------------
# windowing


@dataclass(frozen=True)
class SplitPlan:
    window: int
    stride: int
    test_windows: int
    val_fraction: float = 1.0 / 6.0  # train:val = 5:1

    def __post_init__(self):
        if self.window < 1 or self.stride < 1 or self.test_windows < 0:
            raise ValueError(f"invalid split plan {self}")


def window_series(
    series: TimeSeriesSample, plan: SplitPlan
) -> tuple[list[TimeSeriesSample], list[TimeSeriesSample], list[TimeSeriesSample]]:
    """Split one long series into (train, val, test) windows.

    Test windows are the last ``plan.test_windows`` non-overlapping windows.
    The remaining prefix is strided; the first 5/6 of those windows train,
    the rest validate, so training data precedes validation data.
    """
    n, L = series.length, plan.window
    test_len = L * plan.test_windows
    if n < test_len or n < L:
        raise InsufficientDataError(
            f"series {series.series_id!r} has {n} points; need at least {max(test_len, L)}"
        )
    prefix = n - test_len
    test = [
        series.slice(prefix + k * L, prefix + (k + 1) * L, window_id=f"test{k}")
        for k in range(plan.test_windows)
    ]
    starts = list(range(0, prefix - L + 1, plan.stride)) if prefix >= L else []
    n_train = int(math.floor(len(starts) * (1.0 - plan.val_fraction) + 1e-9))
    train = [series.slice(s, s + L, window_id=f"train{i}") for i, s in enumerate(starts[:n_train])]
    val = [series.slice(s, s + L, window_id=f"val{i}") for i, s in enumerate(starts[n_train:])]
    return train, val, test


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    n_channels: int
    n_covariates: int = 0

    @property
    def header(self) -> list[str]:
        return (
            ["series_id", "t"]
            + [f"y{j}" for j in range(self.n_channels)]
            + [f"c{j}" for j in range(self.n_covariates)]
        )


def _parse_header(row: Sequence[str]) -> CsvSchema:
    if len(row) < 3 or row[0] != "series_id" or row[1] != "t":
        raise CsvParseError(1, "header must start with series_id,t,y0")
    d = k = 0
    for name in row[2:]:
        if k == 0 and name == f"y{d}":
            d += 1
        elif name == f"c{k}":
            k += 1
        else:
            raise CsvParseError(1, f"unknown column {name!r}")
    if d == 0:
        raise CsvParseError(1, "no value columns")
    return CsvSchema(d, k)


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> list[TimeSeriesSample]:
    """Read the ``series_id,t,y0..,c0..`` format; empty value fields become absent cells."""
    rows_by_id: dict[str, list[tuple[int, float, list[float], list[float]]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(1, "empty file") from None
        found = _parse_header([h.strip() for h in header])
        if schema is not None and schema != found:
            raise CsvParseError(1, f"expected columns {schema.header}, found {header}")
        schema = found
        d, k = schema.n_channels, schema.n_covariates
        last_id = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 + d + k:
                raise CsvParseError(lineno, f"expected {2 + d + k} fields, got {len(row)}")
            sid = row[0]
            try:
                t = float(row[1])
                ys = [float(v) if v.strip() else math.nan for v in row[2 : 2 + d]]
                cs = [float(v) for v in row[2 + d :]]
            except ValueError as exc:
                raise CsvParseError(lineno, str(exc)) from None
            if not math.isfinite(t) or any(math.isinf(v) for v in ys):
                raise CsvParseError(lineno, "non-finite value")
            if sid != last_id:
                if sid in rows_by_id:
                    raise CsvParseError(lineno, f"rows of series {sid!r} are not contiguous")
                rows_by_id[sid] = []
                order.append(sid)
                last_id = sid
            prev = rows_by_id[sid]
            if prev:
                if t <= prev[-1][1]:
                    raise CsvParseError(lineno, f"stamps of series {sid!r} are not strictly increasing")
                if cs != prev[0][3]:
                    raise CsvParseError(lineno, f"covariates of series {sid!r} change within the series")
            prev.append((lineno, t, ys, cs))

    samples = []
    for sid in order:
        rows = rows_by_id[sid]
        times = np.array([r[1] for r in rows])
        values = np.array([r[2] for r in rows], dtype=np.float64).reshape(len(rows), d)
        samples.append(
            fully_observed(values, times, covariates=np.array(rows[0][3], dtype=np.float64), series_id=sid)
        )
    return samples


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_csv(path: str | Path, samples: Sequence[TimeSeriesSample]) -> None:
    """Inverse of :func:`load_csv`; non-available cells are written empty."""
    if not samples:
        raise ValueError("nothing to write")
    schema = CsvSchema(samples[0].n_channels, len(samples[0].covariates))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.header)
        for s in samples:
            if s.n_channels != schema.n_channels or len(s.covariates) != schema.n_covariates:
                raise ValueError("all samples must share one schema")
            vals = np.where(s.available, s.features, np.nan)
            for l in range(s.length):
                w.writerow(
                    [s.series_id, _fmt(s.times[l])]
                    + [_fmt(v) for v in vals[l]]
                    + [_fmt(c) for c in s.covariates]
                )


# ---------------------------------------------------------------------------
# synthetic data

SYNTH_KINDS = ("sine-mix", "damped-sine", "trend-seasonal")


@dataclass(frozen=True)
class SynthComponent:
    amplitude: float
    period: float
    phase: float


@dataclass(frozen=True)
class SynthParams:
    """Per-channel generating parameters of one synthetic series."""

    offset: np.ndarray
    components: tuple[tuple[SynthComponent, ...], ...]
    slope: np.ndarray
    decay: np.ndarray


def _noiseless(kind: str, p: SynthParams, t: np.ndarray, n: int) -> np.ndarray:
    d = len(p.offset)
    out = np.empty((len(t), d))
    for j in range(d):
        y = np.full(len(t), p.offset[j])
        for c in p.components[j]:
            y = y + c.amplitude * np.sin(2 * np.pi * t / c.period + c.phase)
        if kind == "damped-sine":
            y = p.offset[j] + (y - p.offset[j]) * np.exp(-p.decay[j] * t / n)
        elif kind == "trend-seasonal":
            y = y + p.slope[j] * (t / max(n - 1, 1) - 0.5)
        out[:, j] = y
    return out


def synth_generate(
    kind: str,
    n_series: int,
    length: int,
    n_channels: int = 1,
    noise: float = 0.0,
    rng: np.random.Generator | int | None = 0,
    components: int | None = None,
    return_params: bool = False,
):
    """Synthetic series with per-series random parameters.

    Time runs over integer steps ``0..length-1``. Ranges (per channel):

    * offset ~ U[-0.5, 0.5]
    * ``sine-mix``: ``components`` (default 3) sines, amplitude ~ U[0.5, 1.5],
      period ~ U[40, 160] steps, phase ~ U[0, 2pi)
    * ``damped-sine``: one sine as above, envelope ``exp(-decay * t / length)``
      with decay ~ U[0.5, 3]
    * ``trend-seasonal``: a seasonal sine (amplitude ~ U[0.5, 1.5], period
      ~ U[100, 250]) plus its second harmonic (amplitude ~ U[0, 0.5]) plus a
      linear trend whose total change over the series is ~ U[-1.5, 1.5]

    Additive i.i.d. Gaussian noise with std ``noise``.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown kind {kind!r}; choose from {SYNTH_KINDS}")
    if n_series < 1 or length < 2 or n_channels < 1:
        raise ValueError("need n_series >= 1, length >= 2, n_channels >= 1")
    rng = np.random.default_rng(rng)
    t = np.arange(length, dtype=np.float64)
    samples, params = [], []
    for i in range(n_series):
        offset = rng.uniform(-0.5, 0.5, n_channels)
        comps = []
        for _ in range(n_channels):
            if kind == "sine-mix":
                k = 3 if components is None else components
                comps.append(
                    tuple(
                        SynthComponent(rng.uniform(0.5, 1.5), rng.uniform(40, 160), rng.uniform(0, 2 * np.pi))
                        for _ in range(k)
                    )
                )
            elif kind == "damped-sine":
                comps.append(
                    (SynthComponent(rng.uniform(0.5, 1.5), rng.uniform(40, 160), rng.uniform(0, 2 * np.pi)),)
                )
            else:
                period = rng.uniform(100, 250)
                comps.append(
                    (
                        SynthComponent(rng.uniform(0.5, 1.5), period, rng.uniform(0, 2 * np.pi)),
                        SynthComponent(rng.uniform(0.0, 0.5), period / 2, rng.uniform(0, 2 * np.pi)),
                    )
                )
        slope = rng.uniform(-1.5, 1.5, n_channels) if kind == "trend-seasonal" else np.zeros(n_channels)
        decay = rng.uniform(0.5, 3.0, n_channels) if kind == "damped-sine" else np.zeros(n_channels)
        p = SynthParams(offset, tuple(comps), slope, decay)
        y = _noiseless(kind, p, t, length)
        if noise > 0:
            y = y + noise * rng.standard_normal(y.shape)
        samples.append(fully_observed(y, t, series_id=f"{kind}-{i}"))
        params.append(p)
    return (samples, params) if return_params else samples


def synth_noiseless(kind: str, params: SynthParams, length: int) -> np.ndarray:
    return _noiseless(kind, params, np.arange(length, dtype=np.float64), length)
