"""Statistical preprocessing: climatology, detrending, terciles, SST PCA,
missing-value fill, positional encoding, lags, and normalization.

Percentiles use the linear-interpolation (R-7) definition everywhere, which
is numpy's default.  Tercile boundaries are closed into the middle class:
a value exactly at either threshold gets label 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import GridSpec, LandMask, SpatialField

DEFAULT_LAGS = (2, 3, 4, 12, 24)


class PreprocessError(ValueError):
    pass


# ---------------------------------------------------------------------------
# climatology and detrending

@dataclass(frozen=True)
class Climatology:
    """Per-(calendar month, cell) mean of a variable; ``values`` is (12, H, W).

    ``source`` records whether the table was fitted on observed truth or on
    a model's own predictions (the latter is used to detrend the raw
    ensemble average, whose members may be biased).
    """

    grid: GridSpec
    values: np.ndarray = field(repr=False)
    source: str = "observed"

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != (12,) + self.grid.shape:
            raise PreprocessError(f"climatology shape {vals.shape} != (12, H, W)")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def at(self, month: int, i: int, j: int) -> float:
        return float(self.values[month - 1, i, j])


def _monthly_mean(series: np.ndarray, months: np.ndarray) -> np.ndarray:
    """(12, ...) table of per-calendar-month means; errors listing absent months."""
    series = np.asarray(series, dtype=np.float64)
    months = np.asarray(months)
    if series.shape[0] != months.shape[0]:
        raise PreprocessError("series and month labels differ in length")
    absent = sorted(set(range(1, 13)) - set(int(m) for m in months))
    if absent:
        raise PreprocessError(f"reference period has no samples for months {absent}")
    out = np.empty((12,) + series.shape[1:])
    for m in range(1, 13):
        out[m - 1] = series[months == m].mean(axis=0)
    return out


def monthly_climatology(series: np.ndarray, months: np.ndarray, grid: GridSpec,
                        source: str = "observed") -> Climatology:
    """Fit s[m, cell] = mean over reference samples of calendar month m.

    ``series`` is (T, H, W) reference values (the training split of the
    truth, or a model's training-period predictions for a model
    climatology); entries may be NaN at cells where the variable is
    undefined, and those cells stay NaN in the table.
    """
    return Climatology(grid, _monthly_mean(series, months), source)


def model_climatology(predictions: np.ndarray, months: np.ndarray,
                      grid: GridSpec) -> Climatology:
    """Climatology of a model's own training-period predictions."""
    return monthly_climatology(predictions, months, grid, source="model")


def detrend(values: np.ndarray, clim: Climatology, months: np.ndarray) -> np.ndarray:
    """Subtract the month-matched climatology from each time slice."""
    values = np.asarray(values, dtype=np.float64)
    months = np.asarray(months)
    if values.shape[0] != months.shape[0]:
        raise PreprocessError("values and month labels differ in length")
    if np.isnan(clim.values[months - 1]).all(axis=(1, 2)).any():
        raise PreprocessError("climatology does not cover a requested month")
    return values - clim.values[months - 1]


def add_climatology(values: np.ndarray, clim: Climatology, months: np.ndarray) -> np.ndarray:
    """Inverse of :func:`detrend`."""
    months = np.asarray(months)
    return np.asarray(values, dtype=np.float64) + clim.values[months - 1]


# ---------------------------------------------------------------------------
# terciles

@dataclass(frozen=True)
class TercileThresholds:
    """33rd/66th percentile tables, each (12, H, W)."""

    grid: GridSpec
    q33: np.ndarray = field(repr=False)
    q66: np.ndarray = field(repr=False)

    def __post_init__(self):
        q33 = np.array(self.q33, dtype=np.float64)
        q66 = np.array(self.q66, dtype=np.float64)
        for name, q in (("q33", q33), ("q66", q66)):
            if q.shape != (12,) + self.grid.shape:
                raise PreprocessError(f"{name} shape {q.shape} != (12, H, W)")
        with np.errstate(invalid="ignore"):
            if np.any(q33 > q66):
                raise PreprocessError("q33 exceeds q66 somewhere")
        q33.setflags(write=False)
        q66.setflags(write=False)
        object.__setattr__(self, "q33", q33)
        object.__setattr__(self, "q66", q66)


def tercile_thresholds(series: np.ndarray, months: np.ndarray,
                       grid: GridSpec) -> TercileThresholds:
    """Per-(month, cell) 33rd/66th percentiles of a reference series (R-7)."""
    series = np.asarray(series, dtype=np.float64)
    months = np.asarray(months)
    q33 = np.empty((12,) + series.shape[1:])
    q66 = np.empty_like(q33)
    for m in range(1, 13):
        rows = series[months == m]
        if rows.shape[0] < 3:
            raise PreprocessError(
                f"month {m} has {rows.shape[0]} reference samples, need >= 3")
        q33[m - 1] = np.percentile(rows, 33, axis=0)
        q66[m - 1] = np.percentile(rows, 66, axis=0)
    return TercileThresholds(grid, q33, q66)


def tercile_label(values: np.ndarray, thresholds: TercileThresholds,
                  months: np.ndarray) -> np.ndarray:
    """-1 below q33, +1 above q66, else 0; exact threshold hits are class 0."""
    values = np.asarray(values, dtype=np.float64)
    months = np.asarray(months)
    lo = thresholds.q33[months - 1]
    hi = thresholds.q66[months - 1]
    labels = np.zeros(values.shape, dtype=np.int64)
    with np.errstate(invalid="ignore"):
        labels[values < lo] = -1
        labels[values > hi] = 1
    return labels


# ---------------------------------------------------------------------------
# PCA of SST series

@dataclass(frozen=True)
class PcaModel:
    """Top-n principal directions of the (column-centered) training matrix."""

    mean: np.ndarray = field(repr=False)
    components: np.ndarray = field(repr=False)  # (n_components, n_points)

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        comps = np.array(self.components, dtype=np.float64)
        if comps.ndim != 2 or mean.ndim != 1 or comps.shape[1] != mean.shape[0]:
            raise PreprocessError("component matrix and mean vector are inconsistent")
        gram = comps @ comps.T
        if not np.allclose(gram, np.eye(comps.shape[0]), atol=1e-8):
            raise PreprocessError("components are not orthonormal")
        mean.setflags(write=False)
        comps.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(train_matrix: np.ndarray, n_components: int = 8) -> PcaModel:
    """Fit PCA via SVD of the centered training matrix (rows = months).

    Components are the top right singular vectors, sign-fixed so each
    component's largest-magnitude entry is positive.
    """
    X = np.asarray(train_matrix, dtype=np.float64)
    if X.ndim != 2:
        raise PreprocessError("training matrix must be 2-D (months x points)")
    n_rows, n_points = X.shape
    if n_components > min(n_rows, n_points):
        raise PreprocessError(
            f"cannot extract {n_components} components from a "
            f"{n_rows}x{n_points} matrix")
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:n_components]
    # canonical sign: largest-|.| entry of each component positive
    for r in range(comps.shape[0]):
        k = np.argmax(np.abs(comps[r]))
        if comps[r, k] < 0:
            comps[r] = -comps[r]
    return PcaModel(mean, comps)


def pca_transform(model: PcaModel, rows: np.ndarray) -> np.ndarray:
    """Scores of one row (n_points,) or many rows (m, n_points)."""
    rows = np.asarray(rows, dtype=np.float64)
    return (rows - model.mean) @ model.components.T


# ---------------------------------------------------------------------------
# nearest-neighbor fill

def nearest_fill(field_: SpatialField) -> SpatialField:
    """Fill missing cells from the nearest non-missing cell.

    Distance is Euclidean in cell coordinates; ties go to the smaller flat
    id (row-major scan order guarantees it).
    """
    if not field_.missing.any():
        return field_
    if field_.missing.all():
        raise PreprocessError("cannot fill an all-missing field")
    h, w = field_.grid.shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    valid = ~field_.missing
    vi = ii[valid].astype(np.float64)
    vj = jj[valid].astype(np.float64)
    vvals = field_.values[valid]
    out = field_.values.copy()
    mi = ii[field_.missing]
    mj = jj[field_.missing]
    # brute force is fine at desk scale; argmin takes the first (smallest
    # flat id) among equidistant donors because valid cells are enumerated
    # row-major
    d2 = (mi[:, None] - vi[None, :]) ** 2 + (mj[:, None] - vj[None, :]) ** 2
    out[field_.missing] = vvals[np.argmin(d2, axis=1)]
    return SpatialField.full(field_.grid, out)


def fill_series(series: np.ndarray, missing: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Apply :func:`nearest_fill` to every time slice of a (T, H, W) series."""
    if not missing.any():
        return np.asarray(series, dtype=np.float64)
    out = np.empty_like(series, dtype=np.float64)
    for t in range(series.shape[0]):
        vals = np.where(missing, 0.0, series[t])
        out[t] = nearest_fill(SpatialField(grid, vals, missing)).values
    return out


# ---------------------------------------------------------------------------
# positional encoding

def positional_encoding(coord: float, d: int) -> np.ndarray:
    """Sinusoidal encoding of one scalar coordinate into ``d`` values.

    Entry 2i is sin(coord / 10000^(2i/d)) and entry 2i+1 the matching
    cosine, for i = 0..d/2-1.  A grid location contributes the encoding of
    its longitude followed by that of its latitude, 2d values in total.
    """
    if d < 2 or d % 2 != 0:
        raise PreprocessError(f"encoding size must be even and >= 2, got {d}")
    i = np.arange(d // 2)
    freq = 1.0 / np.power(10000.0, 2.0 * i / d)
    out = np.empty(d)
    out[0::2] = np.sin(coord * freq)
    out[1::2] = np.cos(coord * freq)
    return out


def location_encoding(lon: float, lat: float, d: int) -> np.ndarray:
    """PE(lon) ++ PE(lat); longitude is reduced to [0, 360) first."""
    return np.concatenate([positional_encoding(lon % 360.0, d),
                           positional_encoding(lat, d)])


# ---------------------------------------------------------------------------
# lagged target features

def lag_features(history: np.ndarray, t: int,
                 lags: Sequence[int] = DEFAULT_LAGS) -> np.ndarray:
    """Values of the series at ``t - lag`` for each lag, in the given order.

    Samples without full lag support are excluded upstream, never
    zero-filled; asking for one raises.
    """
    max_lag = max(lags)
    if t < max_lag:
        raise PreprocessError(
            f"time step {t} lacks history for a {max_lag}-month lag; "
            "the sample must be skipped")
    idx = [t - lag for lag in lags]
    return np.asarray(history, dtype=np.float64)[idx]


def first_valid_step(lags: Sequence[int] = DEFAULT_LAGS) -> int:
    """Earliest time step with full lag support."""
    return max(lags) if lags else 0


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormalizationState:
    """Per-feature min-max or standardization parameters, fitted on train only.

    Constant features are flagged and map to 0 instead of dividing by zero.
    Min-max maps the training data into [0, 1] exactly; validation and test
    values may land outside and are deliberately not clipped.
    """

    mode: str  # "minmax" | "standardize"
    lo: np.ndarray = field(repr=False, default=None)   # min or mean
    hi: np.ndarray = field(repr=False, default=None)   # max or std
    constant: np.ndarray = field(repr=False, default=None)

    @classmethod
    def fit(cls, rows: np.ndarray, mode: str) -> "NormalizationState":
        if mode not in ("minmax", "standardize"):
            raise PreprocessError(f"unknown normalization mode {mode!r}")
        rows = np.asarray(rows, dtype=np.float64)
        flat = rows.reshape(rows.shape[0], -1) if rows.ndim > 1 else rows.reshape(-1, 1)
        if mode == "minmax":
            lo = np.nanmin(flat, axis=0)
            hi = np.nanmax(flat, axis=0)
            constant = ~(hi > lo)
        else:
            lo = np.nanmean(flat, axis=0)
            hi = np.nanstd(flat, axis=0)
            constant = ~(hi > 0)
        return cls(mode=mode, lo=lo, hi=hi, constant=constant)

    def apply(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        shape = rows.shape
        flat = rows.reshape(shape[0], -1) if rows.ndim > 1 else rows.reshape(-1, 1)
        span = np.where(self.constant, 1.0, self.hi - self.lo if self.mode == "minmax" else self.hi)
        out = (flat - self.lo) / span
        out[:, self.constant] = 0.0
        return out.reshape(shape)

    def invert(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        shape = rows.shape
        flat = rows.reshape(shape[0], -1) if rows.ndim > 1 else rows.reshape(-1, 1)
        span = np.where(self.constant, 1.0, self.hi - self.lo if self.mode == "minmax" else self.hi)
        out = flat * span + self.lo
        if self.constant.any():
            out[:, self.constant] = self.lo[self.constant]
        return out.reshape(shape)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationState":
        return cls(mode=d["mode"], lo=np.asarray(d["lo"], dtype=np.float64),
                   hi=np.asarray(d["hi"], dtype=np.float64),
                   constant=np.asarray(d["constant"], dtype=bool))


def target_normalization_mode(target_kind: str) -> str:
    """Min-max for precipitation-like targets, standardization for temperature."""
    return "minmax" if target_kind == "precip" else "standardize"
