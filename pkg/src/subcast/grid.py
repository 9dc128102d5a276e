"""Grid geometry, land masking, and the spatio-temporal field containers.

Conventions used throughout the package:

- Array indexing is ``(i, j) = (lat_index, lon_index)``; flat location ids
  are row-major with latitude as the outer axis.
- Cell ``(i, j)`` sits at ``lat = lat_origin + i*step`` and
  ``lon = lon_origin + j*step``; longitudes live in ``[0, 360)`` degrees.
- Missing values are an explicit boolean flag, never a sentinel number.
  (Values at flagged cells are stored as NaN so accidental use is loud.)
- Every container is immutable after construction: arrays are copied in and
  set read-only, so instances are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

__all__ = [
    "GridSpec",
    "LandMask",
    "TimeIndex",
    "SpatialField",
    "EnsembleField",
    "Dataset",
    "cell_index",
    "cell_coords",
    "land_locations",
]


class GridError(ValueError):
    """Invalid grid geometry or out-of-bounds access."""


def _frozen_array(values, dtype, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if shape is not None and arr.shape != tuple(shape):
        raise GridError(f"expected array of shape {tuple(shape)}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridSpec:
    """Rectangular lat-lon grid: ``n_lat`` rows by ``n_lon`` columns."""

    n_lat: int
    n_lon: int
    lat_origin: float = 25.0
    lon_origin: float = 235.0
    step: float = 1.0

    def __post_init__(self):
        if self.n_lat < 1 or self.n_lon < 1:
            raise GridError(f"grid must be at least 1x1, got {self.n_lat}x{self.n_lon}")
        if not self.step > 0:
            raise GridError(f"grid step must be positive, got {self.step}")

    @property
    def n_cells(self) -> int:
        return self.n_lat * self.n_lon

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    def lat(self, i: int) -> float:
        return self.lat_origin + i * self.step

    def lon(self, j: int) -> float:
        # kept in [0, 360) so sinusoidal encodings see no sign discontinuity
        return (self.lon_origin + j * self.step) % 360.0

    def lats(self) -> np.ndarray:
        return self.lat_origin + np.arange(self.n_lat) * self.step

    def lons(self) -> np.ndarray:
        return (self.lon_origin + np.arange(self.n_lon) * self.step) % 360.0


def cell_index(grid: GridSpec, lat_idx: int, lon_idx: int) -> int:
    """Row-major flat id of cell ``(lat_idx, lon_idx)``."""
    if not 0 <= lat_idx < grid.n_lat:
        raise GridError(f"lat index {lat_idx} out of range [0, {grid.n_lat})")
    if not 0 <= lon_idx < grid.n_lon:
        raise GridError(f"lon index {lon_idx} out of range [0, {grid.n_lon})")
    return lat_idx * grid.n_lon + lon_idx


def cell_coords(grid: GridSpec, flat_id: int) -> tuple[int, int]:
    """Inverse of :func:`cell_index`."""
    if not 0 <= flat_id < grid.n_cells:
        raise GridError(f"flat id {flat_id} out of range [0, {grid.n_cells})")
    return divmod(flat_id, grid.n_lon)


@dataclass(frozen=True)
class LandMask:
    """Boolean land/sea partition of a grid; land cells are forecast targets."""

    grid: GridSpec
    is_land: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _frozen_array(self.is_land, bool, self.grid.shape)
        object.__setattr__(self, "is_land", arr)
        if not arr.any():
            raise GridError("land mask must contain at least one land cell")

    @property
    def n_land(self) -> int:
        return int(self.is_land.sum())

    @property
    def n_sea(self) -> int:
        return self.grid.n_cells - self.n_land

    def sea_locations(self) -> np.ndarray:
        return np.flatnonzero(~self.is_land.ravel())


def land_locations(mask: LandMask) -> np.ndarray:
    """Flat ids of land cells in deterministic row-major order."""
    return np.flatnonzero(mask.is_land.ravel())


@dataclass(frozen=True)
class TimeIndex:
    """Consecutive monthly timestamps with chronological split boundaries.

    The sequence starts at (start_year, start_month) and advances one
    calendar month per step, so entries are strictly increasing by
    construction.  ``train_end`` and ``val_end`` delimit the train /
    validation / test partition: train is ``[0, train_end)``, validation
    ``[train_end, val_end)``, test ``[val_end, n_months)``.
    """

    start_year: int
    start_month: int
    n_months: int
    train_end: int
    val_end: int

    def __post_init__(self):
        if not 1 <= self.start_month <= 12:
            raise GridError(f"start month must be 1..12, got {self.start_month}")
        if self.n_months < 1:
            raise GridError("time index must cover at least one month")
        if not (0 < self.train_end < self.val_end <= self.n_months):
            raise GridError(
                f"split boundaries ({self.train_end}, {self.val_end}) invalid for "
                f"{self.n_months} months: need 0 < train_end < val_end <= n_months"
            )

    def __len__(self) -> int:
        return self.n_months

    def month_of(self, t: int) -> int:
        """Calendar month (1..12) of entry ``t``."""
        if not 0 <= t < self.n_months:
            raise GridError(f"time step {t} out of range [0, {self.n_months})")
        return (self.start_month - 1 + t) % 12 + 1

    def year_of(self, t: int) -> int:
        if not 0 <= t < self.n_months:
            raise GridError(f"time step {t} out of range [0, {self.n_months})")
        return self.start_year + (self.start_month - 1 + t) // 12

    def months(self) -> np.ndarray:
        """Calendar months of all entries as an array of 1..12."""
        return (self.start_month - 1 + np.arange(self.n_months)) % 12 + 1

    def entries(self) -> Iterator[tuple[int, int]]:
        for t in range(self.n_months):
            yield (self.year_of(t), self.month_of(t))


@dataclass(frozen=True)
class SpatialField:
    """One 2-D field on a grid, with an explicit per-cell missing flag."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)
    missing: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != self.grid.shape:
            raise GridError(f"field shape {vals.shape} != grid shape {self.grid.shape}")
        miss = _frozen_array(self.missing, bool, self.grid.shape)
        if not np.isfinite(vals[~miss]).all():
            raise GridError("field has non-finite values at cells not flagged missing")
        vals[miss] = np.nan
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "missing", miss)

    @classmethod
    def full(cls, grid: GridSpec, values) -> "SpatialField":
        """Field with no missing cells."""
        return cls(grid, values, np.zeros(grid.shape, dtype=bool))


@dataclass(frozen=True)
class EnsembleField:
    """K member forecasts on one grid; member order is meaningful.

    Members are ordered by initialization and the order is preserved
    verbatim through construction, serialization, and feature assembly.
    """

    grid: GridSpec
    members: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.members, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1:] != self.grid.shape:
            raise GridError(
                f"ensemble members must have shape (K, {self.grid.n_lat}, "
                f"{self.grid.n_lon}), got {arr.shape}"
            )
        if arr.shape[0] < 1:
            raise GridError("ensemble needs at least one member")
        arr.setflags(write=False)
        object.__setattr__(self, "members", arr)

    @classmethod
    def from_fields(cls, fields: list[SpatialField]) -> "EnsembleField":
        if not fields:
            raise GridError("ensemble needs at least one member")
        grid = fields[0].grid
        for f in fields[1:]:
            if f.grid != grid:
                raise GridError("ensemble members must share one grid")
        return cls(grid, np.stack([f.values for f in fields]))

    @property
    def n_members(self) -> int:
        return self.members.shape[0]


@dataclass(frozen=True)
class Dataset:
    """Time-indexed targets, ensemble forecasts, and covariates on one grid.

    Dense layout: ``target`` is (T, n_lat, n_lon) with NaN at cells listed
    missing in ``target_missing`` (constant over time; always a subset of
    sea).  ``ensemble`` is (T, K, n_lat, n_lon).  ``covariates`` maps a
    variable name to a (T, n_lat, n_lon) series whose missing pattern is in
    ``covariate_missing``.  ``sst`` (optional) holds one row per month over
    the sea cells listed in ``sst_cells`` (flat ids, row-major order).

    Covariate and SST series are stored availability-aligned: the row at
    index ``t`` is the observation usable when forecasting target month
    ``t`` (the generator bakes in the two-month observation lag).
    """

    grid: GridSpec
    mask: LandMask
    time: TimeIndex
    target: np.ndarray = field(repr=False)
    target_missing: np.ndarray = field(repr=False)
    ensemble: np.ndarray = field(repr=False)
    covariates: Mapping[str, np.ndarray] = field(repr=False)
    covariate_missing: Mapping[str, np.ndarray] = field(repr=False)
    sst: np.ndarray | None = field(repr=False, default=None)
    sst_cells: np.ndarray | None = field(repr=False, default=None)
    target_name: str = "target"
    target_units: str = "mm"
    target_kind: str = "precip"  # "precip" (min-max norm) or "tmp" (standardize)
    lead_days: int = 14

    def __post_init__(self):
        T = len(self.time)
        shape = self.grid.shape
        tgt = np.array(self.target, dtype=np.float64)
        if tgt.shape != (T,) + shape:
            raise GridError(f"target shape {tgt.shape} != (T={T}, {shape[0]}, {shape[1]})")
        tmiss = _frozen_array(self.target_missing, bool, shape)
        if (tmiss & self.mask.is_land).any():
            raise GridError("target must be non-missing on all land cells")
        if not np.isfinite(tgt[:, ~tmiss]).all():
            raise GridError("target has non-finite values at non-missing cells")
        tgt[:, tmiss] = np.nan
        tgt.setflags(write=False)

        ens = np.array(self.ensemble, dtype=np.float64)
        if ens.ndim != 4 or ens.shape[0] != T or ens.shape[2:] != shape:
            raise GridError(f"ensemble shape {ens.shape} != (T, K, {shape[0]}, {shape[1]})")
        if ens.shape[1] < 1:
            raise GridError("ensemble needs at least one member")
        ens.setflags(write=False)

        covs = {}
        cov_miss = {}
        for name, series in self.covariates.items():
            arr = np.array(series, dtype=np.float64)
            if arr.shape != (T,) + shape:
                raise GridError(f"covariate {name!r} shape {arr.shape} != target shape")
            miss = _frozen_array(self.covariate_missing.get(name, np.zeros(shape, bool)), bool, shape)
            arr[:, miss] = np.nan
            arr.setflags(write=False)
            covs[name] = arr
            cov_miss[name] = miss

        sst = self.sst
        sst_cells = self.sst_cells
        if sst is not None:
            sst = np.array(sst, dtype=np.float64)
            sst_cells = _frozen_array(sst_cells, np.int64)
            if sst.shape != (T, sst_cells.size):
                raise GridError(f"sst shape {sst.shape} != (T, {sst_cells.size})")
            sst.setflags(write=False)
        if self.target_kind not in ("precip", "tmp"):
            raise GridError(f"target_kind must be 'precip' or 'tmp', got {self.target_kind!r}")

        object.__setattr__(self, "target", tgt)
        object.__setattr__(self, "target_missing", tmiss)
        object.__setattr__(self, "ensemble", ens)
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "covariate_missing", cov_miss)
        object.__setattr__(self, "sst", sst)
        object.__setattr__(self, "sst_cells", sst_cells)

    @property
    def n_members(self) -> int:
        return self.ensemble.shape[1]

    @property
    def n_months(self) -> int:
        return len(self.time)

    def target_field(self, t: int) -> SpatialField:
        return SpatialField(self.grid, np.where(self.target_missing, 0.0, self.target[t]),
                            self.target_missing)

    def ensemble_field(self, t: int) -> EnsembleField:
        return EnsembleField(self.grid, self.ensemble[t])

    def covariate_field(self, name: str, t: int) -> SpatialField:
        miss = self.covariate_missing[name]
        return SpatialField(self.grid, np.where(miss, 0.0, self.covariates[name][t]), miss)

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact equality of every value, flag, and piece of metadata."""
        if (self.grid, self.time, self.target_name, self.target_units,
                self.target_kind, self.lead_days) != (
                other.grid, other.time, other.target_name, other.target_units,
                other.target_kind, other.lead_days):
            return False
        if not np.array_equal(self.mask.is_land, other.mask.is_land):
            return False
        if not np.array_equal(self.target, other.target, equal_nan=True):
            return False
        if not np.array_equal(self.target_missing, other.target_missing):
            return False
        if not np.array_equal(self.ensemble, other.ensemble):
            return False
        if sorted(self.covariates) != sorted(other.covariates):
            return False
        for name in self.covariates:
            if not np.array_equal(self.covariates[name], other.covariates[name], equal_nan=True):
                return False
            if not np.array_equal(self.covariate_missing[name], other.covariate_missing[name]):
                return False
        if (self.sst is None) != (other.sst is None):
            return False
        if self.sst is not None:
            if not np.array_equal(self.sst, other.sst):
                return False
            if not np.array_equal(self.sst_cells, other.sst_cells):
                return False
        return True
