"""Feature assembly for the three spatial paradigms.

- ``independent``: one feature matrix per land location, no location
  features (they would be constants within a location's model).
- ``conditional``: one pooled matrix over all (time, location) samples with
  the location entering as explicit features (positional encoding by
  default); the row count is n_samples x n_land.
- ``spatial``: one channels x n_lat x n_lon stack per time step, with
  location information as channels and per-step scalars (SST principal
  component scores) broadcast to constant maps.

Column order is fixed and recorded in a catalog: ensemble members first (in
member order, never permuted), then target lags, covariates, SST scores,
and location features.  The catalog hash guards against feature
misalignment between training and evaluation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .grid import Dataset, SpatialField, land_locations
from .preprocess import (
    DEFAULT_LAGS,
    PcaModel,
    fill_series,
    first_valid_step,
    location_encoding,
    pca_transform,
    positional_encoding,
)

ENSEMBLE_MODES = ("full", "mean", "sorted")
LOCATION_MODES = ("pe", "latlon", "none")
PARADIGMS = ("independent", "conditional", "spatial")


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    """Which feature blocks to assemble and how to encode location."""

    ensemble_mode: str = "full"
    location_mode: str = "pe"
    include_lags: bool = True
    include_covariates: bool = True
    include_ssts: bool = True
    pe_dim: int = 12
    lags: tuple[int, ...] = DEFAULT_LAGS
    n_sst_components: int = 8

    def __post_init__(self):
        if self.ensemble_mode not in ENSEMBLE_MODES:
            raise FeatureError(f"ensemble_mode must be one of {ENSEMBLE_MODES}")
        if self.location_mode not in LOCATION_MODES:
            raise FeatureError(f"location_mode must be one of {LOCATION_MODES}")
        if self.include_lags and not self.lags:
            raise FeatureError("include_lags=True requires a non-empty lag list")

    def to_dict(self) -> dict:
        return {"ensemble_mode": self.ensemble_mode, "location_mode": self.location_mode,
                "include_lags": self.include_lags,
                "include_covariates": self.include_covariates,
                "include_ssts": self.include_ssts, "pe_dim": self.pe_dim,
                "lags": list(self.lags), "n_sst_components": self.n_sst_components}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        d = dict(d)
        d["lags"] = tuple(d.get("lags", DEFAULT_LAGS))
        return cls(**d)

    def ensemble_only(self) -> "FeatureConfig":
        """Restricted catalog for the members-only baseline models."""
        return replace(self, include_lags=False, include_covariates=False,
                       include_ssts=False, location_mode="none")


@dataclass(frozen=True)
class FeatureCatalog:
    """Ordered column (or channel) names with their source groups."""

    names: tuple[str, ...]
    groups: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) != len(self.groups):
            raise FeatureError("catalog names/groups length mismatch")

    def __len__(self) -> int:
        return len(self.names)

    def indices_of_group(self, group: str) -> np.ndarray:
        return np.array([i for i, g in enumerate(self.groups) if g == group], dtype=int)

    def to_text(self) -> str:
        lines = ["index\tname\tgroup"]
        lines += [f"{i}\t{n}\t{g}" for i, (n, g) in enumerate(zip(self.names, self.groups))]
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        payload = "\n".join(f"{n}:{g}" for n, g in zip(self.names, self.groups))
        return hashlib.sha256(payload.encode()).hexdigest()


def build_catalog(ds: Dataset, paradigm: str, cfg: FeatureConfig) -> FeatureCatalog:
    if paradigm not in PARADIGMS:
        raise FeatureError(f"unknown paradigm {paradigm!r}")
    names: list[str] = []
    groups: list[str] = []

    K = ds.n_members
    if cfg.ensemble_mode == "full":
        names += [f"ens{k:02d}" for k in range(K)]
        groups += ["ensemble"] * K
    elif cfg.ensemble_mode == "sorted":
        names += [f"ens_sorted{k:02d}" for k in range(K)]
        groups += ["ensemble"] * K
    else:
        names.append("ens_mean")
        groups.append("ensemble")

    if cfg.include_lags:
        names += [f"lag{lag:02d}" for lag in cfg.lags]
        groups += ["lag"] * len(cfg.lags)

    if cfg.include_covariates:
        names += list(ds.covariates)
        groups += ["covariate"] * len(ds.covariates)

    if cfg.include_ssts:
        if ds.sst is None:
            raise FeatureError("config asks for SST features but the dataset has none")
        names += [f"sst_pc{c}" for c in range(cfg.n_sst_components)]
        groups += ["sst"] * cfg.n_sst_components

    if paradigm != "independent":
        if cfg.location_mode == "pe":
            names += [f"pe_lon{i:02d}" for i in range(cfg.pe_dim)]
            names += [f"pe_lat{i:02d}" for i in range(cfg.pe_dim)]
            groups += ["location"] * (2 * cfg.pe_dim)
        elif cfg.location_mode == "latlon":
            names += ["lon", "lat"]
            groups += ["location"] * 2

    return FeatureCatalog(tuple(names), tuple(groups))


# ---------------------------------------------------------------------------
# tabular assembly (independent and conditional paradigms)

@dataclass
class TabularFeatures:
    """Feature rows for every (valid time step, land cell) pair.

    ``X`` is (n_steps, n_land, p); conditional-paradigm consumers flatten
    the first two axes into pooled rows.
    """

    paradigm: str
    catalog: FeatureCatalog
    t_steps: np.ndarray
    land_cells: np.ndarray
    X: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    @property
    def n_land(self) -> int:
        return self.land_cells.size

    def positions_in(self, t_lo: int, t_hi: int) -> np.ndarray:
        """Indices into ``t_steps`` of samples inside a time window."""
        return np.flatnonzero((self.t_steps >= t_lo) & (self.t_steps < t_hi))

    def positions_of(self, steps: np.ndarray) -> np.ndarray:
        """Indices into ``t_steps`` of explicit steps (repeats allowed)."""
        steps = np.asarray(steps)
        pos = np.searchsorted(self.t_steps, steps)
        bad = (pos >= self.t_steps.size) | (self.t_steps[np.minimum(pos, self.t_steps.size - 1)] != steps)
        if bad.any():
            raise FeatureError(
                f"steps {sorted(set(steps[bad].tolist()))} lack feature support "
                f"(first valid step is {self.t_steps[0]})")
        return pos

    def pooled_rows(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (rows, p) features and matching targets at sample positions."""
        X = self.X[positions].reshape(-1, self.X.shape[2])
        y = self.y[positions].reshape(-1)
        return X, y

    def location_rows(self, loc_index: int, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Feature matrix and targets of one land cell (by land-list index)."""
        return self.X[positions, loc_index, :], self.y[positions, loc_index]


def _ensemble_block(ds: Dataset, mode: str, t_steps: np.ndarray,
                    land_flat: np.ndarray) -> np.ndarray:
    li, lj = np.unravel_index(land_flat, ds.grid.shape)
    block = ds.ensemble[t_steps][:, :, li, lj]         # (n_t, K, L)
    block = np.transpose(block, (0, 2, 1))             # (n_t, L, K)
    if mode == "sorted":
        block = np.sort(block, axis=2)
    elif mode == "mean":
        block = block.mean(axis=2, keepdims=True)
    return block


def assemble_tabular(ds: Dataset, paradigm: str, cfg: FeatureConfig,
                     pca: PcaModel | None = None) -> TabularFeatures:
    if paradigm not in ("independent", "conditional"):
        raise FeatureError(f"tabular assembly got paradigm {paradigm!r}")
    catalog = build_catalog(ds, paradigm, cfg)
    land_flat = land_locations(ds.mask)
    li, lj = np.unravel_index(land_flat, ds.grid.shape)
    L = land_flat.size
    T = ds.n_months

    t0 = first_valid_step(cfg.lags) if cfg.include_lags else 0
    if t0 >= T:
        raise FeatureError(
            f"no sample has full lag support: max lag {max(cfg.lags)} with only "
            f"{T} months")
    t_steps = np.arange(t0, T)

    blocks = [_ensemble_block(ds, cfg.ensemble_mode, t_steps, land_flat)]

    y_land = ds.target[:, li, lj]                      # (T, L)
    if cfg.include_lags:
        lag_idx = t_steps[:, None] - np.asarray(cfg.lags)[None, :]
        blocks.append(np.transpose(y_land[lag_idx], (0, 2, 1)))  # (n_t, L, n_lags)

    if cfg.include_covariates:
        cov = np.stack([ds.covariates[name][:, li, lj] for name in ds.covariates], axis=2)
        blocks.append(cov[t_steps])                    # (n_t, L, P)

    if cfg.include_ssts:
        if pca is None:
            raise FeatureError("SST features need a fitted PCA model")
        scores = pca_transform(pca, ds.sst[t_steps])   # (n_t, n_pc)
        blocks.append(np.broadcast_to(scores[:, None, :],
                                      (t_steps.size, L, scores.shape[1])).copy())

    if paradigm == "conditional" and cfg.location_mode != "none":
        if cfg.location_mode == "pe":
            loc = np.stack([location_encoding(ds.grid.lon(j), ds.grid.lat(i), cfg.pe_dim)
                            for i, j in zip(li, lj)])
        else:
            loc = np.stack([[ds.grid.lon(j), ds.grid.lat(i)] for i, j in zip(li, lj)])
        blocks.append(np.broadcast_to(loc[None, :, :],
                                      (t_steps.size,) + loc.shape).copy())

    X = np.concatenate(blocks, axis=2)
    if X.shape[2] != len(catalog):
        raise FeatureError(f"assembled {X.shape[2]} columns but catalog has {len(catalog)}")
    return TabularFeatures(paradigm=paradigm, catalog=catalog, t_steps=t_steps,
                           land_cells=land_flat, X=X, y=y_land[t_steps])


# ---------------------------------------------------------------------------
# spatial assembly (channel stacks for the encoder-decoder)

@dataclass
class SpatialFeatures:
    """Raw (unnormalized) channel stacks, one per valid time step."""

    catalog: FeatureCatalog
    t_steps: np.ndarray
    stacks: np.ndarray = field(repr=False)       # (n_t, C, H, W)
    target_maps: np.ndarray = field(repr=False)  # (n_t, H, W), NaN off-target

    def steps_in(self, t_lo: int, t_hi: int) -> np.ndarray:
        sel = (self.t_steps >= t_lo) & (self.t_steps < t_hi)
        return np.flatnonzero(sel)


def assemble_spatial(ds: Dataset, cfg: FeatureConfig,
                     pca: PcaModel | None = None) -> SpatialFeatures:
    catalog = build_catalog(ds, "spatial", cfg)
    H, W = ds.grid.shape
    T = ds.n_months
    t0 = first_valid_step(cfg.lags) if cfg.include_lags else 0
    if t0 >= T:
        raise FeatureError("no sample has full lag support")
    t_steps = np.arange(t0, T)
    n_t = t_steps.size

    channels: list[np.ndarray] = []

    ens = ds.ensemble[t_steps]                         # (n_t, K, H, W)
    if cfg.ensemble_mode == "sorted":
        # sorted per cell: order statistics along the member axis
        ens = np.sort(ens, axis=1)
    elif cfg.ensemble_mode == "mean":
        ens = ens.mean(axis=1, keepdims=True)
    channels.append(ens)

    if cfg.include_lags:
        filled_target = fill_series(ds.target, ds.target_missing, ds.grid)
        lag_idx = t_steps[:, None] - np.asarray(cfg.lags)[None, :]
        channels.append(filled_target[lag_idx])        # (n_t, n_lags, H, W)

    if cfg.include_covariates:
        cov_maps = []
        for name in ds.covariates:
            cov_maps.append(fill_series(ds.covariates[name], ds.covariate_missing[name],
                                        ds.grid)[t_steps])
        if cov_maps:
            channels.append(np.stack(cov_maps, axis=1))

    if cfg.include_ssts:
        if pca is None:
            raise FeatureError("SST features need a fitted PCA model")
        scores = pca_transform(pca, ds.sst[t_steps])   # (n_t, n_pc)
        channels.append(np.broadcast_to(scores[:, :, None, None],
                                        (n_t, scores.shape[1], H, W)).copy())

    if cfg.location_mode == "pe":
        lon_pe = np.stack([positional_encoding(ds.grid.lon(j), cfg.pe_dim)
                           for j in range(W)], axis=1)           # (d, W)
        lat_pe = np.stack([positional_encoding(ds.grid.lat(i), cfg.pe_dim)
                           for i in range(H)], axis=1)           # (d, H)
        loc = np.concatenate([
            np.broadcast_to(lon_pe[:, None, :], (cfg.pe_dim, H, W)),
            np.broadcast_to(lat_pe[:, :, None], (cfg.pe_dim, H, W)),
        ])
        channels.append(np.broadcast_to(loc[None], (n_t,) + loc.shape).copy())
    elif cfg.location_mode == "latlon":
        lon_map = np.broadcast_to(ds.grid.lons()[None, :], (H, W))
        lat_map = np.broadcast_to(ds.grid.lats()[:, None], (H, W))
        loc = np.stack([lon_map, lat_map])
        channels.append(np.broadcast_to(loc[None], (n_t,) + loc.shape).copy())

    stacks = np.concatenate(channels, axis=1)
    if stacks.shape[1] != len(catalog):
        raise FeatureError(f"assembled {stacks.shape[1]} channels but catalog has "
                           f"{len(catalog)}")
    return SpatialFeatures(catalog=catalog, t_steps=t_steps, stacks=stacks,
                           target_maps=ds.target[t_steps])


def assemble(ds: Dataset, paradigm: str, cfg: FeatureConfig,
             pca: PcaModel | None = None):
    """Dispatch to the paradigm-specific assembler."""
    if paradigm == "spatial":
        return assemble_spatial(ds, cfg, pca)
    return assemble_tabular(ds, paradigm, cfg, pca)
