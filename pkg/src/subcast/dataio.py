"""Dataset serialization, chronological splitting, and the synthetic generator.

On-disk layout: a directory with ``manifest.json`` plus one whitespace-
delimited text grid per (variable, month) under ``data/``, values row-major,
missing cells written as the literal token ``NA``.  Floats are written with
17 significant digits so a save/load round trip is bit-exact.  The land mask
is one extra 0/1 grid.  SST series are stored as grids too (values on sea
cells, NA elsewhere) and re-packed into a (months x sea-points) matrix on
load.

The generator replaces real hindcast/forecast archives at desk scale.  Its
truth process is a seasonal cycle plus a spatially-smooth AR(1) anomaly plus
a small trend; ensemble members are truth plus a fixed per-member bias field
plus member-specific noise, so member identity carries signal and sorting
the members destroys it.  A configurable additive drift hits the members
only during the test period.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Dataset, GridSpec, LandMask, TimeIndex

FORMAT_VERSION = 1

COVARIATE_NAMES = ("rhum", "slp", "hgt500", "tmp2m", "precip")


class DatasetIOError(ValueError):
    """Base class for load/save failures."""


class VersionMismatchError(DatasetIOError):
    pass


class TruncatedFileError(DatasetIOError):
    pass


class CatalogError(DatasetIOError):
    pass


# ---------------------------------------------------------------------------
# grid file primitives

def _write_grid(path: Path, values: np.ndarray, missing: np.ndarray | None = None) -> None:
    h, w = values.shape
    lines = []
    for i in range(h):
        row = []
        for j in range(w):
            if missing is not None and missing[i, j]:
                row.append("NA")
            else:
                row.append(f"{values[i, j]:.17g}")
        lines.append(" ".join(row))
    path.write_text("\n".join(lines) + "\n")


def _read_grid(path: Path, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise TruncatedFileError(f"missing grid file: {path.name}")
    values = np.zeros(shape, dtype=np.float64)
    missing = np.zeros(shape, dtype=bool)
    lines = path.read_text().splitlines()
    if len(lines) != shape[0]:
        raise TruncatedFileError(f"{path.name}: expected {shape[0]} rows, got {len(lines)}")
    for i, line in enumerate(lines):
        tokens = line.split()
        if len(tokens) != shape[1]:
            raise TruncatedFileError(
                f"{path.name}: row {i} has {len(tokens)} values, expected {shape[1]}")
        for j, tok in enumerate(tokens):
            if tok == "NA":
                missing[i, j] = True
                values[i, j] = np.nan
            else:
                values[i, j] = float(tok)
    return values, missing


# ---------------------------------------------------------------------------
# manifest + save/load

def _manifest_dict(ds: Dataset, generator: dict | None) -> dict:
    variables = [{"name": ds.target_name, "units": ds.target_units, "role": "target"}]
    for k in range(ds.n_members):
        variables.append({"name": f"ens{k:02d}", "units": ds.target_units,
                          "role": "ensemble-member"})
    for name in ds.covariates:
        variables.append({"name": name, "units": "", "role": "covariate"})
    if ds.sst is not None:
        variables.append({"name": "sst", "units": "degC", "role": "sst"})
    return {
        "format_version": FORMAT_VERSION,
        "grid": {"n_lat": ds.grid.n_lat, "n_lon": ds.grid.n_lon,
                 "lat_origin": ds.grid.lat_origin, "lon_origin": ds.grid.lon_origin,
                 "step": ds.grid.step},
        "time": {"start_year": ds.time.start_year, "start_month": ds.time.start_month,
                 "n_months": ds.time.n_months},
        "split": {"train_end": ds.time.train_end, "val_end": ds.time.val_end},
        "target": {"name": ds.target_name, "units": ds.target_units,
                   "kind": ds.target_kind},
        "lead_days": ds.lead_days,
        "variables": variables,
        "generator": generator,
    }


def save_dataset(ds: Dataset, path: str | Path, generator: dict | None = None) -> None:
    """Write ``ds`` to a directory; ``load_dataset`` reproduces it bit-exactly."""
    root = Path(path)
    data = root / "data"
    data.mkdir(parents=True, exist_ok=True)

    manifest = _manifest_dict(ds, generator)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _write_grid(root / "land_mask.txt", ds.mask.is_land.astype(np.float64))

    T = ds.n_months
    for t in range(T):
        _write_grid(data / f"{ds.target_name}_{t:04d}.txt", ds.target[t], ds.target_missing)
        for k in range(ds.n_members):
            _write_grid(data / f"ens{k:02d}_{t:04d}.txt", ds.ensemble[t, k])
        for name in ds.covariates:
            _write_grid(data / f"{name}_{t:04d}.txt", ds.covariates[name][t],
                        ds.covariate_missing[name])
        if ds.sst is not None:
            grid_vals = np.full(ds.grid.shape, np.nan)
            flat = grid_vals.reshape(-1)
            flat[ds.sst_cells] = ds.sst[t]
            miss = np.ones(ds.grid.shape, dtype=bool)
            miss.reshape(-1)[ds.sst_cells] = False
            _write_grid(data / f"sst_{t:04d}.txt", grid_vals, miss)


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise TruncatedFileError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"dataset format version {version} unsupported (expected {FORMAT_VERSION})")

    variables = manifest["variables"]
    names = [v["name"] for v in variables]
    if len(set(names)) != len(names):
        raise CatalogError("variable catalog has duplicate names")
    targets = [v for v in variables if v["role"] == "target"]
    if len(targets) != 1:
        raise CatalogError(f"catalog must list exactly one target, found {len(targets)}")

    g = manifest["grid"]
    grid = GridSpec(g["n_lat"], g["n_lon"], g["lat_origin"], g["lon_origin"], g["step"])
    tm = manifest["time"]
    sp = manifest["split"]
    time = TimeIndex(tm["start_year"], tm["start_month"], tm["n_months"],
                     sp["train_end"], sp["val_end"])

    mask_vals, _ = _read_grid(root / "land_mask.txt", grid.shape)
    mask = LandMask(grid, mask_vals > 0.5)

    data = root / "data"
    T = time.n_months
    tinfo = manifest["target"]
    ens_names = sorted(v["name"] for v in variables if v["role"] == "ensemble-member")
    cov_names = [v["name"] for v in variables if v["role"] == "covariate"]
    has_sst = any(v["role"] == "sst" for v in variables)

    target = np.zeros((T,) + grid.shape)
    target_missing = None
    ensemble = np.zeros((T, len(ens_names)) + grid.shape)
    covariates = {name: np.zeros((T,) + grid.shape) for name in cov_names}
    cov_missing = {}
    sst_rows = []
    sst_cells = None

    for t in range(T):
        vals, miss = _read_grid(data / f"{tinfo['name']}_{t:04d}.txt", grid.shape)
        if target_missing is None:
            target_missing = miss
        elif not np.array_equal(miss, target_missing):
            raise CatalogError(f"target missing pattern changes at month {t}")
        target[t] = np.where(miss, 0.0, vals)
        for k, ename in enumerate(ens_names):
            vals, miss = _read_grid(data / f"{ename}_{t:04d}.txt", grid.shape)
            if miss.any():
                raise CatalogError(f"ensemble grid {ename} month {t} has missing cells")
            ensemble[t, k] = vals
        for name in cov_names:
            vals, miss = _read_grid(data / f"{name}_{t:04d}.txt", grid.shape)
            if name not in cov_missing:
                cov_missing[name] = miss
            elif not np.array_equal(miss, cov_missing[name]):
                raise CatalogError(f"covariate {name} missing pattern changes at month {t}")
            covariates[name][t] = np.where(miss, 0.0, vals)
        if has_sst:
            vals, miss = _read_grid(data / f"sst_{t:04d}.txt", grid.shape)
            cells = np.flatnonzero(~miss.reshape(-1))
            if sst_cells is None:
                sst_cells = cells
            elif not np.array_equal(cells, sst_cells):
                raise CatalogError(f"sst coverage changes at month {t}")
            sst_rows.append(vals.reshape(-1)[cells])

    return Dataset(
        grid=grid, mask=mask, time=time,
        target=target, target_missing=target_missing,
        ensemble=ensemble, covariates=covariates, covariate_missing=cov_missing,
        sst=np.stack(sst_rows) if sst_rows else None, sst_cells=sst_cells,
        target_name=tinfo["name"], target_units=tinfo["units"],
        target_kind=tinfo["kind"], lead_days=manifest["lead_days"],
    )


def load_manifest(path: str | Path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise TruncatedFileError(f"no manifest.json under {path}")
    return json.loads(mpath.read_text())


# ---------------------------------------------------------------------------
# chronological splitting

@dataclass(frozen=True)
class SplitView:
    """Contiguous chronological window of a dataset.

    Views expose only their own time range; training-phase code that holds a
    train view cannot reach test months through it.
    """

    dataset: Dataset
    name: str
    start: int
    stop: int

    def __post_init__(self):
        if not (0 <= self.start < self.stop <= self.dataset.n_months):
            raise DatasetIOError(
                f"degenerate split {self.name!r}: [{self.start}, {self.stop}) "
                f"within {self.dataset.n_months} months")

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def t_indices(self) -> np.ndarray:
        return np.arange(self.start, self.stop)

    def months(self) -> np.ndarray:
        return self.dataset.time.months()[self.start:self.stop]

    @property
    def target(self) -> np.ndarray:
        return self.dataset.target[self.start:self.stop]

    @property
    def ensemble(self) -> np.ndarray:
        return self.dataset.ensemble[self.start:self.stop]


def split_dataset(ds: Dataset) -> tuple[SplitView, SplitView, SplitView]:
    """Train/validation/test views at the manifest's stored boundaries."""
    t = ds.time
    train = SplitView(ds, "train", 0, t.train_end)
    val = SplitView(ds, "val", t.train_end, t.val_end)
    test = SplitView(ds, "test", t.val_end, t.n_months)
    return train, val, test


def split_by_name(ds: Dataset, name: str) -> SplitView:
    train, val, test = split_dataset(ds)
    views = {"train": train, "val": val, "test": test}
    if name not in views:
        raise DatasetIOError(f"unknown split {name!r} (expected train/val/test)")
    return views[name]


# ---------------------------------------------------------------------------
# synthetic generation

@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic dataset generator.

    ``member_biases`` gives one additive bias amplitude per member (defaults
    to a symmetric ramp ±``member_bias_amp``); ``member_bias_pattern``
    modulates each member's bias with a fixed smooth spatial field so the
    bias varies by location.  ``member_noise_spread`` > 1 makes some members
    systematically noisier than others, so the plain member mean is not the
    optimal combination.  ``drift`` is added to every member during the test
    period only.

    Datasets meant to feed lag-24 features need ``months`` comfortably above
    48; shorter datasets still generate fine and fail later, at feature
    assembly, when the requested lag has no support.
    """

    n_lat: int = 16
    n_lon: int = 32
    months: int = 144
    train_end: int | None = None  # default: 2/3 of months
    val_end: int | None = None    # default: 5/6 of months
    n_members: int = 8
    member_biases: tuple[float, ...] | None = None
    member_bias_amp: float = 1.0
    member_bias_pattern: float = 0.5
    member_noise: float = 0.6
    member_noise_spread: float = 2.0
    seasonal_amp: float = 4.0
    anomaly_scale: float = 1.5
    anomaly_rho: float = 0.6
    trend: float = 0.004
    corr_length: float = 2.0
    drift: float = 0.0
    land_frac: float = 0.6
    n_covariates: int = 4
    with_sst: bool = True
    target_kind: str = "tmp"
    seed: int = 0

    def resolved_splits(self) -> tuple[int, int]:
        tr = self.train_end if self.train_end is not None else max(1, round(self.months * 2 / 3))
        va = self.val_end if self.val_end is not None else max(tr + 1, round(self.months * 5 / 6))
        return tr, va

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if d.get("member_biases") is not None:
            d["member_biases"] = tuple(d["member_biases"])
        return cls(**d)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int],
                  corr_length: float) -> np.ndarray:
    """Unit-variance random field: white noise blurred by a Gaussian kernel."""
    white = rng.standard_normal(shape)
    if corr_length <= 0:
        return white
    k = _gaussian_kernel(corr_length)
    pad = len(k) // 2
    # reflect-pad separable convolution along both axes
    out = np.pad(white, ((pad, pad), (0, 0)), mode="reflect")
    out = np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, out)
    out = np.pad(out, ((0, 0), (pad, pad)), mode="reflect")
    out = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, out)
    std = out.std()
    if std > 0:
        out = (out - out.mean()) / std
    return out


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset; identical for identical configs."""
    if cfg.months < 3:
        raise DatasetIOError(
            f"months={cfg.months} too short: the generator's two-month "
            "observation lag needs at least 3 months")
    if cfg.n_members < 1:
        raise DatasetIOError("need at least one ensemble member")
    if cfg.n_covariates < 0 or cfg.n_covariates > len(COVARIATE_NAMES) - 1:
        raise DatasetIOError(f"n_covariates must be 0..{len(COVARIATE_NAMES) - 1}")
    train_end, val_end = cfg.resolved_splits()
    if not (0 < train_end < val_end <= cfg.months):
        raise DatasetIOError(
            f"split boundaries ({train_end}, {val_end}) leave an empty partition "
            f"for {cfg.months} months")

    rng = np.random.default_rng(cfg.seed)
    grid = GridSpec(cfg.n_lat, cfg.n_lon)
    shape = grid.shape
    T = cfg.months
    K = cfg.n_members

    # land mask: thresholded smooth field, forced non-empty
    mask_field = _smooth_field(rng, shape, cfg.corr_length)
    if cfg.land_frac >= 1.0:
        is_land = np.ones(shape, dtype=bool)
    else:
        thr = np.quantile(mask_field, 1.0 - cfg.land_frac)
        is_land = mask_field >= thr
        if not is_land.any():
            is_land.flat[0] = True
    mask = LandMask(grid, is_land)

    # truth process
    base = 10.0 + 3.0 * _smooth_field(rng, shape, cfg.corr_length)
    season_amp = cfg.seasonal_amp * (0.6 + 0.4 * _smooth_field(rng, shape, cfg.corr_length))
    season_phase = 0.6 * _smooth_field(rng, shape, cfg.corr_length)
    months_of = (np.arange(T) % 12) + 1  # start_month=1 below

    rho = cfg.anomaly_rho
    anomaly = np.zeros((T,) + shape)
    a = _smooth_field(rng, shape, cfg.corr_length)
    for t in range(T):
        if t > 0:
            a = rho * a + math.sqrt(1.0 - rho * rho) * _smooth_field(rng, shape, cfg.corr_length)
        anomaly[t] = a

    truth = np.zeros((T,) + shape)
    for t in range(T):
        phase = 2.0 * math.pi * (months_of[t] - 1) / 12.0
        truth[t] = (base + season_amp * np.cos(phase + season_phase)
                    + cfg.anomaly_scale * anomaly[t] + cfg.trend * t)

    # ensemble: truth + fixed per-member bias field + member noise (+ drift in test)
    if cfg.member_biases is not None:
        if len(cfg.member_biases) != K:
            raise DatasetIOError(
                f"member_biases has {len(cfg.member_biases)} entries for K={K}")
        amps = np.array(cfg.member_biases, dtype=np.float64)
    elif K == 1:
        amps = np.zeros(1)
    else:
        amps = cfg.member_bias_amp * np.linspace(-1.0, 1.0, K)
    noise_scales = (cfg.member_noise * np.ones(K) if K == 1 else
                    cfg.member_noise * np.geomspace(
                        1.0 / math.sqrt(cfg.member_noise_spread),
                        math.sqrt(cfg.member_noise_spread), K))
    bias_fields = np.zeros((K,) + shape)
    for k in range(K):
        pattern = _smooth_field(rng, shape, cfg.corr_length)
        bias_fields[k] = amps[k] * (1.0 + cfg.member_bias_pattern * pattern)

    ensemble = np.zeros((T, K) + shape)
    for t in range(T):
        for k in range(K):
            noise = noise_scales[k] * _smooth_field(rng, shape, cfg.corr_length)
            ensemble[t, k] = truth[t] + bias_fields[k] + noise
        if t >= val_end:
            ensemble[t] += cfg.drift

    # covariates track the anomaly with their own noise; stored rows are
    # availability-aligned (row t = observation from month t-2)
    first_cov = "tmp2m" if cfg.target_kind == "precip" else "precip"
    cov_names = ([first_cov] + [n for n in COVARIATE_NAMES if n not in (first_cov, "tmp2m", "precip")])
    cov_names = cov_names[:cfg.n_covariates]
    covariates = {}
    cov_missing = {}
    for p, name in enumerate(cov_names):
        weight = 0.9 - 0.15 * p
        raw = np.zeros((T,) + shape)
        for t in range(T):
            raw[t] = (weight * anomaly[t]
                      + 0.5 * _smooth_field(rng, shape, cfg.corr_length))
        shifted = np.empty_like(raw)
        shifted[2:] = raw[:-2]
        shifted[:2] = raw[0]
        covariates[name] = shifted
        # the target-like covariate is observed over land only
        cov_missing[name] = (~is_land if p == 0 else np.zeros(shape, dtype=bool))

    # SST over sea cells, availability-aligned like the covariates
    sst = None
    sst_cells = None
    if cfg.with_sst and mask.n_sea > 0:
        sst_cells = mask.sea_locations()
        sea2d = np.unravel_index(sst_cells, shape)
        sst_base = 8.0 + 2.0 * _smooth_field(rng, shape, cfg.corr_length)
        raw = np.zeros((T, sst_cells.size))
        for t in range(T):
            phase = 2.0 * math.pi * (months_of[t] - 1) / 12.0
            field = (sst_base + 1.5 * math.cos(phase)
                     + 0.8 * anomaly[t]
                     + 0.4 * _smooth_field(rng, shape, cfg.corr_length))
            raw[t] = field[sea2d]
        sst = np.empty_like(raw)
        sst[2:] = raw[:-2]
        sst[:2] = raw[0]

    time = TimeIndex(start_year=1985, start_month=1, n_months=T,
                     train_end=train_end, val_end=val_end)
    units = "mm" if cfg.target_kind == "precip" else "degC"
    return Dataset(
        grid=grid, mask=mask, time=time,
        target=truth, target_missing=~is_land,
        ensemble=ensemble, covariates=covariates, covariate_missing=cov_missing,
        sst=sst, sst_cells=sst_cells,
        target_name="target", target_units=units, target_kind=cfg.target_kind,
        lead_days=14,
    )
