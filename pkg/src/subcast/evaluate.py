"""Verification metrics, significance testing, bootstrap stability, region
analysis, ablations, and heatmap export.

Skill scores are computed per location on detrended series: observed
climatology detrends the truth and learned-model predictions, while the raw
ensemble average is detrended with its own model climatology (its members
may carry bias).  The R-squared denominator centers on the mean of the
detrended truth over the evaluation window, so a perfect prediction scores
exactly 1 and the constant detrended-truth-mean predictor scores exactly 0;
the variant centered on the mean of the detrended predictions is available
behind a flag for comparison.

Reported standard errors treat locations as independent samples.  They are
optimistic: neighboring cells are strongly correlated, so use them with
caution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from math import comb
from pathlib import Path

import numpy as np

from .features import FeatureConfig
from .grid import Dataset, LandMask
from .preprocess import Climatology

SE_CAVEAT = ("standard errors assume independent locations; spatial "
             "correlation makes them optimistic")


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# aggregation

def aggregate_grid(grid: np.ndarray, mask: np.ndarray) -> dict:
    """Mean/SE/median/90th percentile over defined land cells of a metric grid."""
    vals = grid[mask]
    defined = vals[np.isfinite(vals)]
    n = defined.size
    if n == 0:
        raise EvalError("no defined land cells to aggregate")
    out = {
        "mean": float(defined.mean()),
        "median": float(np.median(defined)),
        "p90": float(np.percentile(defined, 90)),
        "n_locations": int(n),
        "n_undefined": int(vals.size - n),
    }
    out["se"] = float(defined.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return out


@dataclass
class EvalReport:
    """One metric over one evaluation window."""

    metric: str
    grid: np.ndarray = field(repr=False)
    aggregates: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metric": self.metric,
                "aggregates": self.aggregates,
                "metadata": self.metadata,
                "caveat": SE_CAVEAT,
                "grid": [[None if not np.isfinite(v) else v for v in row]
                         for row in self.grid]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# regression metrics

def r2_report(truth: np.ndarray, pred: np.ndarray, truth_clim: Climatology,
              pred_clim: Climatology, months: np.ndarray, mask: LandMask,
              denominator: str = "truth", metadata: dict | None = None) -> EvalReport:
    """Per-location skill vs the detrended evaluation-window mean.

    ``denominator="truth"`` centers on the detrended truth mean (default);
    ``"literal"`` centers on the detrended prediction mean.  Locations with
    zero denominator are flagged undefined and excluded from aggregates.
    """
    if denominator not in ("truth", "literal"):
        raise EvalError(f"unknown denominator convention {denominator!r}")
    months = np.asarray(months)
    y_det = truth - truth_clim.values[months - 1]
    p_det = pred - pred_clim.values[months - 1]
    center = (y_det if denominator == "truth" else p_det).mean(axis=0)
    num = ((y_det - p_det) ** 2).sum(axis=0)
    den = ((y_det - center[None]) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 1.0 - num / den
    r2 = np.where(den > 0, r2, np.nan)
    grid = np.where(mask.is_land, r2, np.nan)
    return EvalReport("r2", grid, aggregate_grid(grid, mask.is_land),
                      dict(metadata or {}, denominator=denominator))


def mse_report(truth: np.ndarray, pred: np.ndarray, mask: LandMask,
               metadata: dict | None = None) -> EvalReport:
    err = ((truth - pred) ** 2).mean(axis=0)
    grid = np.where(mask.is_land, err, np.nan)
    return EvalReport("mse", grid, aggregate_grid(grid, mask.is_land),
                      dict(metadata or {}))


def quantile_loss_report(truth: np.ndarray, pred: np.ndarray, alpha: float,
                         mask: LandMask, metadata: dict | None = None) -> EvalReport:
    if not 0.0 < alpha < 1.0:
        raise EvalError(f"quantile level must be in (0, 1), got {alpha}")
    z = truth - pred
    loss = np.where(z >= 0, alpha * z, (alpha - 1.0) * z).mean(axis=0)
    grid = np.where(mask.is_land, loss, np.nan)
    return EvalReport("quantile_loss", grid, aggregate_grid(grid, mask.is_land),
                      dict(metadata or {}, alpha=alpha))


def tercile_accuracy_report(labels: np.ndarray, pred_labels: np.ndarray,
                            mask: LandMask, metadata: dict | None = None) -> EvalReport:
    acc = (labels == pred_labels).mean(axis=0)
    grid = np.where(mask.is_land, acc, np.nan)
    return EvalReport("accuracy", grid, aggregate_grid(grid, mask.is_land),
                      dict(metadata or {}))


# ---------------------------------------------------------------------------
# sign test

def binomial_tail(wins: int, n: int) -> float:
    """P(Bin(n, 1/2) >= wins), computed in exact integer arithmetic."""
    if n < 0 or wins < 0:
        raise EvalError("wins and n must be non-negative")
    if wins > n:
        return 0.0
    if wins == 0:
        return 1.0
    total = sum(comb(n, j) for j in range(wins, n + 1))
    return float(Fraction(total, 2 ** n))


@dataclass
class SignTestResult:
    wins: np.ndarray = field(repr=False)       # per-cell count |errA| < |errB|
    n_effective: np.ndarray = field(repr=False)  # non-tied comparisons
    p_values: np.ndarray = field(repr=False)
    threshold: float = 0.0
    min_p: float = 1.0
    reject: bool = False
    n_degenerate: int = 0

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "min_p": self.min_p,
                "reject": bool(self.reject), "n_degenerate": self.n_degenerate}


def sign_test(err_a: np.ndarray, err_b: np.ndarray, mask: LandMask,
              level: float = 0.05) -> SignTestResult:
    """Per-location one-sided sign test that model A beats model B.

    Inputs are aligned (T, H, W) absolute-error series.  Ties are dropped
    from the effective count.  The global null (no location favors A) is
    rejected when any location's p-value clears the Bonferroni threshold
    ``level / n_land``; locations with no non-tied comparison get p = 1 and
    are counted in ``n_degenerate``.
    """
    if err_a.shape != err_b.shape:
        raise EvalError(f"error series shapes differ: {err_a.shape} vs {err_b.shape}")
    h, w = mask.grid.shape
    wins = np.zeros((h, w), dtype=np.int64)
    n_eff = np.zeros((h, w), dtype=np.int64)
    p = np.ones((h, w))
    degenerate = 0
    for i in range(h):
        for j in range(w):
            if not mask.is_land[i, j]:
                p[i, j] = np.nan
                continue
            a = err_a[:, i, j]
            b = err_b[:, i, j]
            tied = a == b
            wins[i, j] = int((a < b).sum())
            n_eff[i, j] = int((~tied).sum())
            if n_eff[i, j] == 0:
                degenerate += 1
                p[i, j] = 1.0
            else:
                p[i, j] = binomial_tail(int(wins[i, j]), int(n_eff[i, j]))
    threshold = level / mask.n_land
    finite = p[np.isfinite(p)]
    min_p = float(finite.min())
    return SignTestResult(wins=wins, n_effective=n_eff, p_values=p,
                          threshold=threshold, min_p=min_p,
                          reject=bool(min_p < threshold), n_degenerate=degenerate)


# ---------------------------------------------------------------------------
# region analysis

def region_metrics(report: EvalReport, region_mask: np.ndarray,
                   mask: LandMask) -> dict:
    region_mask = np.asarray(region_mask, dtype=bool)
    if region_mask.shape != mask.grid.shape:
        raise EvalError("region mask shape does not match the grid")
    if not region_mask.any():
        raise EvalError("region mask is empty")
    if (region_mask & ~mask.is_land).any():
        raise EvalError("region mask includes sea cells")
    return aggregate_grid(report.grid, region_mask)


# ---------------------------------------------------------------------------
# heatmap export

def export_heatmap(grid: np.ndarray, path: str | Path, mask: LandMask,
                   image: bool = False) -> None:
    """Whitespace-delimited text grid with NA off-mask; optional PGM render.

    The grayscale image maps the defined minimum to 0 and maximum to 255
    (undefined cells render as 0).
    """
    grid = np.asarray(grid, dtype=np.float64)
    path = Path(path)
    lines = []
    for i in range(grid.shape[0]):
        row = []
        for j in range(grid.shape[1]):
            if mask.is_land[i, j] and np.isfinite(grid[i, j]):
                row.append(f"{grid[i, j]:.17g}")
            else:
                row.append("NA")
        lines.append(" ".join(row))
    path.write_text("\n".join(lines) + "\n")

    if image:
        vals = grid[mask.is_land & np.isfinite(grid)]
        lo = vals.min() if vals.size else 0.0
        hi = vals.max() if vals.size else 1.0
        span = hi - lo if hi > lo else 1.0
        pix = np.zeros(grid.shape, dtype=np.int64)
        defined = mask.is_land & np.isfinite(grid)
        pix[defined] = np.round(255 * (grid[defined] - lo) / span).astype(np.int64)
        body = "\n".join(" ".join(str(v) for v in row) for row in pix)
        hdr = f"P2\n{grid.shape[1]} {grid.shape[0]}\n255\n"
        path.with_suffix(".pgm").write_text(hdr + body + "\n")


def read_heatmap(path: str | Path, shape: tuple[int, int]) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if len(lines) != shape[0]:
        raise EvalError(f"heatmap has {len(lines)} rows, expected {shape[0]}")
    out = np.full(shape, np.nan)
    for i, line in enumerate(lines):
        toks = line.split()
        if len(toks) != shape[1]:
            raise EvalError(f"heatmap row {i} has {len(toks)} values")
        for j, tok in enumerate(toks):
            if tok != "NA":
                out[i, j] = float(tok)
    return out


# ---------------------------------------------------------------------------
# ablation harness

ABLATION_VARIANTS = ("full-ensemble", "ensemble-mean-only", "sorted-ensemble",
                     "pe", "latlon", "no-location")

_ENSEMBLE_VARIANTS = {"full-ensemble": "full", "ensemble-mean-only": "mean",
                      "sorted-ensemble": "sorted"}
_LOCATION_VARIANTS = {"pe": "pe", "latlon": "latlon", "no-location": "none"}


def ablation_feature_config(base: FeatureConfig, variant: str,
                            paradigm: str) -> FeatureConfig:
    """Swap exactly the variant's feature block; everything else unchanged."""
    if variant in _ENSEMBLE_VARIANTS:
        return replace(base, ensemble_mode=_ENSEMBLE_VARIANTS[variant])
    if variant in _LOCATION_VARIANTS:
        if paradigm == "independent":
            raise EvalError(
                f"location variant {variant!r} is incompatible with the "
                "independent paradigm (location features are constants there)")
        return replace(base, location_mode=_LOCATION_VARIANTS[variant])
    raise EvalError(f"unknown ablation variant {variant!r} "
                    f"(expected one of {ABLATION_VARIANTS})")


def evaluate_regression_maps(ds: Dataset, pred: np.ndarray, t_steps: np.ndarray,
                             truth_clim: Climatology, pred_clim: Climatology,
                             metadata: dict | None = None) -> dict[str, EvalReport]:
    months = ds.time.months()[t_steps]
    truth = ds.target[t_steps]
    return {
        "r2": r2_report(truth, pred, truth_clim, pred_clim, months, ds.mask,
                        metadata=metadata),
        "mse": mse_report(truth, pred, ds.mask, metadata=metadata),
    }


def ablation_run(variant: str, trainer_factory, ds: Dataset, base_cfg: FeatureConfig,
                 paradigm: str, truth_clim: Climatology, eval_lo: int, eval_hi: int,
                 fit_lo: int = 0, fit_hi: int | None = None) -> dict[str, EvalReport]:
    """Retrain under one feature variant and score the evaluation window."""
    from .pipeline import first_valid  # local import avoids a cycle

    cfg = ablation_feature_config(base_cfg, variant, paradigm)
    trainer = trainer_factory(cfg)
    fit_hi = ds.time.train_end if fit_hi is None else fit_hi
    fitted = trainer.fit(ds, fit_lo, fit_hi)
    t_steps = np.arange(max(eval_lo, first_valid(cfg)), eval_hi)
    pred = trainer.predict_maps(fitted, ds, t_steps)
    meta = {"variant": variant, "model": trainer.name,
            "catalog_hash": getattr(fitted, "catalog_hash", None)}
    return evaluate_regression_maps(ds, pred, t_steps, truth_clim, truth_clim,
                                    metadata=meta)


def grouped_feature_importance(trainer_factory, ds: Dataset, base_cfg: FeatureConfig,
                               truth_clim: Climatology, eval_lo: int, eval_hi: int
                               ) -> list[dict]:
    """Retrain on cumulative feature groups; score each on the given window.

    Groups accumulate in the order: ensemble members (with location features
    where the paradigm uses them), + lags, + covariates, + SSTs.
    """
    from .pipeline import first_valid

    stages = [
        ("ensemble", replace(base_cfg, include_lags=False, include_covariates=False,
                             include_ssts=False)),
        ("+lags", replace(base_cfg, include_covariates=False, include_ssts=False)),
        ("+covariates", replace(base_cfg, include_ssts=False)),
        ("+ssts", base_cfg),
    ]
    out = []
    for label, cfg in stages:
        if cfg.include_ssts and ds.sst is None:
            continue
        trainer = trainer_factory(cfg)
        fitted = trainer.fit(ds, 0, ds.time.train_end)
        t_steps = np.arange(max(eval_lo, first_valid(cfg)), eval_hi)
        pred = trainer.predict_maps(fitted, ds, t_steps)
        meta = {"group": label, "model": trainer.name,
                "catalog_hash": getattr(fitted, "catalog_hash", None)}
        reports = evaluate_regression_maps(ds, pred, t_steps, truth_clim, truth_clim,
                                           metadata=meta)
        out.append({"group": label, "reports": reports})
    return out


# ---------------------------------------------------------------------------
# bootstrap stability

def bootstrap_experiment(trainers: dict[str, object], ds: Dataset,
                         n_boot: int = 50, sample_size: int = 200,
                         seed: int = 0) -> dict[str, list]:
    """Retrain every model on resampled training steps; report test MSEs.

    Each run draws ``sample_size`` training time steps with replacement
    (spatial trainers see the corresponding maps; tabular trainers see all
    land rows of those steps), retrains, and scores mean MSE over land on
    the test window.  Failed runs are recorded and skipped.
    """
    from .pipeline import first_valid

    results: dict[str, list] = {name: [] for name in trainers}
    t = ds.time
    for run in range(n_boot):
        rng = np.random.default_rng(seed + run)
        for name, trainer in trainers.items():
            fv = first_valid(getattr(trainer, "cfg", FeatureConfig()))
            lo = min(fv, t.train_end - 1)
            steps = np.sort(rng.integers(lo, t.train_end, size=sample_size))
            try:
                fitted = trainer.fit_steps(ds, steps)
                eval_steps = np.arange(max(t.val_end, fv), t.n_months)
                pred = trainer.predict_maps(fitted, ds, eval_steps)
                rep = mse_report(ds.target[eval_steps], pred, ds.mask)
                results[name].append(rep.aggregates["mean"])
            except Exception as exc:  # noqa: BLE001 - runs are independent
                results[name].append({"failed": str(exc), "run": run})
    return results
