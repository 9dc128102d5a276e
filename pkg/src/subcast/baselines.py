"""Non-learned reference predictors: historical and ensemble statistics.

All baselines emit (T, H, W) prediction maps with NaN wherever the target
is undefined, so they plug into the same verification path as the learned
models.
"""

from __future__ import annotations

import warnings

import numpy as np

from .grid import Dataset
from .preprocess import Climatology, monthly_climatology


def predict_historical(clim: Climatology, months: np.ndarray) -> np.ndarray:
    """Month-matched climatology: the same map for every January, etc."""
    months = np.asarray(months)
    return clim.values[months - 1]


def predict_ensemble_mean(ensemble: np.ndarray) -> np.ndarray:
    """Plain member mean; (T, K, H, W) -> (T, H, W)."""
    return np.asarray(ensemble, dtype=np.float64).mean(axis=1)


def predict_ensemble_q90(ensemble: np.ndarray, alpha: float = 0.9) -> np.ndarray:
    """Per-cell R-7 percentile of the K members; (T, K, H, W) -> (T, H, W)."""
    return np.percentile(np.asarray(ensemble, dtype=np.float64),
                         100.0 * alpha, axis=1)


def historical_quantile_table(series: np.ndarray, months: np.ndarray,
                              alpha: float = 0.9) -> np.ndarray:
    """(12, H, W) per-month R-7 percentile of a reference series."""
    series = np.asarray(series, dtype=np.float64)
    months = np.asarray(months)
    out = np.empty((12,) + series.shape[1:])
    for m in range(1, 13):
        rows = series[months == m]
        if rows.shape[0] == 0:
            raise ValueError(f"reference period has no samples for month {m}")
        out[m - 1] = np.percentile(rows, 100.0 * alpha, axis=0)
    return out


def predict_historical_q90(quantile_table: np.ndarray, months: np.ndarray) -> np.ndarray:
    months = np.asarray(months)
    return np.asarray(quantile_table)[months - 1]


def oracle_debias(predictions: np.ndarray, truth: np.ndarray,
                  months: np.ndarray) -> np.ndarray:
    """Subtract the per-(month, cell) mean error estimated on the same data.

    This is an oracle diagnostic, not a deployable method: the bias is
    estimated from the evaluation-period truth itself.  Calendar months
    absent from the period pass through unchanged with a warning.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    months = np.asarray(months)
    out = predictions.copy()
    present = set(int(m) for m in months)
    absent = sorted(set(range(1, 13)) - present)
    if absent:
        warnings.warn(f"oracle debias: months {absent} absent from the "
                      "evaluation period; passing them through unchanged")
    for m in present:
        sel = months == m
        bias = (predictions[sel] - truth[sel]).mean(axis=0)
        out[sel] = predictions[sel] - bias
    return out


def ensemble_mean_climatology(ds: Dataset) -> Climatology:
    """Model climatology of the ensemble-average predictor on the train split.

    Used to detrend the raw ensemble average before skill scoring, since
    the members may carry systematic bias that observed climatology does
    not capture.
    """
    tr_end = ds.time.train_end
    preds = predict_ensemble_mean(ds.ensemble[:tr_end])
    return monthly_climatology(preds, ds.time.months()[:tr_end], ds.grid,
                               source="model")
