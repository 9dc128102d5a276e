"""Uniform trainer wrappers gluing feature assembly to the model families.

Every trainer exposes ``fit(ds, t_lo, t_hi) -> fitted`` and
``fit_steps(ds, steps) -> fitted`` (explicit training steps, repeats
allowed, for bootstrap runs), plus ``predict_maps(fitted, ds, t_steps) ->
(n_t, H, W)`` with NaN off land; tercile-capable trainers add
``predict_proba_maps``.  Preprocessing state (PCA, normalization) is always
fitted inside the given training window and carried in the fitted object,
so no statistic leaks from later months.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .baselines import (
    historical_quantile_table,
    predict_ensemble_mean,
    predict_ensemble_q90,
    predict_historical,
    predict_historical_q90,
)
from .features import FeatureConfig, assemble_spatial, assemble_tabular
from .grid import Dataset, land_locations
from .models import convnet as cn
from .models import forest as rf
from .models import linear as lin
from .models.stack import StackedModel, stack_train
from .preprocess import (
    Climatology,
    NormalizationState,
    PcaModel,
    first_valid_step,
    monthly_climatology,
    pca_fit,
    target_normalization_mode,
    tercile_label,
    tercile_thresholds,
)


class PipelineError(RuntimeError):
    pass


def _land_ij(ds: Dataset):
    land = land_locations(ds.mask)
    return land, np.unravel_index(land, ds.grid.shape)


def first_valid(cfg: FeatureConfig) -> int:
    return first_valid_step(cfg.lags) if cfg.include_lags else 0


def tercile_label_maps(ds: Dataset):
    """(thresholds, labels) with thresholds fitted on the training window."""
    months = ds.time.months()
    thr = tercile_thresholds(ds.target[:ds.time.train_end],
                             months[:ds.time.train_end], ds.grid)
    labels = tercile_label(ds.target, thr, months)
    return thr, labels


def observed_climatology(ds: Dataset) -> Climatology:
    months = ds.time.months()
    return monthly_climatology(ds.target[:ds.time.train_end],
                               months[:ds.time.train_end], ds.grid)


# ---------------------------------------------------------------------------
# baselines behind the trainer interface

@dataclass
class HistoricalTrainer:
    name: str = "hist"
    cfg: FeatureConfig = field(default_factory=lambda: FeatureConfig(
        include_lags=False, include_covariates=False, include_ssts=False,
        location_mode="none"))

    def fit(self, ds: Dataset, t_lo: int, t_hi: int) -> Climatology:
        months = ds.time.months()
        return monthly_climatology(ds.target[t_lo:t_hi], months[t_lo:t_hi], ds.grid)

    def fit_steps(self, ds: Dataset, steps: np.ndarray) -> Climatology:
        months = ds.time.months()
        return monthly_climatology(ds.target[steps], months[steps], ds.grid)

    def predict_maps(self, fitted: Climatology, ds: Dataset, t_steps: np.ndarray) -> np.ndarray:
        return predict_historical(fitted, ds.time.months()[t_steps])


@dataclass
class EnsembleMeanTrainer:
    name: str = "ensmean"
    cfg: FeatureConfig = field(default_factory=lambda: FeatureConfig(
        include_lags=False, include_covariates=False, include_ssts=False,
        location_mode="none"))

    def fit(self, ds: Dataset, t_lo: int, t_hi: int) -> None:
        return None

    def fit_steps(self, ds: Dataset, steps: np.ndarray) -> None:
        return None

    def predict_maps(self, fitted, ds: Dataset, t_steps: np.ndarray) -> np.ndarray:
        maps = predict_ensemble_mean(ds.ensemble[t_steps])
        return np.where(ds.mask.is_land[None], maps, np.nan)


@dataclass
class HistoricalQuantileTrainer:
    alpha: float = 0.9
    name: str = "hist-q90"
    cfg: FeatureConfig = field(default_factory=lambda: FeatureConfig(
        include_lags=False, include_covariates=False, include_ssts=False,
        location_mode="none"))

    def fit(self, ds: Dataset, t_lo: int, t_hi: int) -> np.ndarray:
        months = ds.time.months()
        return historical_quantile_table(ds.target[t_lo:t_hi], months[t_lo:t_hi],
                                         self.alpha)

    def predict_maps(self, fitted, ds: Dataset, t_steps: np.ndarray) -> np.ndarray:
        return predict_historical_q90(fitted, ds.time.months()[t_steps])


@dataclass
class EnsembleQuantileTrainer:
    alpha: float = 0.9
    name: str = "ens-q90"
    cfg: FeatureConfig = field(default_factory=lambda: FeatureConfig(
        include_lags=False, include_covariates=False, include_ssts=False,
        location_mode="none"))

    def fit(self, ds: Dataset, t_lo: int, t_hi: int) -> None:
        return None

    def predict_maps(self, fitted, ds: Dataset, t_steps: np.ndarray) -> np.ndarray:
        maps = predict_ensemble_q90(ds.ensemble[t_steps], self.alpha)
        return np.where(ds.mask.is_land[None], maps, np.nan)


# ---------------------------------------------------------------------------
# learned families

@dataclass
class _FittedTabular:
    models: dict[int, Any]
    pca: PcaModel | None
    catalog_hash: str
    failures: dict[int, str] = field(default_factory=dict)


def _window_pca(ds: Dataset, cfg: FeatureConfig, t_lo: int, t_hi: int) -> PcaModel | None:
    if not cfg.include_ssts:
        return None
    if ds.sst is None:
        raise PipelineError("feature config asks for SSTs but the dataset has none")
    return pca_fit(ds.sst[t_lo:t_hi], cfg.n_sst_components)


def _steps_pca(ds: Dataset, cfg: FeatureConfig, steps: np.ndarray) -> PcaModel | None:
    if not cfg.include_ssts:
        return None
    if ds.sst is None:
        raise PipelineError("feature config asks for SSTs but the dataset has none")
    return pca_fit(ds.sst[steps], cfg.n_sst_components)


@dataclass
class LinearTrainer:
    """Per-location linear models (spatial-independence paradigm)."""

    task: str = "regression"            # regression | quantile | tercile
    cfg: FeatureConfig = field(default_factory=lambda: FeatureConfig(location_mode="none"))
    alpha: float | None = None
    ridge: float = 0.0
    name: str = "lr"

    def _fit_on(self, ds: Dataset, feats, positions: np.ndarray,
                pca: PcaModel | None) -> _FittedTabular:
        if positions.size == 0:
            raise PipelineError("training window has no steps past the lag horizon")
        labels = None
        if self.task == "tercile":
            _, label_maps = tercile_label_maps(ds)
            _, (li, lj) = _land_ij(ds)
            labels = label_maps[feats.t_steps[positions]][:, li, lj]
        fit = lin.per_location_fit(feats, self.task, positions,
                                   alpha=self.alpha, ridge=self.ridge, labels=labels)
        return _FittedTabular(models=fit.models, pca=pca,
                              catalog_hash=feats.catalog.sha256(),
                              failures=fit.failures)

    def fit(self, ds: Dataset, t_lo: int, t_hi: int) -> _FittedTabular:
        pca = _window_pca(ds, self.cfg, t_lo, t_hi)
        feats = assemble_tabular(ds, "independent", self.cfg, pca)
        return self._fit_on(ds, feats, feats.positions_in(t_lo, t_hi), pca)

    def fit_steps(self, ds: Dataset, steps: np.ndarray) -> _FittedTabular:
        pca = _steps_pca(ds, self.cfg, steps)
        feats = assemble_tabular(ds, "independent", self.cfg, pca)
        return self._fit_on(ds, feats, feats.positions_of(steps), pca)

    def _rows(self, fitted: _FittedTabular, ds: Dataset, t_steps: np.ndarray):
        feats = assemble_tabular(ds, "independent", self.cfg, fitted.pca)
        return feats, feats.positions_of(t_steps)

    def predict_maps(self, fitted: _FittedTabular, ds: Dataset,
                     t_steps: np.ndarray) -> np.ndarray:
        feats, pos = self._rows(fitted, ds, t_steps)
        land, (li, lj) = _land_ij(ds)
        out = np.full((t_steps.size,) + ds.grid.shape, np.nan)
        for idx in range(land.size):
            model = fitted.models.get(idx)
            if model is None:
                continue
            out[:, li[idx], lj[idx]] = model.predict(feats.X[pos, idx, :])
        return out

    def predict_proba_maps(self, fitted: _FittedTabular, ds: Dataset,
                           t_steps: np.ndarray) -> np.ndarray:
        feats, pos = self._rows(fitted, ds, t_steps)
        land, (li, lj) = _land_ij(ds)
        out = np.full((t_steps.size, 3) + ds.grid.shape, np.nan)
        for idx in range(land.size):
            model = fitted.models.get(idx)
            if model is None:
                continue
            out[:, :, li[idx], lj[idx]] = model.predict_proba(feats.X[pos, idx, :])
        return out

    def predict_label_maps(self, fitted: _FittedTabular, ds: Dataset,
                           t_steps: np.ndarray) -> np.ndarray:
        proba = self.predict_proba_maps(fitted, ds, t_steps)
        labels = np.asarray((-1, 0, 1))[np.nanargmax(
            np.where(np.isnan(proba), -np.inf, proba), axis=1)]
        return np.where(ds.mask.is_land[None], labels, 0)


@dataclass
class _FittedForest:
    forest: rf.Forest
    pca: PcaModel | None
    catalog_hash: str


@dataclass
class ForestTrainer:
    """One pooled forest over all locations (conditional paradigm)."""

    task: str = "regression"            # regression | tercile
    cfg: FeatureConfig = field(default_factory=FeatureConfig)
    params: rf.ForestParams = field(default_factory=rf.ForestParams)
    name: str = "rf"

    def _fit_on(self, ds: Dataset, feats, positions: np.ndarray,
                pca: PcaModel | None) -> _FittedForest:
        if positions.size == 0:
            raise PipelineError("training window has no steps past the lag horizon")
        X, y = feats.pooled_rows(positions)
        if self.task == "tercile":
            _, label_maps = tercile_label_maps(ds)
            _, (li, lj) = _land_ij(ds)
            y = label_maps[feats.t_steps[positions]][:, li, lj].reshape(-1)
            forest = rf.rf_fit(X, y, params=self.params, task="classification",
                               catalog_hash=feats.catalog.sha256())
        else:
            forest = rf.rf_fit(X, y, params=self.params, task="regression",
                               catalog_hash=feats.catalog.sha256())
        return _FittedForest(forest=forest, pca=pca,
                             catalog_hash=feats.catalog.sha256())

    def fit(self, ds: Dataset, t_lo: int, t_hi: int) -> _FittedForest:
        pca = _window_pca(ds, self.cfg, t_lo, t_hi)
        feats = assemble_tabular(ds, "conditional", self.cfg, pca)
        return self._fit_on(ds, feats, feats.positions_in(t_lo, t_hi), pca)

    def fit_steps(self, ds: Dataset, steps: np.ndarray) -> _FittedForest:
        pca = _steps_pca(ds, self.cfg, steps)
        feats = assemble_tabular(ds, "conditional", self.cfg, pca)
        return self._fit_on(ds, feats, feats.positions_of(steps), pca)

    def _rows(self, fitted: _FittedForest, ds: Dataset, t_steps: np.ndarray):
        feats = assemble_tabular(ds, "conditional", self.cfg, fitted.pca)
        return feats, feats.positions_of(t_steps)

    def predict_maps(self, fitted: _FittedForest, ds: Dataset,
                     t_steps: np.ndarray) -> np.ndarray:
        feats, pos = self._rows(fitted, ds, t_steps)
        land, (li, lj) = _land_ij(ds)
        X = feats.X[pos].reshape(-1, feats.X.shape[2])
        pred = rf.rf_predict(fitted.forest, X).reshape(t_steps.size, land.size)
        out = np.full((t_steps.size,) + ds.grid.shape, np.nan)
        out[:, li, lj] = pred
        return out

    def predict_proba_maps(self, fitted: _FittedForest, ds: Dataset,
                           t_steps: np.ndarray) -> np.ndarray:
        feats, pos = self._rows(fitted, ds, t_steps)
        land, (li, lj) = _land_ij(ds)
        X = feats.X[pos].reshape(-1, feats.X.shape[2])
        proba = rf.rf_predict_proba(fitted.forest, X).reshape(t_steps.size, land.size, 3)
        out = np.full((t_steps.size, 3) + ds.grid.shape, np.nan)
        out[:, :, li, lj] = proba.transpose(0, 2, 1)
        return out

    def predict_label_maps(self, fitted: _FittedForest, ds: Dataset,
                           t_steps: np.ndarray) -> np.ndarray:
        feats, pos = self._rows(fitted, ds, t_steps)
        land, (li, lj) = _land_ij(ds)
        X = feats.X[pos].reshape(-1, feats.X.shape[2])
        labels = rf.rf_predict(fitted.forest, X).reshape(t_steps.size, land.size)
        out = np.zeros((t_steps.size,) + ds.grid.shape, dtype=np.int64)
        out[:, li, lj] = labels.astype(np.int64)
        return out


@dataclass
class _FittedQrf:
    forests: dict[int, rf.Forest]
    pca: PcaModel | None
    catalog_hash: str
    failures: dict[int, str] = field(default_factory=dict)


@dataclass
class QrfTrainer:
    """Per-location quantile regression forests."""

    alpha: float = 0.9
    cfg: FeatureConfig = field(default_factory=lambda: FeatureConfig(location_mode="none"))
    params: rf.ForestParams = field(default_factory=rf.ForestParams)
    name: str = "qrf"

    def fit(self, ds: Dataset, t_lo: int, t_hi: int) -> _FittedQrf:
        pca = _window_pca(ds, self.cfg, t_lo, t_hi)
        feats = assemble_tabular(ds, "independent", self.cfg, pca)
        pos = feats.positions_in(t_lo, t_hi)
        if pos.size == 0:
            raise PipelineError("training window has no steps past the lag horizon")
        forests, failures = rf.per_location_qrf_fit(feats, pos, self.params)
        return _FittedQrf(forests=forests, pca=pca,
                          catalog_hash=feats.catalog.sha256(), failures=failures)

    def fit_steps(self, ds: Dataset, steps: np.ndarray) -> _FittedQrf:
        pca = _steps_pca(ds, self.cfg, steps)
        feats = assemble_tabular(ds, "independent", self.cfg, pca)
        forests, failures = rf.per_location_qrf_fit(feats, feats.positions_of(steps),
                                                    self.params)
        return _FittedQrf(forests=forests, pca=pca,
                          catalog_hash=feats.catalog.sha256(), failures=failures)

    def predict_maps(self, fitted: _FittedQrf, ds: Dataset, t_steps: np.ndarray,
                     alpha: float | None = None) -> np.ndarray:
        alpha = self.alpha if alpha is None else alpha
        feats = assemble_tabular(ds, "independent", self.cfg, fitted.pca)
        pos = feats.positions_of(t_steps)
        land, (li, lj) = _land_ij(ds)
        out = np.full((t_steps.size,) + ds.grid.shape, np.nan)
        for idx in range(land.size):
            forest = fitted.forests.get(idx)
            if forest is None:
                continue
            out[:, li[idx], lj[idx]] = rf.qrf_predict(forest, feats.X[pos, idx, :], alpha)
        return out


@dataclass
class _FittedConvnet:
    model: cn.UNet
    pca: PcaModel | None
    channel_norm: NormalizationState
    target_norm: NormalizationState
    catalog_hash: str
    log: cn.TrainLog | None = None


def _normalize_stacks(stacks: np.ndarray, norm: NormalizationState) -> np.ndarray:
    n, c, h, w = stacks.shape
    flat = stacks.transpose(0, 2, 3, 1).reshape(-1, c)
    return norm.apply(flat).reshape(n, h, w, c).transpose(0, 3, 1, 2)


@dataclass
class ConvnetTrainer:
    """Full-map encoder-decoder (spatial-dependence paradigm)."""

    task: str = "regression"            # regression | quantile
    cfg: FeatureConfig = field(default_factory=FeatureConfig)
    alpha: float | None = None
    base: int = 16
    depth: int = 2
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0
    name: str = "convnet"

    def _fit_on(self, ds: Dataset, spatial, sel: np.ndarray,
                pca: PcaModel | None) -> _FittedConvnet:
        if sel.size == 0:
            raise PipelineError("training window has no steps past the lag horizon")
        train_stacks = spatial.stacks[sel]
        c = train_stacks.shape[1]
        channel_norm = NormalizationState.fit(
            train_stacks.transpose(0, 2, 3, 1).reshape(-1, c), "minmax")
        mode = target_normalization_mode(ds.target_kind)
        _, (li, lj) = _land_ij(ds)
        train_targets = spatial.target_maps[sel]
        target_norm = NormalizationState.fit(
            train_targets[:, li, lj].reshape(-1, 1), mode)

        stacks_n = _normalize_stacks(train_stacks, channel_norm)
        targets_n = target_norm.apply(
            train_targets.reshape(-1, 1)).reshape(sel.size, *ds.grid.shape)

        activation = "sigmoid" if mode == "minmax" else "identity"
        model = cn.UNet(c, base=self.base, depth=self.depth,
                        out_activation=activation, seed=self.seed)
        log = cn.train_regression(model, stacks_n, targets_n, ds.mask.is_land,
                                  epochs=self.epochs, batch_size=self.batch_size,
                                  lr=self.lr, weight_decay=self.weight_decay,
                                  seed=self.seed)
        if self.task == "quantile":
            model = cn.quantile_init(model, seed=self.seed + 1)
            log = cn.train_quantile(model, self.alpha, stacks_n, targets_n,
                                    ds.mask.is_land, epochs=self.epochs,
                                    batch_size=self.batch_size, lr=self.lr,
                                    weight_decay=self.weight_decay, seed=self.seed)
        return _FittedConvnet(model=model, pca=pca, channel_norm=channel_norm,
                              target_norm=target_norm,
                              catalog_hash=spatial.catalog.sha256(), log=log)

    def fit(self, ds: Dataset, t_lo: int, t_hi: int) -> _FittedConvnet:
        pca = _window_pca(ds, self.cfg, t_lo, t_hi)
        spatial = assemble_spatial(ds, self.cfg, pca)
        sel = spatial.steps_in(t_lo, t_hi)
        return self._fit_on(ds, spatial, sel, pca)

    def fit_steps(self, ds: Dataset, steps: np.ndarray) -> _FittedConvnet:
        pca = _steps_pca(ds, self.cfg, steps)
        spatial = assemble_spatial(ds, self.cfg, pca)
        pos = np.searchsorted(spatial.t_steps, steps)
        valid = (pos < spatial.t_steps.size)
        if not valid.all() or not np.array_equal(spatial.t_steps[pos], np.asarray(steps)):
            raise PipelineError("bootstrap steps lack feature support (lag horizon)")
        return self._fit_on(ds, spatial, pos, pca)

    def predict_maps(self, fitted: _FittedConvnet, ds: Dataset,
                     t_steps: np.ndarray) -> np.ndarray:
        spatial = assemble_spatial(ds, self.cfg, fitted.pca)
        pos = np.searchsorted(spatial.t_steps, t_steps)
        if (pos >= spatial.t_steps.size).any() or not np.array_equal(
                spatial.t_steps[pos], np.asarray(t_steps)):
            raise PipelineError("requested steps lack feature support (lag horizon)")
        stacks_n = _normalize_stacks(spatial.stacks[pos], fitted.channel_norm)
        return cn.predict_map(fitted.model, stacks_n, fitted.target_norm,
                              ds.mask.is_land)


# ---------------------------------------------------------------------------
# factory

def build_trainer(model: str, task: str, cfg: FeatureConfig,
                  alpha: float | None = None, seed: int = 0,
                  forest_params: rf.ForestParams | None = None,
                  convnet_kwargs: dict | None = None):
    """Map a model family name to a configured trainer."""
    fp = forest_params or rf.ForestParams(seed=seed)
    ck = convnet_kwargs or {}
    if model == "hist":
        return HistoricalTrainer()
    if model == "ensmean":
        return EnsembleMeanTrainer()
    if model == "hist-q90":
        return HistoricalQuantileTrainer(alpha=alpha or 0.9)
    if model == "ens-q90":
        return EnsembleQuantileTrainer(alpha=alpha or 0.9)
    if model == "lr":
        return LinearTrainer(task="regression", cfg=cfg, name="lr")
    if model == "linqr":
        if alpha is None:
            raise PipelineError("linqr needs a quantile level")
        return LinearTrainer(task="quantile", cfg=cfg, alpha=alpha, name="linqr")
    if model == "logistic":
        return LinearTrainer(task="tercile", cfg=cfg.ensemble_only(), name="logistic")
    if model == "rf":
        return ForestTrainer(task="tercile" if task == "tercile" else "regression",
                             cfg=cfg, params=fp, name="rf")
    if model == "qrf":
        if alpha is None:
            raise PipelineError("qrf needs a quantile level")
        return QrfTrainer(alpha=alpha, cfg=cfg, params=fp, name="qrf")
    if model == "convnet":
        if task == "tercile":
            raise PipelineError("the convnet supports regression and quantile tasks")
        return ConvnetTrainer(task=task, cfg=cfg, alpha=alpha, seed=seed, **ck)
    raise PipelineError(f"unknown model family {model!r}")


def default_stack_bases(task: str, cfg: FeatureConfig, alpha: float | None,
                        seed: int = 0, forest_params: rf.ForestParams | None = None,
                        convnet_kwargs: dict | None = None) -> list:
    """The stacking lineup for each task."""
    indep_cfg = FeatureConfig(**{**cfg.to_dict(), "location_mode": "none"})
    if task == "regression":
        return [build_trainer("lr", task, indep_cfg, seed=seed),
                build_trainer("rf", task, cfg, seed=seed, forest_params=forest_params),
                build_trainer("convnet", task, cfg, seed=seed,
                              convnet_kwargs=convnet_kwargs)]
    if task == "quantile":
        return [build_trainer("linqr", task, indep_cfg, alpha=alpha, seed=seed),
                build_trainer("qrf", task, indep_cfg, alpha=alpha, seed=seed,
                              forest_params=forest_params),
                build_trainer("convnet", task, cfg, alpha=alpha, seed=seed,
                              convnet_kwargs=convnet_kwargs)]
    if task == "tercile":
        return [build_trainer("logistic", task, indep_cfg, seed=seed),
                build_trainer("rf", task, cfg, seed=seed, forest_params=forest_params)]
    raise PipelineError(f"unknown task {task!r}")


def train_stacked(ds: Dataset, task: str, cfg: FeatureConfig,
                  alpha: float | None = None, seed: int = 0,
                  forest_params: rf.ForestParams | None = None,
                  convnet_kwargs: dict | None = None, hidden: int = 100) -> StackedModel:
    bases = default_stack_bases(task, cfg, alpha, seed, forest_params, convnet_kwargs)
    labels = None
    if task == "tercile":
        _, labels = tercile_label_maps(ds)
    return stack_train(bases, ds, task=task, alpha=alpha, hidden=hidden, seed=seed,
                       first_valid=first_valid(cfg), labels=labels)
