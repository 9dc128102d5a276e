"""Half-split model stacking: a one-hidden-layer network over base-model
outputs.

Protocol: split the training window chronologically in half, train the
bases on the first half, collect their predictions on the second half, fit
the stacker on those predictions against truth, then retrain every base on
the full training window.  At inference the stacker consumes the
retrained bases' outputs.  No sample is used both to train a base and to
fit the stacker inside the first four stages.

Base trainers are duck-typed: ``name``, ``fit(ds, t_lo, t_hi) -> fitted``,
``predict_maps(fitted, ds, t_steps) -> (n_t, H, W)`` (regression/quantile)
or ``predict_proba_maps(fitted, ds, t_steps) -> (n_t, 3, H, W)`` (tercile).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..grid import Dataset, land_locations
from ..preprocess import NormalizationState
from .nn import AdamState, adam_step, sigmoid


class StackingError(RuntimeError):
    pass


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Stacker:
    """Sigmoid-hidden-layer combiner; scalar output or 3-way softmax."""

    W1: np.ndarray = field(repr=False)
    b1: np.ndarray = field(repr=False)
    W2: np.ndarray = field(repr=False)
    b2: np.ndarray = field(repr=False)
    task: str = "regression"
    alpha: float | None = None
    in_norm: NormalizationState | None = None
    out_norm: NormalizationState | None = None

    @property
    def n_inputs(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def _raw_forward(self, Xn: np.ndarray) -> np.ndarray:
        h = sigmoid(Xn @ self.W1 + self.b1)
        return h @ self.W2 + self.b2

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Denormalized predictions for regression/quantile tasks."""
        if self.task == "tercile":
            raise StackingError("use predict_proba for tercile stackers")
        Xn = self.in_norm.apply(np.asarray(X, dtype=np.float64))
        out = self._raw_forward(Xn)[:, 0]
        return self.out_norm.invert(out.reshape(-1, 1)).reshape(-1)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if self.task != "tercile":
            raise StackingError("predict_proba is only defined for tercile stackers")
        Xn = self.in_norm.apply(np.asarray(X, dtype=np.float64))
        return _softmax(self._raw_forward(Xn))

    def loss_and_gradients(self, Xn: np.ndarray, target: np.ndarray
                           ) -> tuple[float, list[np.ndarray]]:
        """Loss and exact gradients wrt (W1, b1, W2, b2) on normalized data.

        ``target`` is a normalized column for regression/quantile or a
        one-hot (n, 3) matrix for tercile.
        """
        n = Xn.shape[0]
        a = Xn @ self.W1 + self.b1
        h = sigmoid(a)
        out = h @ self.W2 + self.b2
        if self.task == "regression":
            diff = out[:, 0] - target
            loss = float((diff ** 2).mean())
            dout = (2.0 * diff / n)[:, None]
        elif self.task == "quantile":
            z = target - out[:, 0]
            loss = float(np.where(z >= 0, self.alpha * z, (self.alpha - 1.0) * z).mean())
            dout = (np.where(z >= 0, -self.alpha, 1.0 - self.alpha) / n)[:, None]
        elif self.task == "tercile":
            proba = _softmax(out)
            loss = float(-(np.log(np.clip((proba * target).sum(axis=1),
                                          1e-300, None))).mean())
            dout = (proba - target) / n
        else:
            raise StackingError(f"unknown task {self.task!r}")
        dW2 = h.T @ dout
        db2 = dout.sum(axis=0)
        dh = dout @ self.W2.T
        da = dh * h * (1.0 - h)
        dW1 = Xn.T @ da
        db1 = da.sum(axis=0)
        return loss, [dW1, db1, dW2, db2]


def stacker_fit(P: np.ndarray, y: np.ndarray, task: str = "regression",
                alpha: float | None = None, hidden: int = 100,
                epochs: int = 3000, patience: int = 50, lr: float = 0.01,
                seed: int = 0, val_fraction: float = 0.2) -> Stacker:
    """Fit the combiner on base predictions ``P`` (rows x bases) vs truth.

    Inputs and scalar targets are min-max normalized (fitted here).  A
    chronological tail of the rows serves as the plateau monitor: training
    stops once its loss has not improved for ``patience`` epochs, and the
    best-scoring weights are restored.
    """
    P = np.asarray(P, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != y.shape[0]:
        raise StackingError(f"bad stacking shapes P={P.shape}, y={y.shape}")
    if task == "tercile":
        target = np.zeros((y.size, 3))
        for idx, c in enumerate((-1, 0, 1)):
            target[y == c, idx] = 1.0
        out_dim = 3
        out_norm = None
    else:
        out_norm = NormalizationState.fit(y.reshape(-1, 1), "minmax")
        target = out_norm.apply(y.reshape(-1, 1)).reshape(-1)
        out_dim = 1

    in_norm = NormalizationState.fit(P, "minmax")
    Xn = in_norm.apply(P)

    n = Xn.shape[0]
    n_val = max(1, int(round(val_fraction * n))) if n > 4 else 0
    fit_sel = slice(0, n - n_val) if n_val else slice(0, n)
    val_sel = slice(n - n_val, n) if n_val else None

    rng = np.random.default_rng(seed)
    model = Stacker(
        W1=rng.standard_normal((P.shape[1], hidden)) / np.sqrt(P.shape[1]),
        b1=np.zeros(hidden),
        W2=rng.standard_normal((hidden, out_dim)) / np.sqrt(hidden),
        b2=np.zeros(out_dim),
        task=task, alpha=alpha, in_norm=in_norm, out_norm=out_norm,
    )

    params = [model.W1, model.b1, model.W2, model.b2]
    state = AdamState()
    best_val = np.inf
    best_params = [p.copy() for p in params]
    stall = 0
    for _ in range(epochs):
        loss, grads = model.loss_and_gradients(Xn[fit_sel], target[fit_sel])
        if not np.isfinite(loss):
            raise StackingError("non-finite stacker training loss")
        adam_step(params, grads, state, lr=lr)
        if val_sel is not None:
            val_loss, _ = model.loss_and_gradients(Xn[val_sel], target[val_sel])
        else:
            val_loss = loss
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_params = [p.copy() for p in params]
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                break
    model.W1, model.b1, model.W2, model.b2 = best_params
    return model


# ---------------------------------------------------------------------------
# half-split protocol

def _predictions_matrix(trainers, fitted, ds: Dataset, t_steps: np.ndarray,
                        task: str) -> np.ndarray:
    land = land_locations(ds.mask)
    li, lj = np.unravel_index(land, ds.grid.shape)
    cols = []
    for tr, f in zip(trainers, fitted):
        if task == "tercile":
            maps = tr.predict_proba_maps(f, ds, t_steps)      # (n_t, 3, H, W)
            cols.append(maps[:, :, li, lj].transpose(0, 2, 1).reshape(-1, 3))
        else:
            maps = tr.predict_maps(f, ds, t_steps)            # (n_t, H, W)
            cols.append(maps[:, li, lj].reshape(-1, 1))
    return np.hstack(cols)


@dataclass
class StackedModel:
    """Retrained bases plus the fitted combiner."""

    trainers: list
    fitted_bases: list
    stacker: Stacker
    task: str

    def predict_maps(self, ds: Dataset, t_steps: np.ndarray) -> np.ndarray:
        P = _predictions_matrix(self.trainers, self.fitted_bases, ds, t_steps, self.task)
        land = land_locations(ds.mask)
        li, lj = np.unravel_index(land, ds.grid.shape)
        out = np.full((t_steps.size,) + ds.grid.shape, np.nan)
        pred = self.stacker.predict(P).reshape(t_steps.size, land.size)
        out[:, li, lj] = pred
        return out

    def predict_proba_maps(self, ds: Dataset, t_steps: np.ndarray) -> np.ndarray:
        P = _predictions_matrix(self.trainers, self.fitted_bases, ds, t_steps, self.task)
        land = land_locations(ds.mask)
        li, lj = np.unravel_index(land, ds.grid.shape)
        out = np.full((t_steps.size, 3) + ds.grid.shape, np.nan)
        proba = self.stacker.predict_proba(P).reshape(t_steps.size, land.size, 3)
        out[:, :, li, lj] = proba.transpose(0, 2, 1)
        return out


def stack_train(trainers: list, ds: Dataset, task: str = "regression",
                alpha: float | None = None, hidden: int = 100, seed: int = 0,
                first_valid: int = 0, stacker_epochs: int = 3000,
                labels=None) -> StackedModel:
    """Run the five-stage half-split protocol and return the stacked model.

    ``first_valid`` is the earliest time step with full feature support
    (lag horizon); the half boundary must leave the bases at least a few
    usable steps.  ``labels`` supplies (T, H, W) tercile labels when
    task == "tercile".
    """
    if len(trainers) < 2:
        raise StackingError(f"stacking needs at least 2 bases, got {len(trainers)}")
    train_end = ds.time.train_end
    if train_end < 4:
        raise StackingError(f"training window of {train_end} steps is too short")
    half = train_end // 2
    if half <= first_valid:
        raise StackingError(
            f"half boundary {half} leaves no usable sample past the lag "
            f"horizon {first_valid}")

    fitted_half = []
    for tr in trainers:
        try:
            fitted_half.append(tr.fit(ds, 0, half))
        except Exception as exc:
            raise StackingError(f"base {tr.name!r} failed on the first half: {exc}") from exc

    t_steps = np.arange(max(half, first_valid), train_end)
    P = _predictions_matrix(trainers, fitted_half, ds, t_steps, task)

    land = land_locations(ds.mask)
    li, lj = np.unravel_index(land, ds.grid.shape)
    if task == "tercile":
        if labels is None:
            raise StackingError("tercile stacking needs precomputed labels")
        y = labels[t_steps][:, li, lj].reshape(-1)
    else:
        y = ds.target[t_steps][:, li, lj].reshape(-1)

    stacker = stacker_fit(P, y, task=task, alpha=alpha, hidden=hidden,
                          epochs=stacker_epochs, seed=seed)

    fitted_full = []
    for tr in trainers:
        try:
            fitted_full.append(tr.fit(ds, 0, train_end))
        except Exception as exc:
            raise StackingError(f"base {tr.name!r} failed on the full train: {exc}") from exc

    return StackedModel(trainers=trainers, fitted_bases=fitted_full,
                        stacker=stacker, task=task)
