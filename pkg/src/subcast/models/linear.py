"""Per-location linear models: OLS, linear quantile regression, and
multinomial logistic regression.

The quantile fit uses averaged subgradient descent with step decay; the
contract is stated in achieved-loss terms (empirical quantile recovered
within half the inter-order-statistic gap on intercept-only designs), so
an exact solver could replace it without touching callers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TERCILE_CLASSES = (-1, 0, 1)


class LinearFitError(ValueError):
    pass


@dataclass
class LinearModel:
    """Fitted weights for one regression / quantile / tercile linear model."""

    weights: np.ndarray = field(repr=False)
    intercept: np.ndarray | float
    task: str = "regression"            # regression | quantile | tercile
    alpha: float | None = None          # quantile level when task == "quantile"
    catalog_hash: str | None = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.weights + self.intercept

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if self.task != "tercile":
            raise LinearFitError("predict_proba is only defined for tercile models")
        scores = np.asarray(X, dtype=np.float64) @ self.weights + self.intercept
        return _softmax(scores)

    def predict_label(self, X: np.ndarray) -> np.ndarray:
        proba = self.predict_proba(X)
        return np.asarray(TERCILE_CLASSES)[np.argmax(proba, axis=1)]


def _check_finite(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise LinearFitError(f"bad design shapes X={X.shape}, y={y.shape}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise LinearFitError("non-finite values in the design matrix or targets")
    return X, y


def ols_fit(X: np.ndarray, y: np.ndarray, ridge: float = 0.0,
            catalog_hash: str | None = None) -> LinearModel:
    """Least squares with unpenalized intercept.

    Normal equations + Cholesky when the (possibly ridge-regularized)
    system is positive definite; otherwise the minimum-norm solution via
    SVD-based least squares.
    """
    X, y = _check_finite(X, y)
    if ridge < 0:
        raise LinearFitError(f"ridge penalty must be >= 0, got {ridge}")
    n, p = X.shape
    A = np.hstack([np.ones((n, 1)), X])
    gram = A.T @ A
    if ridge > 0:
        reg = ridge * np.eye(p + 1)
        reg[0, 0] = 0.0  # intercept is never shrunk
        gram = gram + reg
    rhs = A.T @ y
    try:
        chol = np.linalg.cholesky(gram)
        coef = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    except np.linalg.LinAlgError:
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return LinearModel(weights=coef[1:], intercept=float(coef[0]),
                       task="regression", catalog_hash=catalog_hash)


def pinball_loss(z: np.ndarray | float, alpha: float) -> np.ndarray | float:
    """rho_alpha(z): alpha*z for z >= 0, (alpha-1)*z otherwise."""
    if not 0.0 < alpha < 1.0:
        raise LinearFitError(f"quantile level must be in (0, 1), got {alpha}")
    z = np.asarray(z, dtype=np.float64)
    out = np.where(z >= 0, alpha * z, (alpha - 1.0) * z)
    return float(out) if out.ndim == 0 else out


def linear_qr_fit(X: np.ndarray, y: np.ndarray, alpha: float,
                  max_epochs: int = 5000, patience: int = 50,
                  tol: float = 1e-8, lr0: float | None = None,
                  catalog_hash: str | None = None) -> LinearModel:
    """Linear quantile regression by averaged subgradient descent.

    Features are standardized internally for conditioning; the returned
    weights act on the original scale.  Convergence: best-loss improvement
    below ``tol`` for ``patience`` consecutive epochs, or ``max_epochs``.
    """
    if not 0.0 < alpha < 1.0:
        raise LinearFitError(f"quantile level must be in (0, 1), got {alpha}")
    X, y = _check_finite(X, y)
    n, p = X.shape

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mu) / sd

    y_scale = max(float(y.std()), 1e-8)
    if lr0 is None:
        lr0 = 2.0 * y_scale

    theta = np.zeros(p)
    theta0 = float(np.percentile(y, 100.0 * alpha))
    avg_theta = np.zeros(p)
    avg_theta0 = 0.0
    n_avg = 0
    burn_in = max_epochs // 4
    best = np.inf
    stall = 0

    for epoch in range(max_epochs):
        pred = Xs @ theta + theta0
        z = y - pred
        loss = float(pinball_loss(z, alpha).mean())
        if not np.isfinite(loss):
            raise LinearFitError(
                f"quantile fit diverged at epoch {epoch} (step size {lr0:g})")
        if loss < best - tol:
            best = loss
            stall = 0
        else:
            stall += 1
            if stall >= patience and epoch > burn_in:
                break
        # d rho / d pred: -alpha on z >= 0, (1 - alpha) on z < 0
        g = np.where(z >= 0, -alpha, 1.0 - alpha)
        lr = lr0 / np.sqrt(1.0 + epoch)
        theta -= lr * (Xs.T @ g) / n
        theta0 -= lr * g.mean()
        if epoch >= burn_in:
            n_avg += 1
            avg_theta += (theta - avg_theta) / n_avg
            avg_theta0 += (theta0 - avg_theta0) / n_avg

    if n_avg > 0:
        # keep the averaged iterate only if it scores at least as well
        avg_loss = float(pinball_loss(y - (Xs @ avg_theta + avg_theta0), alpha).mean())
        if avg_loss <= float(pinball_loss(y - (Xs @ theta + theta0), alpha).mean()):
            theta, theta0 = avg_theta, avg_theta0

    w = theta / sd
    b = theta0 - float(mu @ w)
    return LinearModel(weights=w, intercept=b, task="quantile", alpha=alpha,
                       catalog_hash=catalog_hash)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def logistic_fit(X: np.ndarray, labels: np.ndarray, l2: float = 1e-4,
                 max_epochs: int = 2000, lr: float = 0.5,
                 tol: float = 1e-10, catalog_hash: str | None = None) -> LinearModel:
    """Three-class softmax regression minimizing mean cross-entropy + L2.

    Full-batch gradient descent with step halving whenever the penalized
    loss fails to decrease; intercepts are unpenalized.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.isfinite(X).all():
        raise LinearFitError("non-finite values in the design matrix")
    present = set(int(v) for v in np.unique(labels))
    missing = [c for c in TERCILE_CLASSES if c not in present]
    if missing:
        raise LinearFitError(f"training labels missing classes {missing}")
    n, p = X.shape
    Y = np.zeros((n, 3))
    for c_idx, c in enumerate(TERCILE_CLASSES):
        Y[labels == c, c_idx] = 1.0

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mu) / sd

    W = np.zeros((p, 3))
    b = np.log(Y.mean(axis=0) + 1e-300)

    def penalized_loss(W, b):
        proba = _softmax(Xs @ W + b)
        ce = -np.log(np.clip((proba * Y).sum(axis=1), 1e-300, None)).mean()
        return ce + 0.5 * l2 * float((W ** 2).sum())

    prev = penalized_loss(W, b)
    step = lr
    for _ in range(max_epochs):
        proba = _softmax(Xs @ W + b)
        err = (proba - Y) / n
        gW = Xs.T @ err + l2 * W
        gb = err.sum(axis=0)
        W_new = W - step * gW
        b_new = b - step * gb
        cur = penalized_loss(W_new, b_new)
        if not np.isfinite(cur):
            raise LinearFitError("logistic fit produced a non-finite loss")
        if cur > prev:
            step *= 0.5
            if step < 1e-12:
                break
            continue
        W, b = W_new, b_new
        if prev - cur < tol:
            prev = cur
            break
        prev = cur

    W_orig = W / sd[:, None]
    b_orig = b - mu @ W_orig
    return LinearModel(weights=W_orig, intercept=b_orig, task="tercile",
                       catalog_hash=catalog_hash)


@dataclass
class PerLocationFit:
    """Independent-paradigm fit results with a per-location error report."""

    models: dict[int, LinearModel]
    failures: dict[int, str]

    def __post_init__(self):
        if not self.models and self.failures:
            raise LinearFitError(
                f"every location failed to fit; first errors: "
                f"{dict(list(self.failures.items())[:3])}")


def per_location_fit(features, task: str, positions: np.ndarray,
                     alpha: float | None = None, ridge: float = 0.0,
                     labels: np.ndarray | None = None) -> PerLocationFit:
    """Fit one linear model per land location on its own feature matrix.

    ``features`` is a TabularFeatures from the independent paradigm and
    ``positions`` selects the training samples (indices into its step
    list); individual locations that fail are reported, not fatal.
    ``labels`` is (n_positions, n_land) for the tercile task.
    """
    models: dict[int, LinearModel] = {}
    failures: dict[int, str] = {}
    chash = features.catalog.sha256()
    for idx in range(features.n_land):
        X, y = features.location_rows(idx, positions)
        try:
            if task == "regression":
                models[idx] = ols_fit(X, y, ridge=ridge, catalog_hash=chash)
            elif task == "quantile":
                models[idx] = linear_qr_fit(X, y, alpha, catalog_hash=chash)
            elif task == "tercile":
                models[idx] = logistic_fit(X, labels[:, idx], catalog_hash=chash)
            else:
                raise LinearFitError(f"unknown task {task!r}")
        except LinearFitError as exc:
            failures[idx] = str(exc)
    return PerLocationFit(models=models, failures=failures)
