"""Desk-scale encoder-decoder convnet that maps channel stacks to one
prediction map, trained with masked losses over land cells only.

The network is a U shape: a stem conv lifts the C input channels to the
base width, each encoder level convs then max-pools while doubling
channels, and each decoder level nearest-neighbor-upsamples, convs, and
concatenates the paired encoder output.  Upsample+conv replaces transposed
convolution (same expressive role, no checkerboard artifacts).  All math is
float64 and single-threaded, so runs are bitwise reproducible given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..preprocess import NormalizationState
from .nn import (
    AdamState,
    Conv2D,
    adam_step,
    concat_backward,
    concat_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    sigmoid,
    upsample2_backward,
    upsample2_forward,
)


class TrainingError(RuntimeError):
    pass


@dataclass
class UNet:
    in_channels: int
    base: int = 16
    depth: int = 2
    out_activation: str = "identity"  # "identity" | "sigmoid"
    seed: int = 0
    stem: Conv2D = field(repr=False, default=None)
    enc: list[Conv2D] = field(repr=False, default=None)
    down: list[Conv2D] = field(repr=False, default=None)
    bottleneck: Conv2D = field(repr=False, default=None)
    up: list[Conv2D] = field(repr=False, default=None)
    dec: list[Conv2D] = field(repr=False, default=None)
    head: Conv2D = field(repr=False, default=None)
    _caches: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if self.out_activation not in ("identity", "sigmoid"):
            raise ValueError(f"unknown output activation {self.out_activation!r}")
        if self.stem is not None:
            return
        rng = np.random.default_rng(self.seed)
        b = self.base
        self.stem = Conv2D.create(self.in_channels, b, 3, rng, "stem")
        self.enc = []
        self.down = []
        self.up = []
        self.dec = []
        for i in range(self.depth):
            ch = b * (2 ** i)
            self.enc.append(Conv2D.create(ch, ch, 3, rng, f"enc{i}"))
            self.down.append(Conv2D.create(ch, ch * 2, 3, rng, f"down{i}"))
        top = b * (2 ** self.depth)
        self.bottleneck = Conv2D.create(top, top, 3, rng, "bottleneck")
        for i in reversed(range(self.depth)):
            ch = b * (2 ** i)
            self.up.append(Conv2D.create(ch * 2, ch, 3, rng, f"up{i}"))
            self.dec.append(Conv2D.create(ch * 2, ch, 3, rng, f"dec{i}"))
        self.head = Conv2D.create(b, 1, 1, rng, "head")

    # -- plumbing ----------------------------------------------------------

    def conv_layers(self) -> list[Conv2D]:
        return ([self.stem] + self.enc + self.down + [self.bottleneck]
                + self.up + self.dec + [self.head])

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.conv_layers():
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in self.conv_layers():
            out.append(layer.dweight)
            out.append(layer.dbias)
        return out

    def parameter_names(self) -> list[str]:
        out = []
        for layer in self.conv_layers():
            out.append(f"{layer.name}.weight")
            out.append(f"{layer.name}.bias")
        return out

    def clone(self) -> "UNet":
        new = UNet(self.in_channels, self.base, self.depth, self.out_activation,
                   self.seed, stem=Conv2D(self.stem.weight.copy(), self.stem.bias.copy(), "stem"))
        new.enc = [Conv2D(l.weight.copy(), l.bias.copy(), l.name) for l in self.enc]
        new.down = [Conv2D(l.weight.copy(), l.bias.copy(), l.name) for l in self.down]
        new.bottleneck = Conv2D(self.bottleneck.weight.copy(),
                                self.bottleneck.bias.copy(), "bottleneck")
        new.up = [Conv2D(l.weight.copy(), l.bias.copy(), l.name) for l in self.up]
        new.dec = [Conv2D(l.weight.copy(), l.bias.copy(), l.name) for l in self.dec]
        new.head = Conv2D(self.head.weight.copy(), self.head.bias.copy(), "head")
        return new

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"input {x.shape} incompatible with "
                             f"{self.in_channels}-channel net")
        h, w = x.shape[2], x.shape[3]
        div = 2 ** self.depth
        if h % div or w % div:
            raise ValueError(f"spatial dims {h}x{w} must be divisible by {div}")
        caches = {"relu": [], "pool": [], "skip_shapes": []}

        x = self.stem.forward(x, keep)
        x, m = relu_forward(x)
        caches["relu"].append(("stem", m))

        skips = []
        for i in range(self.depth):
            x = self.enc[i].forward(x, keep)
            x, m = relu_forward(x)
            caches["relu"].append((f"enc{i}", m))
            skips.append(x)
            x, idx = maxpool2_forward(x)
            caches["pool"].append(idx)
            x = self.down[i].forward(x, keep)
            x, m = relu_forward(x)
            caches["relu"].append((f"down{i}", m))

        x = self.bottleneck.forward(x, keep)
        x, m = relu_forward(x)
        caches["relu"].append(("bottleneck", m))

        for pos, i in enumerate(reversed(range(self.depth))):
            x = upsample2_forward(x)
            x = self.up[pos].forward(x, keep)
            x, m = relu_forward(x)
            caches["relu"].append((f"up{i}", m))
            caches["skip_shapes"].append(x.shape[1])
            x = concat_forward(x, skips[i])
            x = self.dec[pos].forward(x, keep)
            x, m = relu_forward(x)
            caches["relu"].append((f"dec{i}", m))

        z = self.head.forward(x, keep)
        out = sigmoid(z) if self.out_activation == "sigmoid" else z
        if keep:
            caches["head_out"] = out
            self._caches = caches
        return out[:, 0]

    def backward(self, dout: np.ndarray) -> None:
        """Accumulate parameter gradients from d(loss)/d(prediction map)."""
        caches = self._caches
        relus = dict(caches["relu"])
        d = dout[:, None, :, :]
        if self.out_activation == "sigmoid":
            y = caches["head_out"]
            d = d * y * (1.0 - y)
        d = self.head.backward(d)

        dskips = {}
        dec_order = list(reversed(range(self.depth)))
        for pos in reversed(range(self.depth)):
            i = dec_order[pos]
            d = relu_backward(d, relus[f"dec{i}"])
            d = self.dec[pos].backward(d)
            c_a = caches["skip_shapes"][pos]
            d, dskip = concat_backward(d, c_a)
            dskips[i] = dskip
            d = relu_backward(d, relus[f"up{i}"])
            d = self.up[pos].backward(d)
            d = upsample2_backward(d)

        d = relu_backward(d, relus["bottleneck"])
        d = self.bottleneck.backward(d)

        for i in reversed(range(self.depth)):
            d = relu_backward(d, relus[f"down{i}"])
            d = self.down[i].backward(d)
            d = maxpool2_backward(d, caches["pool"][i])
            d = d + dskips[i]
            d = relu_backward(d, relus[f"enc{i}"])
            d = self.enc[i].backward(d)

        d = relu_backward(d, relus["stem"])
        self.stem.backward(d)


# ---------------------------------------------------------------------------
# masked losses

def masked_mse(pred: np.ndarray, target: np.ndarray,
               mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over land cells; sea cells contribute nothing."""
    diff = np.where(mask[None], pred - target, 0.0)
    count = pred.shape[0] * int(mask.sum())
    loss = float((diff ** 2).sum() / count)
    return loss, 2.0 * diff / count


def masked_pinball(pred: np.ndarray, target: np.ndarray, mask: np.ndarray,
                   alpha: float) -> tuple[float, np.ndarray]:
    z = np.where(mask[None], target - pred, 0.0)
    count = pred.shape[0] * int(mask.sum())
    loss = float(np.where(z >= 0, alpha * z, (alpha - 1.0) * z).sum() / count)
    grad = np.where(mask[None], np.where(z >= 0, -alpha, 1.0 - alpha), 0.0) / count
    return loss, grad


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["epoch\ttrain_loss\tval_loss"]
        for i, e in enumerate(self.epochs):
            v = f"{self.val_loss[i]:.17g}" if i < len(self.val_loss) else ""
            lines.append(f"{e}\t{self.train_loss[i]:.17g}\t{v}")
        return "\n".join(lines) + "\n"


def _loss_fn(task: str, alpha: float | None):
    if task == "regression":
        return masked_mse
    if task == "quantile":
        if alpha is None or not 0.0 < alpha < 1.0:
            raise TrainingError(f"quantile training needs alpha in (0, 1), got {alpha}")
        return lambda p, t, m: masked_pinball(p, t, m, alpha)
    raise TrainingError(f"unknown convnet task {task!r}")


def _train(model: UNet, stacks: np.ndarray, targets: np.ndarray, mask: np.ndarray,
           task: str, alpha: float | None, epochs: int, batch_size: int,
           lr: float, weight_decay: float, seed: int,
           val: tuple[np.ndarray, np.ndarray] | None = None) -> TrainLog:
    if not np.isfinite(stacks).all():
        raise TrainingError("non-finite values in the input stacks")
    loss_fn = _loss_fn(task, alpha)
    n = stacks.shape[0]
    rng = np.random.default_rng(seed)
    state = AdamState()
    log = TrainLog()
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            pred = model.forward(stacks[sel], keep=True)
            loss, dpred = loss_fn(pred, targets[sel], mask)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}, batch "
                    f"{start // batch_size}")
            model.backward(dpred)
            adam_step(model.parameters(), model.gradients(), state, lr=lr,
                      weight_decay=weight_decay)
            epoch_loss += loss * sel.size
        log.epochs.append(epoch)
        log.train_loss.append(epoch_loss / n)
        if val is not None:
            vp = model.forward(val[0], keep=False)
            vl, _ = loss_fn(vp, val[1], mask)
            log.val_loss.append(vl)
    return log


def train_regression(model: UNet, stacks: np.ndarray, targets_norm: np.ndarray,
                     mask: np.ndarray, epochs: int = 100, batch_size: int = 8,
                     lr: float = 1e-2, weight_decay: float = 0.0, seed: int = 0,
                     val: tuple[np.ndarray, np.ndarray] | None = None) -> TrainLog:
    """Masked squared-error training on normalized target maps."""
    return _train(model, stacks, targets_norm, mask, "regression", None,
                  epochs, batch_size, lr, weight_decay, seed, val)


def quantile_init(regression_model: UNet, seed: int = 0) -> UNet:
    """Quantile net initialized from regression weights.

    The output head becomes identity; if the regression head was a sigmoid
    the final layer is reinitialized (its weights were trained against a
    squashed output scale and are re-learned).
    """
    model = regression_model.clone()
    if model.out_activation == "sigmoid":
        rng = np.random.default_rng(seed)
        model.head = Conv2D.create(model.base, 1, 1, rng, "head")
    model.out_activation = "identity"
    return model


def train_quantile(model: UNet, alpha: float, stacks: np.ndarray,
                   targets_norm: np.ndarray, mask: np.ndarray, epochs: int = 100,
                   batch_size: int = 8, lr: float = 1e-2,
                   weight_decay: float = 0.0, seed: int = 0,
                   val: tuple[np.ndarray, np.ndarray] | None = None) -> TrainLog:
    """Masked pinball-loss fine-tuning; start from :func:`quantile_init`."""
    if model.out_activation != "identity":
        raise TrainingError("quantile training expects an identity output head")
    return _train(model, stacks, targets_norm, mask, "quantile", alpha,
                  epochs, batch_size, lr, weight_decay, seed, val)


def predict_map(model: UNet, stacks: np.ndarray, target_norm: NormalizationState,
                mask: np.ndarray) -> np.ndarray:
    """Forward pass + de-normalization; sea cells come back as NaN."""
    pred = model.forward(np.asarray(stacks, dtype=np.float64), keep=False)
    flat = pred.reshape(pred.shape[0], -1)
    denorm = target_norm.invert(flat).reshape(pred.shape)
    return np.where(mask[None], denorm, np.nan)


# ---------------------------------------------------------------------------
# chronological-block cross-validation grid search

def cv_grid_search(stacks: np.ndarray, targets_norm: np.ndarray, mask: np.ndarray,
                   in_channels: int, grid: list[dict], base: int = 16,
                   depth: int = 2, folds: int = 10, seed: int = 0) -> dict:
    """Pick the grid entry with the lowest mean masked val MSE across
    contiguous time-block folds (chronological blocks avoid leakage).
    """
    n = stacks.shape[0]
    folds = min(folds, n)
    bounds = np.linspace(0, n, folds + 1).astype(int)
    best = None
    for combo in grid:
        scores = []
        for f in range(folds):
            lo, hi = bounds[f], bounds[f + 1]
            if hi <= lo:
                continue
            val_sel = np.arange(lo, hi)
            train_sel = np.concatenate([np.arange(0, lo), np.arange(hi, n)])
            if train_sel.size == 0:
                continue
            model = UNet(in_channels, base=base, depth=depth, seed=seed)
            train_regression(model, stacks[train_sel], targets_norm[train_sel], mask,
                             epochs=combo.get("epochs", 50),
                             batch_size=combo.get("batch_size", 8),
                             lr=combo.get("lr", 1e-2),
                             weight_decay=combo.get("weight_decay", 0.0),
                             seed=seed)
            pred = model.forward(stacks[val_sel], keep=False)
            loss, _ = masked_mse(pred, targets_norm[val_sel], mask)
            scores.append(loss)
        mean_score = float(np.mean(scores))
        if best is None or mean_score < best[0]:
            best = (mean_score, combo)
    return dict(best[1], cv_loss=best[0])


# ---------------------------------------------------------------------------
# checkpoints

def unet_to_arrays(model: UNet) -> dict[str, np.ndarray]:
    out = {
        "meta": np.array([model.in_channels, model.base, model.depth, model.seed]),
        "meta_activation": np.array([model.out_activation]),
    }
    layers = model.conv_layers()
    for layer in layers:
        out[f"{layer.name}.weight"] = layer.weight
        out[f"{layer.name}.bias"] = layer.bias
    return out


def unet_from_arrays(data) -> UNet:
    meta = np.asarray(data["meta"], dtype=np.int64)
    model = UNet(int(meta[0]), base=int(meta[1]), depth=int(meta[2]),
                 out_activation=str(data["meta_activation"][0]), seed=int(meta[3]))
    for layer in model.conv_layers():
        layer.weight = np.asarray(data[f"{layer.name}.weight"], dtype=np.float64).copy()
        layer.bias = np.asarray(data[f"{layer.name}.bias"], dtype=np.float64).copy()
    return model
