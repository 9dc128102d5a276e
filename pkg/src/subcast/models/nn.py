"""Manual forward/backward layers (float64) and the Adam update.

Everything operates on (N, C, H, W) tensors.  Convolutions are stride-1
with zero padding; pooling and upsampling work on even spatial dims.  The
backward functions return exact gradients of the composition, which the
test suite checks against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = h + 2 * pad - kh + 1
    wo = w + 2 * pad - kw + 1
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho = h + 2 * pad - kh + 1
    wo = w + 2 * pad - kw + 1
    dc = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho, j:j + wo] += dc[:, :, i, j]
    if pad:
        return dxp[:, :, pad:h + pad, pad:w + pad]
    return dxp


@dataclass
class Conv2D:
    """Stride-1 convolution; 3x3 kernels use zero padding 1, 1x1 use none."""

    weight: np.ndarray = field(repr=False)  # (C_out, C_in, kh, kw)
    bias: np.ndarray = field(repr=False)    # (C_out,)
    name: str = "conv"
    dweight: np.ndarray = field(repr=False, default=None)
    dbias: np.ndarray = field(repr=False, default=None)
    _cache: tuple = field(repr=False, default=None)

    @classmethod
    def create(cls, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
               name: str = "conv") -> "Conv2D":
        fan_in = c_in * kernel * kernel
        w = rng.standard_normal((c_out, c_in, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        return cls(weight=w, bias=np.zeros(c_out), name=name)

    @property
    def pad(self) -> int:
        return self.weight.shape[2] // 2

    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        c_out, c_in, kh, kw = self.weight.shape
        if x.ndim != 4 or x.shape[1] != c_in:
            raise ShapeError(f"layer {self.name}: input {x.shape} incompatible with "
                             f"kernel expecting {c_in} channels")
        cols = _im2col(x, kh, kw, self.pad)
        w_mat = self.weight.reshape(c_out, -1)
        out = np.matmul(w_mat[None], cols) + self.bias[None, :, None]
        out = out.reshape(x.shape[0], c_out, x.shape[2], x.shape[3])
        if keep:
            self._cache = (x.shape, cols)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x_shape, cols = self._cache
        c_out, c_in, kh, kw = self.weight.shape
        n = x_shape[0]
        dmat = dout.reshape(n, c_out, -1)
        self.dweight = np.einsum("nop,nkp->ok", dmat, cols).reshape(self.weight.shape)
        self.dbias = dout.sum(axis=(0, 2, 3))
        w_mat = self.weight.reshape(c_out, -1)
        dcols = np.matmul(w_mat.T[None], dmat)
        return _col2im(dcols, x_shape, kh, kw, self.pad)

    def params(self):
        return [("weight", self), ("bias", self)]


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    v = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    v = v.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(v, axis=-1)  # first max wins ties
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(dout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, c, ho, wo = dout.shape
    dv = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(dv, idx[..., None], dout[..., None], axis=-1)
    dv = dv.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dv.reshape(n, c, ho * 2, wo * 2)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(dout: np.ndarray) -> np.ndarray:
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concat {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_backward(dout: np.ndarray, c_a: int) -> tuple[np.ndarray, np.ndarray]:
    return dout[:, :c_a], dout[:, c_a:]


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class AdamState:
    """First/second moment estimates keyed like the parameter list."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place Adam with bias correction and decoupled weight decay."""
    if len(params) != len(grads):
        raise ShapeError("params/grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1t = 1.0 - beta1 ** state.t
    b2t = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / b1t) / (np.sqrt(v / b2t) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= lr * update
