"""Layers with hand-written forward/backward passes.

Every layer caches what its backward pass needs during ``forward`` and
returns the input gradient from ``backward``. Parameter gradients are
stored on the layer in ``grads`` keyed like ``params``.

Arrays are plain ``numpy.ndarray`` in NCHW layout. Training runs in
float32; layers keep whatever dtype they are given so gradient checks can
run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when array shapes do not fit a layer."""


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: input contains NaN or Inf")


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------

LAYER_KINDS = ("conv", "relu", "lrn", "maxpool", "dense")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one trunk layer.

    Only the parameters relevant to ``kind`` are consulted.
    """

    kind: str
    out_channels: int = 1
    kernel_size: int = 3
    stride: int = 1
    pad: int = 0
    k: float = 2.0
    n: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    window: int = 2
    out_features: int = 1
    in_features: int = 0  # dense only; 0 infers from the previous layer

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            if self.out_channels < 1 or self.kernel_size < 1 or self.stride < 1 or self.pad < 0:
                raise ValueError(f"invalid conv parameters: {self}")
        elif self.kind == "lrn":
            if self.n < 1 or self.n % 2 == 0:
                raise ValueError(f"lrn window n must be odd and >= 1, got {self.n}")
            if self.k <= 0 or self.beta <= 0 or self.alpha < 0:
                raise ValueError(f"invalid lrn parameters: {self}")
        elif self.kind == "maxpool":
            if self.window < 1 or self.stride < 1:
                raise ValueError(f"invalid maxpool parameters: {self}")
        elif self.kind == "dense":
            if self.out_features < 1 or self.in_features < 0:
                raise ValueError(f"invalid dense parameters: {self}")

    def to_dict(self) -> dict:
        keys = {
            "conv": ("out_channels", "kernel_size", "stride", "pad"),
            "relu": (),
            "lrn": ("k", "n", "alpha", "beta"),
            "maxpool": ("window", "stride"),
            "dense": ("out_features", "in_features"),
        }[self.kind]
        d = {"kind": self.kind}
        d.update({key: getattr(self, key) for key in keys})
        if not d.get("in_features", 1):
            del d["in_features"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# Functional forms
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H', W', kh, kw) view -> (N*H'*W', C*kh*kw) copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlation of ``x`` (N,C,H,W) with filters ``w`` (F,C,kH,kW).

    Returns the output and a cache for :func:`conv2d_backward`.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weights expect {cw}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {f} filters")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})")
    _check_finite(x, "conv2d")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride)
    out = cols @ w.reshape(f, -1).T + b
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, xp.shape, cols, w, stride, pad)


def conv2d_backward(dout, cache):
    x_shape, xp_shape, cols, w, stride, pad = cache
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    ho, wo = dout.shape[2:]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    # channel-major scratch keeps the col2im slices contiguous
    dcols = (w.reshape(f, -1).T @ dout.transpose(1, 0, 2, 3).reshape(f, -1)).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n) + xp_shape[2:], dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), dw, db


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    return dout * (x > 0)


def _channel_window_sum(sq: np.ndarray, n: int) -> np.ndarray:
    # sum over channels j with |j - c| <= n//2, clipped to valid channels
    out = sq.copy()
    for d in range(1, min(n // 2, sq.shape[1] - 1) + 1):
        out[:, d:] += sq[:, :-d]
        out[:, :-d] += sq[:, d:]
    return out


def lrn_forward(x, k=2.0, n=5, alpha=1e-4, beta=0.75):
    """Cross-channel local response normalization.

    ``out[c] = x[c] / (k + alpha * sum_{|j-c| <= n//2} x[j]**2) ** beta``
    """
    if n < 1 or n % 2 == 0:
        raise ValueError(f"lrn window n must be odd and >= 1, got {n}")
    if x.ndim != 4:
        raise ShapeError(f"lrn expects 4-D input, got {x.shape}")
    _check_finite(x, "lrn")
    denom = k + alpha * _channel_window_sum(x * x, n)
    scale = denom ** (-beta)
    return x * scale, (x, denom, scale, n, alpha, beta)


def lrn_backward(dout, cache):
    x, denom, scale, n, alpha, beta = cache
    # windows are symmetric, so the adjoint of the window sum is the window sum
    t = dout * x * scale / denom
    return dout * scale - 2.0 * alpha * beta * x * _channel_window_sum(t, n)


def maxpool_forward(x, window=2, stride=2):
    """Max over ``window`` x ``window`` patches; ties go to the first row-major max."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    if window > h or window > w:
        raise ShapeError(f"maxpool window {window} larger than input {h}x{w}")
    _check_finite(x, "maxpool")
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, window, stride)


def maxpool_backward(dout, cache):
    x_shape, arg, window, stride = cache
    ho, wo = dout.shape[2:]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(window):
        for j in range(window):
            hit = arg == i * window + j
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dout * hit
    return dx


def dense_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shape mismatch: input {x.shape}, weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias shape {b.shape} does not match {w.shape[1]} outputs")
    _check_finite(x, "dense")
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent_soft(logits: np.ndarray, target: np.ndarray, atol: float = 1e-6):
    """Mean cross-entropy of softmax(logits) against soft target rows.

    Returns ``(loss, dlogits)`` with ``dlogits = (softmax - target) / N``.
    """
    if logits.shape != target.shape or logits.ndim != 2:
        raise ShapeError(f"logits {logits.shape} and target {target.shape} must be equal 2-D shapes")
    if np.any(target < 0) or np.any(np.abs(target.sum(axis=1) - 1.0) > atol):
        raise ValueError("every target row must be a probability distribution")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float(np.sum(target * logp)) / n
    dlogits = (np.exp(logp) - target) / n
    return loss, dlogits.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# Stateful layers
# ---------------------------------------------------------------------------

class Layer:
    """Base class: ``params`` and ``grads`` are dicts of arrays."""

    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, pad=0):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.params["weight"] = np.zeros((out_channels, in_channels, kernel_size, kernel_size), np.float32)
        self.params["bias"] = np.zeros(out_channels, np.float32)

    def forward(self, x):
        out, self._cache = conv2d_forward(x, self.params["weight"], self.params["bias"], self.stride, self.pad)
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache)
        self.grads = {"weight": dw, "bias": db}
        return dx

    def output_shape(self, in_shape):
        c, h, w = in_shape
        f, cw, kh, kw = self.params["weight"].shape
        if c != cw:
            raise ShapeError(f"expects {cw} input channels, got {c}")
        if h + 2 * self.pad < kh or w + 2 * self.pad < kw:
            raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
        return (f, conv_output_size(h, kh, self.stride, self.pad), conv_output_size(w, kw, self.stride, self.pad))


class ReLU(Layer):
    def forward(self, x):
        out, self._cache = relu_forward(x)
        return out

    def backward(self, dout):
        return relu_backward(dout, self._cache)

    def output_shape(self, in_shape):
        return in_shape


class LRN(Layer):
    def __init__(self, k=2.0, n=5, alpha=1e-4, beta=0.75):
        super().__init__()
        self.k, self.n, self.alpha, self.beta = k, n, alpha, beta

    def forward(self, x):
        out, self._cache = lrn_forward(x, self.k, self.n, self.alpha, self.beta)
        return out

    def backward(self, dout):
        return lrn_backward(dout, self._cache)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"expects (C, H, W) input, got {in_shape}")
        return in_shape


class MaxPool(Layer):
    def __init__(self, window=2, stride=2):
        super().__init__()
        self.window, self.stride = window, stride

    def forward(self, x):
        out, self._cache = maxpool_forward(x, self.window, self.stride)
        return out

    def backward(self, dout):
        return maxpool_backward(dout, self._cache)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if self.window > h or self.window > w:
            raise ShapeError(f"window {self.window} larger than input {h}x{w}")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)


class Dense(Layer):
    """Affine layer; flattens any trailing dimensions of its input."""

    def __init__(self, in_features, out_features):
        super().__init__()
        self.params["weight"] = np.zeros((in_features, out_features), np.float32)
        self.params["bias"] = np.zeros(out_features, np.float32)

    def forward(self, x):
        self._in_shape = x.shape
        out, self._cache = dense_forward(x.reshape(x.shape[0], -1), self.params["weight"], self.params["bias"])
        return out

    def backward(self, dout):
        dx, dw, db = dense_backward(dout, self._cache)
        self.grads = {"weight": dw, "bias": db}
        return dx.reshape(self._in_shape)

    def output_shape(self, in_shape):
        d = int(np.prod(in_shape))
        if d != self.params["weight"].shape[0]:
            raise ShapeError(f"expects {self.params['weight'].shape[0]} input features, got {d}")
        return (self.params["weight"].shape[1],)


def make_layer(spec: LayerSpec, in_shape: tuple) -> Layer:
    """Instantiate ``spec`` for an input of shape ``in_shape`` (without batch)."""
    if spec.kind == "conv":
        if len(in_shape) != 3:
            raise ShapeError(f"conv expects (C, H, W) input, got {in_shape}")
        return Conv2D(in_shape[0], spec.out_channels, spec.kernel_size, spec.stride, spec.pad)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "lrn":
        return LRN(spec.k, spec.n, spec.alpha, spec.beta)
    if spec.kind == "maxpool":
        return MaxPool(spec.window, spec.stride)
    d = int(np.prod(in_shape))
    if spec.in_features and spec.in_features != d:
        raise ShapeError(f"dense declares {spec.in_features} input features, previous layer gives {d}")
    return Dense(d, spec.out_features)
