"""Layer forward/backward kernels.

Every layer implements
    forward(x, mode) -> (y, LayerCache)
    backward(cache, grad_output) -> (grad_input, {param_name: grad})
where grad_input is the exact adjoint of forward at the cached point.
Images and activations are numpy arrays in (batch, channels, height, width)
layout; parameters live on the layer objects as plain arrays.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensorops import l2_normalize, l2_normalize_backward


class LayerCache:
    """Saved forward state for one backward pass.

    A cache is tied to the layer and forward call that produced it and may
    be consumed by exactly one backward call.
    """

    __slots__ = ("layer", "data", "out_shape", "consumed")

    def __init__(self, layer, data, out_shape):
        self.layer = layer
        self.data = data
        self.out_shape = out_shape
        self.consumed = False

    def take(self, layer, grad_output):
        if self.layer is not layer:
            raise ValueError("stale cache: produced by a different layer")
        if self.consumed:
            raise ValueError("stale cache: already consumed by a backward pass")
        if grad_output.shape != self.out_shape:
            raise ShapeError(
                f"grad_output shape {grad_output.shape} != forward output {self.out_shape}"
            )
        self.consumed = True
        return self.data


class Layer:
    """Base layer; subclasses set `kind` and may carry parameters."""

    kind = "base"

    def params(self) -> dict:
        """Parameter arrays in declaration order (serialization order)."""
        return {}

    def state_arrays(self) -> dict:
        """Parameters plus non-trainable state (e.g. running statistics)."""
        return self.params()

    def hyper(self) -> dict:
        """JSON-able constructor arguments (excluding arrays)."""
        return {}

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def forward(self, x, mode="infer"):
        raise NotImplementedError

    def backward(self, cache, grad_output):
        raise NotImplementedError

    def astype(self, dtype):
        """Copy of this layer with arrays cast to `dtype`."""
        clone = self.__class__.from_spec(self.hyper(), {
            k: v.astype(dtype) for k, v in self.state_arrays().items()
        })
        return clone

    @classmethod
    def from_spec(cls, hyper: dict, arrays: dict):
        raise NotImplementedError


class Standardize(Layer):
    """Fixed affine input map y = (x - shift) / scale.

    Sits first in every model so pixel-space gradients are chain-ruled
    automatically; the attack math itself stays in [0, 255] pixels.
    """

    kind = "standardize"

    def __init__(self, shift=127.5, scale=128.0):
        self.shift = float(shift)
        self.scale = float(scale)

    def hyper(self):
        return {"shift": self.shift, "scale": self.scale}

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, mode="infer"):
        y = (x - x.dtype.type(self.shift)) / x.dtype.type(self.scale)
        return y, LayerCache(self, None, y.shape)

    def backward(self, cache, grad_output):
        cache.take(self, grad_output)
        return grad_output / grad_output.dtype.type(self.scale), {}

    @classmethod
    def from_spec(cls, hyper, arrays):
        return cls(**hyper)


class Conv2d(Layer):
    """2-D convolution (cross-correlation) with stride and zero padding.

    weight: (out_c, in_c, kh, kw); bias: (out_c,) or None.
    """

    kind = "conv2d"

    def __init__(self, weight, bias=None, stride=1, pad=0):
        self.weight = np.asarray(weight)
        self.bias = None if bias is None else np.asarray(bias)
        self.stride = int(stride)
        self.pad = int(pad)

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def hyper(self):
        return {"stride": self.stride, "pad": self.pad, "has_bias": self.bias is not None}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        oc, ic, kh, kw = self.weight.shape
        if c != ic:
            raise ShapeError(f"conv2d expects {ic} input channels, got {c}")
        oh = (h + 2 * self.pad - kh) // self.stride + 1
        ow = (w + 2 * self.pad - kw) // self.stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"conv2d output collapses on input {in_shape}")
        return (oc, oh, ow)

    def _im2col(self, x):
        oc, ic, kh, kw = self.weight.shape
        if self.pad:
            x = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, :: self.stride, :: self.stride]
        b, _, oh, ow = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, ic * kh * kw)
        return np.ascontiguousarray(cols), oh, ow

    def forward(self, x, mode="infer"):
        if x.ndim != 4:
            raise ShapeError(f"conv2d expects 4-d input, got shape {x.shape}")
        oc, ic, kh, kw = self.weight.shape
        self.out_shape(x.shape[1:])
        cols, oh, ow = self._im2col(x)
        wmat = self.weight.reshape(oc, -1)
        y = cols @ wmat.T
        if self.bias is not None:
            y += self.bias
        y = y.reshape(x.shape[0], oh, ow, oc).transpose(0, 3, 1, 2)
        y = np.ascontiguousarray(y)
        return y, LayerCache(self, (x.shape, cols), y.shape)

    def backward(self, cache, grad_output):
        x_shape, cols = cache.take(self, grad_output)
        oc = self.weight.shape[0]
        gy = grad_output.transpose(0, 2, 3, 1).reshape(-1, oc)
        wmat = self.weight.reshape(oc, -1)
        gw = (gy.T @ cols).reshape(self.weight.shape)
        gcols = gy @ wmat
        gx = self._col2im(gcols, x_shape, grad_output.shape[2], grad_output.shape[3])
        grads = {"weight": gw}
        if self.bias is not None:
            grads["bias"] = gy.sum(axis=0)
        return gx, grads

    def _col2im(self, gcols, x_shape, oh, ow):
        b, c, h, w = x_shape
        oc, ic, kh, kw = self.weight.shape
        s, p = self.stride, self.pad
        hp, wp = h + 2 * p, w + 2 * p
        gx = np.zeros((b, c, hp, wp), dtype=gcols.dtype)
        g6 = gcols.reshape(b, oh, ow, ic, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + s * oh : s, j : j + s * ow : s] += g6[:, :, i, j]
        if p:
            gx = gx[:, :, p:-p, p:-p]
        return gx

    @classmethod
    def from_spec(cls, hyper, arrays):
        return cls(
            arrays["weight"],
            arrays.get("bias"),
            stride=hyper["stride"],
            pad=hyper["pad"],
        )


class BatchNorm2d(Layer):
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics (biased variance) and updates
    running statistics in place; infer mode is the affine map built from the
    stored running statistics, so gradients at attack time are independent of
    batch composition.
    """

    kind = "batchnorm2d"

    def __init__(self, gamma, beta, running_mean, running_var, eps=1e-5, momentum=0.1):
        self.gamma = np.asarray(gamma)
        self.beta = np.asarray(beta)
        self.running_mean = np.asarray(running_mean)
        self.running_var = np.asarray(running_var)
        self.eps = float(eps)
        self.momentum = float(momentum)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def state_arrays(self):
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    def hyper(self):
        return {"eps": self.eps, "momentum": self.momentum}

    def out_shape(self, in_shape):
        if in_shape[0] != self.gamma.shape[0]:
            raise ShapeError(
                f"batchnorm over {self.gamma.shape[0]} channels, input has {in_shape[0]}"
            )
        return in_shape

    def forward(self, x, mode="infer"):
        if x.ndim != 4:
            raise ShapeError(f"batchnorm2d expects 4-d input, got shape {x.shape}")
        self.out_shape(x.shape[1:])
        g = self.gamma.reshape(1, -1, 1, 1)
        b = self.beta.reshape(1, -1, 1, 1)
        if mode == "train":
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
            self.running_mean = (
                (1.0 - self.momentum) * self.running_mean + self.momentum * mean
            ).astype(self.running_mean.dtype)
            self.running_var = (
                (1.0 - self.momentum) * self.running_var + self.momentum * var
            ).astype(self.running_var.dtype)
            y = g * xhat + b
            return y, LayerCache(self, ("train", xhat, inv_std), y.shape)
        y = (x - self.running_mean.reshape(1, -1, 1, 1)) * (
            g / np.sqrt(self.running_var + self.eps).reshape(1, -1, 1, 1)
        ) + b
        return y, LayerCache(self, ("infer", x), y.shape)

    def backward(self, cache, grad_output):
        data = cache.take(self, grad_output)
        if data[0] == "train":
            _, xhat, inv_std = data
            m = grad_output.shape[0] * grad_output.shape[2] * grad_output.shape[3]
            ggamma = np.sum(grad_output * xhat, axis=(0, 2, 3))
            gbeta = np.sum(grad_output, axis=(0, 2, 3))
            g = self.gamma.reshape(1, -1, 1, 1)
            s = inv_std.reshape(1, -1, 1, 1)
            gx = (g * s / m) * (
                m * grad_output
                - gbeta.reshape(1, -1, 1, 1)
                - xhat * ggamma.reshape(1, -1, 1, 1)
            )
            return gx, {"gamma": ggamma, "beta": gbeta}
        _, x = data
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        xhat = (x - self.running_mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        gx = grad_output * (self.gamma * inv_std).reshape(1, -1, 1, 1)
        ggamma = np.sum(grad_output * xhat, axis=(0, 2, 3))
        gbeta = np.sum(grad_output, axis=(0, 2, 3))
        return gx, {"gamma": ggamma, "beta": gbeta}

    @classmethod
    def from_spec(cls, hyper, arrays):
        return cls(
            arrays["gamma"],
            arrays["beta"],
            arrays["running_mean"],
            arrays["running_var"],
            eps=hyper["eps"],
            momentum=hyper["momentum"],
        )


class PReLU(Layer):
    """Per-channel PReLU: y = x for x > 0, slope_c * x otherwise."""

    kind = "prelu"

    def __init__(self, slope):
        self.slope = np.asarray(slope)

    def params(self):
        return {"slope": self.slope}

    def out_shape(self, in_shape):
        if in_shape[0] != self.slope.shape[0]:
            raise ShapeError(
                f"prelu over {self.slope.shape[0]} channels, input has {in_shape[0]}"
            )
        return in_shape

    def forward(self, x, mode="infer"):
        if x.ndim != 4:
            raise ShapeError(f"prelu expects 4-d input, got shape {x.shape}")
        self.out_shape(x.shape[1:])
        a = self.slope.reshape(1, -1, 1, 1)
        y = np.where(x > 0, x, a * x)
        return y, LayerCache(self, x, y.shape)

    def backward(self, cache, grad_output):
        x = cache.take(self, grad_output)
        a = self.slope.reshape(1, -1, 1, 1)
        pos = x > 0
        gx = grad_output * np.where(pos, grad_output.dtype.type(1.0), a)
        gslope = np.sum(np.where(pos, 0.0, grad_output * x), axis=(0, 2, 3))
        return gx, {"slope": gslope}

    @classmethod
    def from_spec(cls, hyper, arrays):
        return cls(arrays["slope"])


class Linear(Layer):
    """Affine map y = x @ W.T + b with W of shape (out_features, in_features)."""

    kind = "linear"

    def __init__(self, weight, bias=None):
        self.weight = np.asarray(weight)
        self.bias = None if bias is None else np.asarray(bias)

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def hyper(self):
        return {"has_bias": self.bias is not None}

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.weight.shape[1]:
            raise ShapeError(
                f"linear expects ({self.weight.shape[1]},) features, got {in_shape}"
            )
        return (self.weight.shape[0],)

    def forward(self, x, mode="infer"):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"linear expects (batch, {self.weight.shape[1]}) input, got {x.shape}"
            )
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        return y, LayerCache(self, x, y.shape)

    def backward(self, cache, grad_output):
        x = cache.take(self, grad_output)
        gx = grad_output @ self.weight
        grads = {"weight": grad_output.T @ x}
        if self.bias is not None:
            grads["bias"] = grad_output.sum(axis=0)
        return gx, grads

    @classmethod
    def from_spec(cls, hyper, arrays):
        return cls(arrays["weight"], arrays.get("bias"))


class Flatten(Layer):
    """Collapse all non-batch dimensions."""

    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, mode="infer"):
        y = x.reshape(x.shape[0], -1)
        return y, LayerCache(self, x.shape, y.shape)

    def backward(self, cache, grad_output):
        x_shape = cache.take(self, grad_output)
        return grad_output.reshape(x_shape), {}

    @classmethod
    def from_spec(cls, hyper, arrays):
        return cls()


class AvgPool2d(Layer):
    """Average pooling with square kernel."""

    kind = "avgpool2d"

    def __init__(self, kernel, stride=None):
        self.kernel = int(kernel)
        self.stride = int(stride) if stride is not None else self.kernel

    def hyper(self):
        return {"kernel": self.kernel, "stride": self.stride}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k, s = self.kernel, self.stride
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"avgpool output collapses on input {in_shape}")
        return (c, oh, ow)

    def forward(self, x, mode="infer"):
        if x.ndim != 4:
            raise ShapeError(f"avgpool2d expects 4-d input, got shape {x.shape}")
        self.out_shape(x.shape[1:])
        k, s = self.kernel, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        y = win.mean(axis=(4, 5))
        return np.ascontiguousarray(y), LayerCache(self, x.shape, y.shape)

    def backward(self, cache, grad_output):
        x_shape = cache.take(self, grad_output)
        k, s = self.kernel, self.stride
        oh, ow = grad_output.shape[2], grad_output.shape[3]
        gx = np.zeros(x_shape, dtype=grad_output.dtype)
        scaled = grad_output / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + s * oh : s, j : j + s * ow : s] += scaled
        return gx, {}

    @classmethod
    def from_spec(cls, hyper, arrays):
        return cls(hyper["kernel"], hyper["stride"])


class L2Norm(Layer):
    """Embedding head: scale each row to unit Euclidean norm."""

    kind = "l2norm"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, mode="infer"):
        if x.ndim != 2:
            raise ShapeError(f"l2norm expects 2-d input, got shape {x.shape}")
        y = l2_normalize(x, axis=1)
        return y, LayerCache(self, x, y.shape)

    def backward(self, cache, grad_output):
        x = cache.take(self, grad_output)
        return l2_normalize_backward(x, grad_output, axis=1), {}

    @classmethod
    def from_spec(cls, hyper, arrays):
        return cls()


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Standardize, Conv2d, BatchNorm2d, PReLU, Linear, Flatten, AvgPool2d, L2Norm)
}


def layer_forward(layer: Layer, x: np.ndarray, mode: str = "infer"):
    """Run one layer forward; returns (output, cache) for the backward pass."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if not isinstance(layer, Layer):
        raise TypeError(f"unknown layer kind: {type(layer).__name__}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite input to {layer.kind}")
    return layer.forward(x, mode)


def layer_backward(layer: Layer, cache: LayerCache, grad_output: np.ndarray):
    """Exact adjoint of the forward call that produced `cache`."""
    return layer.backward(cache, grad_output)
