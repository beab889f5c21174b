"""Layer types with explicit forward/backward passes.

Every layer keeps its trainable tensors in ``params`` and everything else
(frozen PCA bases, batch-norm running statistics) in ``buffers``. Shapes are
per-sample; the batch axis is implicit and always first.
"""
from __future__ import annotations

from typing import Any, ClassVar

import numpy as np

from pcnet.exceptions import DimensionError
from pcnet.tensor.ops import col2im, conv_geometry, im2col, pad_image

ACTIVATIONS = ("none", "relu", "sigmoid", "softmax")


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "none":
        return z
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "sigmoid":
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind == "softmax":
        return softmax(z)
    raise ValueError(f"unknown activation {kind!r}")


def activate_backward(kind: str, dy: np.ndarray, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    if kind == "none":
        return dy
    if kind == "relu":
        return dy * (z > 0)
    if kind == "sigmoid":
        return dy * y * (1 - y)
    if kind == "softmax":
        return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))
    raise ValueError(f"unknown activation {kind!r}")


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    ez = np.exp(shifted)
    return ez / np.sum(ez, axis=-1, keepdims=True)


class Layer:
    """Base layer. Subclasses set ``kind`` and implement the shape/forward/backward trio."""

    kind: ClassVar[str] = "layer"
    # params that count as "weight matrices" for L2 regularization
    weight_keys: ClassVar[tuple[str, ...]] = ()

    def __init__(self, name: str, inputs: tuple[str, ...] | None = None):
        self.name = name
        self.inputs = tuple(inputs) if inputs is not None else None
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def output_shape(self, *in_shapes: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, *xs: np.ndarray, training: bool = False):
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache, need_dx: bool = True):
        """Return ``(dxs, grads)``: one input gradient per input and a dict of param grads."""
        raise NotImplementedError

    def hyper(self) -> dict[str, Any]:
        """JSON-serializable constructor arguments other than tensors."""
        return {}

    def config(self) -> dict[str, Any]:
        return {"type": self.kind, "name": self.name, "inputs": list(self.inputs or ()), **self.hyper()}

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}={tuple(v.shape)}" for k, v in self.tensors().items())
        return f"{type(self).__name__}({self.name!r}{', ' + shapes if shapes else ''})"


def _expect_rank(layer: Layer, shape: tuple[int, ...], rank: int) -> None:
    if len(shape) != rank:
        raise DimensionError(f"layer {layer.name!r}: expected rank-{rank} per-sample input, got {shape}")


class Dense(Layer):
    kind = "dense"
    weight_keys = ("W",)

    def __init__(self, name, in_features: int, out_features: int, activation: str = "none",
                 use_bias: bool = True, inputs=None, dtype=np.float32):
        super().__init__(name, inputs)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.use_bias = use_bias
        self.params["W"] = np.zeros((in_features, out_features), dtype=dtype)
        if use_bias:
            self.params["b"] = np.zeros(out_features, dtype=dtype)

    @property
    def in_features(self) -> int:
        return self._weight.shape[0]

    @property
    def out_features(self) -> int:
        return self._weight.shape[1]

    @property
    def _weight(self) -> np.ndarray:
        return self.params["W"]

    def hyper(self):
        return {"in_features": self.in_features, "out_features": self.out_features,
                "activation": self.activation, "use_bias": self.use_bias}

    def output_shape(self, shape):
        _expect_rank(self, shape, 1)
        if shape[0] != self.expected_input:
            raise DimensionError(f"layer {self.name!r}: expects {self.expected_input} inputs, got {shape[0]}")
        return (self.out_features,)

    @property
    def expected_input(self) -> int:
        return self.in_features

    def _project(self, x):
        return x, None

    def _unproject(self, dxp, proj_cache):
        return dxp

    def forward(self, x, training=False):
        xp, pc = self._project(x)
        z = xp @ self._weight
        if self.use_bias:
            z = z + self.params["b"]
        y = activate(self.activation, z)
        return y, (xp, pc, z, y)

    def backward(self, dy, cache, need_dx=True):
        xp, pc, z, y = cache
        dz = activate_backward(self.activation, dy, z, y)
        grads = {"W": xp.T @ dz}
        if self.use_bias:
            grads["b"] = dz.sum(axis=0)
        dx = self._unproject(dz @ self._weight.T, pc) if need_dx else None
        return (dx,), grads


class PcaDense(Dense):
    """Dense layer acting on PCA coordinates of its input: ``act(((x - mu) U) W + b)``.

    ``U`` (m x m_e) and ``mu`` (m) are frozen buffers; only ``W`` (m_e x n)
    and ``b`` are trained.
    """

    kind = "pca_dense"

    def __init__(self, name, mu: np.ndarray, U: np.ndarray, W: np.ndarray, b: np.ndarray,
                 activation: str = "none", inputs=None):
        Layer.__init__(self, name, inputs)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if U.shape[1] != W.shape[0] or U.shape[0] != mu.shape[0] or b.shape[0] != W.shape[1]:
            raise DimensionError(f"layer {name!r}: inconsistent PCA shapes mu={mu.shape} U={U.shape} "
                                 f"W={W.shape} b={b.shape}")
        self.activation = activation
        self.use_bias = True
        self.params["W"] = W
        self.params["b"] = b
        self.buffers["mu"] = mu
        self.buffers["U"] = U

    @property
    def expected_input(self) -> int:
        return self.buffers["U"].shape[0]

    @property
    def n_components(self) -> int:
        return self.buffers["U"].shape[1]

    def hyper(self):
        return {"activation": self.activation}

    def _project(self, x):
        return (x - self.buffers["mu"]) @ self.buffers["U"], None

    def _unproject(self, dxp, proj_cache):
        return dxp @ self.buffers["U"].T


class Conv2D(Layer):
    kind = "conv2d"
    weight_keys = ("W",)

    def __init__(self, name, in_channels: int, out_channels: int, kernel_size=(3, 3), stride: int = 1,
                 padding: str = "same", use_bias: bool = True, activation: str = "none",
                 inputs=None, dtype=np.float32):
        super().__init__(name, inputs)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if isinstance(kernel_size, int):
            kernel_size = (kernel_size, kernel_size)
        self.stride = int(stride)
        self.padding = padding
        self.use_bias = use_bias
        self.activation = activation
        self.params["W"] = np.zeros((*kernel_size, in_channels, out_channels), dtype=dtype)
        if use_bias:
            self.params["b"] = np.zeros(out_channels, dtype=dtype)

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.params["W"].shape[:2]

    @property
    def in_channels(self) -> int:
        return self.params["W"].shape[2]

    @property
    def out_channels(self) -> int:
        return self.params["W"].shape[3]

    @property
    def expected_input(self) -> int:
        return self.in_channels

    def hyper(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": list(self.kernel_size), "stride": self.stride, "padding": self.padding,
                "use_bias": self.use_bias, "activation": self.activation}

    def output_shape(self, shape):
        _expect_rank(self, shape, 3)
        h, w, m = shape
        if m != self.expected_input:
            raise DimensionError(f"layer {self.name!r}: expects {self.expected_input} channels, got {m}")
        k1, k2 = self.kernel_size
        out_h, out_w, _ = conv_geometry(h, w, k1, k2, self.stride, self.padding)
        return (out_h, out_w, self.out_channels)

    def pad_values(self):
        return 0.0

    def _project(self, x):
        return x, None

    def _unproject(self, dxp, proj_cache):
        return dxp

    def forward(self, x, training=False):
        xp, pc = self._project(x)
        W = self.params["W"]
        k1, k2, m, n = W.shape
        out_h, out_w, pads = conv_geometry(xp.shape[1], xp.shape[2], k1, k2, self.stride, self.padding)
        xpad = pad_image(xp, pads, self.pad_values())
        cols = im2col(xpad, k1, k2, self.stride, out_h, out_w)
        z = cols @ W.reshape(k1 * k2 * m, n)
        if self.use_bias:
            z += self.params["b"]
        z = z.reshape(xp.shape[0], out_h, out_w, n)
        y = activate(self.activation, z)
        return y, (cols, xpad.shape, pads, (out_h, out_w), pc, z, y)

    def backward(self, dy, cache, need_dx=True):
        cols, padded_shape, pads, (out_h, out_w), pc, z, y = cache
        W = self.params["W"]
        k1, k2, m, n = W.shape
        dz = activate_backward(self.activation, dy, z, y).reshape(-1, n)
        grads = {"W": (cols.T @ dz).reshape(W.shape)}
        if self.use_bias:
            grads["b"] = dz.sum(axis=0)
        if not need_dx:
            return (None,), grads
        dcols = dz @ W.reshape(k1 * k2 * m, n).T
        dxpad = col2im(dcols, padded_shape, k1, k2, self.stride, out_h, out_w)
        (top, _), (left, _) = pads
        h = padded_shape[1] - pads[0][0] - pads[0][1]
        w = padded_shape[2] - pads[1][0] - pads[1][1]
        dxp = dxpad[:, top:top + h, left:left + w, :]
        return (self._unproject(dxp, pc),), grads


class PcaConv2D(Conv2D):
    """Convolution over principal filters.

    Each input depth vector is mapped to ``(x - mu) U`` before a convolution
    with ``W`` (k1 x k2 x m_e x n). Out-of-bounds pixels take the value
    ``-mu U`` per channel, which is what zero padding of the original input
    becomes in PCA coordinates.
    """

    kind = "pca_conv2d"

    def __init__(self, name, mu: np.ndarray, U: np.ndarray, W: np.ndarray, b: np.ndarray,
                 stride: int = 1, padding: str = "same", activation: str = "none", inputs=None):
        Layer.__init__(self, name, inputs)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if U.shape[1] != W.shape[2] or U.shape[0] != mu.shape[0] or b.shape[0] != W.shape[3]:
            raise DimensionError(f"layer {name!r}: inconsistent PCA shapes mu={mu.shape} U={U.shape} "
                                 f"W={W.shape} b={b.shape}")
        self.stride = int(stride)
        self.padding = padding
        self.use_bias = True
        self.activation = activation
        self.params["W"] = W
        self.params["b"] = b
        self.buffers["mu"] = mu
        self.buffers["U"] = U

    @property
    def expected_input(self) -> int:
        return self.buffers["U"].shape[0]

    @property
    def n_components(self) -> int:
        return self.buffers["U"].shape[1]

    def hyper(self):
        return {"stride": self.stride, "padding": self.padding, "activation": self.activation}

    def pad_values(self):
        return -(self.buffers["mu"] @ self.buffers["U"])

    def _project(self, x):
        n, h, w, m = x.shape
        flat = (x.reshape(-1, m) - self.buffers["mu"]) @ self.buffers["U"]
        return flat.reshape(n, h, w, -1), None

    def _unproject(self, dxp, proj_cache):
        n, h, w, me = dxp.shape
        return (dxp.reshape(-1, me) @ self.buffers["U"].T).reshape(n, h, w, -1)


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis but the last."""

    kind = "batchnorm"

    def __init__(self, name, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 inputs=None, dtype=np.float32):
        super().__init__(name, inputs)
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["moving_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["moving_var"] = np.ones(channels, dtype=dtype)

    @property
    def channels(self) -> int:
        return self.params["gamma"].shape[0]

    def hyper(self):
        return {"channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def output_shape(self, shape):
        if shape[-1] != self.channels:
            raise DimensionError(f"layer {self.name!r}: expects {self.channels} channels, got {shape[-1]}")
        return shape

    def forward(self, x, training=False):
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            mom = self.momentum
            mm, mv = self.buffers["moving_mean"], self.buffers["moving_var"]
            mm[...] = mom * mm + (1 - mom) * mean
            mv[...] = mom * mv + (1 - mom) * var
        else:
            mean = self.buffers["moving_mean"]
            var = self.buffers["moving_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        y = xhat * self.params["gamma"] + self.params["beta"]
        return y, (xhat, inv, training)

    def backward(self, dy, cache, need_dx=True):
        xhat, inv, training = cache
        axes = tuple(range(dy.ndim - 1))
        grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        if not need_dx:
            return (None,), grads
        dxhat = dy * self.params["gamma"]
        if training:
            count = dy.size // dy.shape[-1]
            dx = inv / count * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        return (dx,), grads


class Activation(Layer):
    kind = "activation"

    def __init__(self, name, activation: str, inputs=None):
        super().__init__(name, inputs)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    def hyper(self):
        return {"activation": self.activation}

    def output_shape(self, shape):
        return shape

    def forward(self, x, training=False):
        y = activate(self.activation, x)
        return y, (x, y)

    def backward(self, dy, cache, need_dx=True):
        x, y = cache
        return (activate_backward(self.activation, dy, x, y),), {}


class MaxPool2(Layer):
    kind = "maxpool2"

    def output_shape(self, shape):
        _expect_rank(self, shape, 3)
        h, w, m = shape
        if h < 2 or w < 2:
            raise DimensionError(f"layer {self.name!r}: spatial extent {h}x{w} is smaller than the 2x2 window")
        return (h // 2, w // 2, m)

    def forward(self, x, training=False):
        n, h, w, m = x.shape
        h2, w2 = h // 2, w // 2
        win = x[:, : 2 * h2, : 2 * w2].reshape(n, h2, 2, w2, 2, m).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(n, h2, w2, m, 4)
        arg = win.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, dy, cache, need_dx=True):
        shape, arg = cache
        n, h, w, m = shape
        h2, w2 = h // 2, w // 2
        win = np.zeros((n, h2, w2, m, 4), dtype=dy.dtype)
        np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
        win = win.reshape(n, h2, w2, m, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, m)
        dx = np.zeros(shape, dtype=dy.dtype)
        dx[:, : 2 * h2, : 2 * w2] = win
        return (dx,), {}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def output_shape(self, shape):
        _expect_rank(self, shape, 3)
        return (shape[2],)

    def forward(self, x, training=False):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dy, cache, need_dx=True):
        n, h, w, m = cache
        dx = np.broadcast_to(dy[:, None, None, :] / (h * w), cache).copy()
        return (dx,), {}


class Flatten(Layer):
    """Row-major flatten of (h, w, m) into h*w*m; flat index ``(y*w + x)*m + c``."""

    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, training=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, need_dx=True):
        return (dy.reshape(cache),), {}


class Add(Layer):
    """Elementwise sum of two or more inputs (residual connections)."""

    kind = "add"

    def output_shape(self, *shapes):
        if len(shapes) < 2 or any(s != shapes[0] for s in shapes):
            raise DimensionError(f"layer {self.name!r}: cannot add shapes {shapes}")
        return shapes[0]

    def forward(self, *xs, training=False):
        out = xs[0].copy()
        for x in xs[1:]:
            out += x
        return out, len(xs)

    def backward(self, dy, cache, need_dx=True):
        return tuple(dy for _ in range(cache)), {}


LAYER_TYPES: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Dense, PcaDense, Conv2D, PcaConv2D, BatchNorm, Activation,
                              MaxPool2, GlobalAvgPool, Flatten, Add)
}

WEIGHT_LAYERS = (Dense, Conv2D)


def layer_from_config(cfg: dict[str, Any], tensors: dict[str, np.ndarray]) -> Layer:
    """Rebuild a layer from :meth:`Layer.config` output and its tensors."""
    cfg = dict(cfg)
    kind = cfg.pop("type")
    name = cfg.pop("name")
    inputs = tuple(cfg.pop("inputs")) or None
    cls = LAYER_TYPES[kind]
    if cls in (PcaDense, PcaConv2D):
        return cls(name, mu=tensors["mu"], U=tensors["U"], W=tensors["W"], b=tensors["b"],
                   inputs=inputs, **cfg)
    if "kernel_size" in cfg:
        cfg["kernel_size"] = tuple(cfg["kernel_size"])
    layer = cls(name, inputs=inputs, **cfg)
    for key, value in tensors.items():
        target = layer.params if key in layer.params else layer.buffers
        if key not in target:
            raise KeyError(f"layer {name!r} has no tensor {key!r}")
        target[key] = value
    return layer
