"""Reference architectures.

``conv4`` and the CIFAR ResNets (``resnet20``, ``resnet110``,
``wideresnet20``) follow the published layer tables; ``mlp``,
``conv4-small`` and ``thinresnet8`` are reduced variants for CPU-sized
experiments.

Layer names are stable because transform plans refer to them:

* MLP: ``flatten, fc1, output``
* Conv4: ``conv1..conv4, pool1, pool2, flatten, fc1, fc2, output``
* ResNets: ``conv0, bn0, relu0`` then per stage ``s`` and block ``b``
  ``s{s}b{b}_conv1, _bn1, _relu1, _conv2, _bn2`` (plus ``_proj, _projbn``
  on the first block of every stage), ``_add, _relu``; then ``pool`` and
  ``output``.
"""
from __future__ import annotations

import numpy as np

from pcnet.exceptions import ConfigError
from pcnet.nn.layers import (
    Activation,
    Add,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    Layer,
    MaxPool2,
)
from pcnet.nn.network import Network


def init_params(net: Network, seed: int | np.random.Generator = 0) -> Network:
    """He-normal for convolutions, Glorot-uniform for dense layers, zero biases."""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if type(layer) is Conv2D:
            W = layer.params["W"]
            fan_in = int(np.prod(W.shape[:3]))
            W[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=W.shape)
        elif type(layer) is Dense:
            W = layer.params["W"]
            limit = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
            W[...] = rng.uniform(-limit, limit, size=W.shape)
        for key in ("b",):
            if key in layer.params:
                layer.params[key][...] = 0
    return net


def mlp(hidden: int = 256, input_shape=(28, 28, 1), classes: int = 10, activation: str = "sigmoid",
        dtype=np.float32) -> Network:
    m = int(np.prod(input_shape))
    return Network([
        Flatten("flatten"),
        Dense("fc1", m, hidden, activation, dtype=dtype),
        Dense("output", hidden, classes, "none", dtype=dtype),
    ], input_shape)


def conv4(filters=(64, 64, 128, 128), dense=(256, 256), input_shape=(32, 32, 3), classes: int = 10,
          dtype=np.float32) -> Network:
    h, w, c = input_shape
    f1, f2, f3, f4 = filters
    flat = (h // 4) * (w // 4) * f4
    return Network([
        Conv2D("conv1", c, f1, 3, activation="relu", dtype=dtype),
        Conv2D("conv2", f1, f2, 3, activation="relu", dtype=dtype),
        MaxPool2("pool1"),
        Conv2D("conv3", f2, f3, 3, activation="relu", dtype=dtype),
        Conv2D("conv4", f3, f4, 3, activation="relu", dtype=dtype),
        MaxPool2("pool2"),
        Flatten("flatten"),
        Dense("fc1", flat, dense[0], "relu", dtype=dtype),
        Dense("fc2", dense[0], dense[1], "relu", dtype=dtype),
        Dense("output", dense[1], classes, "none", dtype=dtype),
    ], input_shape)


def resnet(blocks_per_stage: int = 3, widths=(16, 32, 64), stem: int | None = None,
           input_shape=(32, 32, 3), classes: int = 10, dtype=np.float32) -> Network:
    """CIFAR-style ResNet with a projection shortcut opening every stage."""
    stem = widths[0] if stem is None else stem
    layers: list[Layer] = [
        Conv2D("conv0", input_shape[2], stem, 3, use_bias=False, dtype=dtype),
        BatchNorm("bn0", stem, dtype=dtype),
        Activation("relu0", "relu"),
    ]
    prev, prev_c = "relu0", stem
    for s, width in enumerate(widths, start=1):
        for b in range(1, blocks_per_stage + 1):
            p = f"s{s}b{b}"
            stride = 2 if (b == 1 and s > 1) else 1
            layers += [
                Conv2D(f"{p}_conv1", prev_c, width, 3, stride=stride, use_bias=False, inputs=(prev,), dtype=dtype),
                BatchNorm(f"{p}_bn1", width, dtype=dtype),
                Activation(f"{p}_relu1", "relu"),
                Conv2D(f"{p}_conv2", width, width, 3, use_bias=False, dtype=dtype),
                BatchNorm(f"{p}_bn2", width, dtype=dtype),
            ]
            shortcut = prev
            if b == 1:
                layers += [
                    Conv2D(f"{p}_proj", prev_c, width, 1, stride=stride, use_bias=False, inputs=(prev,),
                           dtype=dtype),
                    BatchNorm(f"{p}_projbn", width, dtype=dtype),
                ]
                shortcut = f"{p}_projbn"
            layers += [
                Add(f"{p}_add", inputs=(f"{p}_bn2", shortcut)),
                Activation(f"{p}_relu", "relu"),
            ]
            prev, prev_c = f"{p}_relu", width
    layers += [GlobalAvgPool("pool"), Dense("output", prev_c, classes, "none", dtype=dtype)]
    return Network(layers, input_shape)


ARCHITECTURES = {
    "mlp": lambda **kw: mlp(**kw),
    "conv4": lambda **kw: conv4(**kw),
    "conv4-small": lambda **kw: conv4(filters=(32, 32, 64, 64), dense=(256, 256), **kw),
    "resnet20": lambda **kw: resnet(3, (16, 32, 64), **kw),
    "resnet110": lambda **kw: resnet(18, (16, 32, 64), **kw),
    "wideresnet20": lambda **kw: resnet(3, (64, 128, 256), **kw),
    "thinresnet8": lambda **kw: resnet(1, (8, 16, 32), **kw),
}


def build_network(arch: str, seed: int | None = 0, dtype=np.float32, **kw) -> Network:
    """Build a named architecture; ``seed=None`` leaves all weights at zero."""
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}; available: {', '.join(sorted(ARCHITECTURES))}")
    net = ARCHITECTURES[arch](dtype=dtype, **kw)
    if seed is not None:
        init_params(net, seed)
    return net
