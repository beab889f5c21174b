"""Layer graph, forward/backward passes, parameter counting and activation capture."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pcnet.exceptions import DimensionError, NumericalError
from pcnet.nn.layers import (
    Add,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    Layer,
    PcaConv2D,
    PcaDense,
    softmax,
)

INPUT = "input"


@dataclass
class ForwardCache:
    outputs: dict[str, np.ndarray]
    caches: dict[str, object]
    training: bool

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[_LAST]


_LAST = "__logits__"


@dataclass
class ResidualGroup:
    """Layers whose outputs end up summed into one activation tensor."""

    producers: list[str]
    projection: str | None = None
    stage: int | None = None


@dataclass
class ParamCount:
    trainable: int
    total: int

    def __iter__(self):
        return iter((self.trainable, self.total))


class Network:
    """An ordered list of layers wired as a DAG.

    Each layer names its inputs; ``None`` means "the previous layer" (or the
    network input for the first layer). The last layer's output is the
    logits tensor.

    Args:
        layers: layers in evaluation order.
        input_shape: per-sample input shape, e.g. ``(32, 32, 3)``.
        num_classes: number of output classes; inferred from the last layer.
    """

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], num_classes: int | None = None):
        self.layers: list[Layer] = list(layers)
        self.input_shape = tuple(input_shape)
        prev = INPUT
        seen = {INPUT}
        for layer in self.layers:
            if layer.name in seen:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            if layer.inputs is None:
                layer.inputs = (prev,)
            for inp in layer.inputs:
                if inp not in seen:
                    raise ValueError(f"layer {layer.name!r} reads {inp!r} before it is computed")
            seen.add(layer.name)
            prev = layer.name
        self.shapes = self.infer_shapes()
        out = self.shapes[self.layers[-1].name]
        if len(out) != 1:
            raise DimensionError(f"network output must be a vector per sample, got {out}")
        self.num_classes = num_classes if num_classes is not None else out[0]

    # -- structure ---------------------------------------------------------
    def infer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {INPUT: self.input_shape}
        for layer in self.layers:
            try:
                shapes[layer.name] = tuple(layer.output_shape(*(shapes[i] for i in layer.inputs)))
            except DimensionError as exc:
                msg = str(exc)
                if layer.name not in msg:
                    msg = f"layer {layer.name!r}: {msg}"
                raise DimensionError(msg) from None
        return shapes

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named {name!r}; available: {', '.join(self.layer_names)}")

    def __getitem__(self, name: str) -> Layer:
        return self.layer(name)

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def output_layer(self) -> Layer:
        return self.layers[-1]

    def weight_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if isinstance(layer, (Dense, Conv2D))]

    def consumers(self, tensor: str) -> list[Layer]:
        return [layer for layer in self.layers if tensor in layer.inputs]

    def replace(self, name: str, new: Layer) -> None:
        for k, layer in enumerate(self.layers):
            if layer.name == name:
                new.inputs = layer.inputs
                self.layers[k] = new
                return
        raise KeyError(name)

    def residual_groups(self) -> list[ResidualGroup]:
        """Weight layers whose outputs are tied together by ``Add`` layers."""
        from pcnet.transform.spaces import channel_spaces

        groups = []
        for stage, space in enumerate(s for s in channel_spaces(self) if len(s.producers) > 1):
            proj = [p for p in space.producers
                    if isinstance(self.layer(p), Conv2D) and self.layer(p).kernel_size == (1, 1)]
            groups.append(ResidualGroup(list(space.producers), proj[0] if proj else None, stage))
        return groups

    # -- numerics ----------------------------------------------------------
    def forward(self, x: np.ndarray, training: bool = False, keep: bool = True) -> ForwardCache:
        """Run the network on a batch; returns a cache holding logits and per-layer state."""
        x = np.asarray(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"input batch has per-sample shape {tuple(x.shape[1:])}, "
                                 f"network expects {self.input_shape}")
        outputs = {INPUT: x}
        caches = {}
        for layer in self.layers:
            try:
                y, c = layer.forward(*(outputs[i] for i in layer.inputs), training=training)
            except (ValueError, IndexError) as exc:
                raise DimensionError(f"layer {layer.name!r}: {exc}") from exc
            outputs[layer.name] = y
            if keep:
                caches[layer.name] = c
        outputs[_LAST] = outputs[self.layers[-1].name]
        return ForwardCache(outputs, caches, training)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, training=False, keep=False).logits

    def predict_proba(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        out = [softmax(self(x[i:i + batch_size]).astype(np.float64)) for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def backward(self, cache: ForwardCache, dlogits: np.ndarray) -> dict[tuple[str, str], np.ndarray]:
        """Reverse-mode pass; returns gradients keyed by ``(layer name, param name)``."""
        pending: dict[str, np.ndarray] = {self.layers[-1].name: dlogits}
        grads = {}
        for layer in reversed(self.layers):
            dy = pending.pop(layer.name, None)
            if dy is None:
                continue
            need = tuple(inp != INPUT for inp in layer.inputs)
            dxs, g = layer.backward(dy, cache.caches[layer.name], need_dx=any(need))
            for key, value in g.items():
                if not np.all(np.isfinite(value)):
                    raise NumericalError(f"non-finite gradient for {key!r} in layer {layer.name!r}")
                grads[(layer.name, key)] = value
            for inp, dx, needed in zip(layer.inputs, dxs, need):
                if not needed:
                    continue
                if inp in pending:
                    pending[inp] = pending[inp] + dx
                else:
                    pending[inp] = dx
        return grads

    def parameters(self) -> dict[tuple[str, str], np.ndarray]:
        return {(layer.name, k): v for layer in self.layers for k, v in layer.params.items()}

    def weight_parameters(self) -> dict[tuple[str, str], np.ndarray]:
        """Weight matrices/kernels only (the tensors that receive L2 regularization)."""
        return {(layer.name, k): layer.params[k]
                for layer in self.layers for k in layer.weight_keys if k in layer.params}

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for k in store:
                    store[k] = store[k].astype(dtype)
        return self

    @property
    def dtype(self):
        for layer in self.layers:
            for v in layer.params.values():
                return v.dtype
        return np.dtype(np.float32)

    def has_pca_layers(self) -> bool:
        return any(isinstance(layer, (PcaDense, PcaConv2D)) for layer in self.layers)

    def __repr__(self) -> str:
        rows = [f"  {layer!r} -> {self.shapes[layer.name]}" for layer in self.layers]
        return "Network(input={},\n{}\n)".format(self.input_shape, "\n".join(rows))


def count_params(net: Network) -> ParamCount:
    """Trainable = weights, biases and batch-norm scale/shift.

    Total additionally includes frozen PCA means and bases and batch-norm
    running statistics. Padding constants of PCA convolutions are derived
    from ``mu`` and ``U`` and are not counted.
    """
    trainable = sum(v.size for layer in net.layers for v in layer.params.values())
    frozen = sum(v.size for layer in net.layers for v in layer.buffers.values())
    return ParamCount(int(trainable), int(trainable + frozen))


def capture_activations(net: Network, batches, tensors: list[str], max_samples: int | None = None,
                        batch_size: int = 500) -> dict[str, np.ndarray]:
    """Collect the inputs of the named layers (or raw tensor names) over a dataset.

    ``tensors`` may contain layer names, in which case the captured value is
    the tensor that layer consumes, or tensor names directly (``"input"``
    or any layer's output). Image-shaped activations stay ``(N, h, w, m)``.
    The network runs in inference mode.
    """
    names = {}
    for t in tensors:
        if t == INPUT:
            names[t] = INPUT
            continue
        layer = net.layer(t)
        names[t] = layer.inputs[0]
    if isinstance(batches, np.ndarray):
        batches = [batches[i:i + batch_size] for i in range(0, len(batches), batch_size)]
    got = {t: [] for t in names}
    count = 0
    for batch in batches:
        if max_samples is not None and count >= max_samples:
            break
        if max_samples is not None:
            batch = batch[: max_samples - count]
        cache = net.forward(np.asarray(batch, dtype=net.dtype), training=False, keep=False)
        for t, src in names.items():
            got[t].append(cache.outputs[src])
        count += len(batch)
    if count < 2:
        raise DimensionError(f"need at least 2 samples to capture activations, got {count}")
    return {t: np.concatenate(v) for t, v in got.items()}


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must be {n} integers in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - shifted[rows, labels]))
    d = softmax(logits)
    d[rows, labels] -= 1
    return loss, d / n


def backward_and_step(net: Network, cache: ForwardCache, labels: np.ndarray, optimizer,
                      l2: float = 0.0) -> float:
    """Cross-entropy loss, backprop, optional L2 on weight matrices, one optimizer step.

    Only ``params`` are ever updated; PCA bases, means and batch-norm running
    statistics live in ``buffers`` and are untouched here.
    """
    loss, dlogits = softmax_cross_entropy(cache.logits, labels)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite training loss ({loss}); the run has diverged")
    grads = net.backward(cache, dlogits.astype(cache.logits.dtype))
    if l2:
        for key, w in net.weight_parameters().items():
            loss += l2 * float(np.sum(w.astype(np.float64) ** 2))
            grads[key] = grads[key] + (2 * l2) * w
    params = net.parameters()
    optimizer.step(params, grads)
    for (layer, key), value in params.items():
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"update made {key!r} in layer {layer!r} non-finite")
    return loss


def train_step(net: Network, x: np.ndarray, y: np.ndarray, optimizer, l2: float = 0.0) -> tuple[float, int]:
    """One minibatch update; returns (loss, number of correct predictions)."""
    cache = net.forward(x, training=True)
    correct = int(np.sum(np.argmax(cache.logits, axis=1) == y))
    return backward_and_step(net, cache, y, optimizer, l2), correct


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 1000) -> float:
    """Classification accuracy in inference mode."""
    if len(x) == 0:
        return float("nan")
    correct = 0
    for i in range(0, len(x), batch_size):
        logits = net(np.asarray(x[i:i + batch_size], dtype=net.dtype))
        correct += int(np.sum(np.argmax(logits, axis=1) == y[i:i + batch_size]))
    return correct / len(x)


__all__ = [
    "Add", "BatchNorm", "Flatten", "ForwardCache", "Network", "ParamCount", "ResidualGroup",
    "backward_and_step", "capture_activations", "count_params", "evaluate", "softmax_cross_entropy",
    "train_step",
]
