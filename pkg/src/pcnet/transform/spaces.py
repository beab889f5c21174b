"""Channel-space analysis of a network graph.

A *channel space* is the set of tensors whose last axis indexes the same
units: the output of a weight layer, carried unchanged through batch norm,
activations and pooling, and merged with other spaces by ``Add``. Pruning
output unit ``l`` of a producer must prune index ``l`` everywhere in its
space: every other producer summed into it, every batch norm acting on it,
and the matching input rows of every consumer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from pcnet.nn.layers import (
    Activation,
    Add,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2,
)
from pcnet.nn.network import INPUT, Network


@dataclass(frozen=True)
class Consumer:
    """A weight layer reading a space. ``expand`` > 1 means it reads a
    flattened image: row ``p * channels + c`` belongs to channel ``c``."""

    layer: str
    tensor: str
    expand: int = 1


@dataclass
class ChannelSpace:
    channels: int
    producers: list[str] = field(default_factory=list)
    tensors: list[str] = field(default_factory=list)
    batchnorms: list[str] = field(default_factory=list)
    consumers: list[Consumer] = field(default_factory=list)
    is_input: bool = False


def channel_spaces(net: Network) -> list[ChannelSpace]:
    parent: list[int] = []

    def new() -> int:
        parent.append(len(parent))
        return len(parent) - 1

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    shapes = net.shapes
    where: dict[str, tuple[int, int]] = {}   # tensor -> (space id, expand)
    producers, tensors, bns, consumers = {}, {}, {}, {}
    sid = new()
    where[INPUT] = (sid, 1)
    input_sid = sid
    tensors[sid] = [INPUT]

    for layer in net.layers:
        name = layer.name
        if isinstance(layer, (Dense, Conv2D)):
            src = layer.inputs[0]
            s, e = where[src]
            consumers.setdefault(s, []).append(Consumer(name, src, e))
            out = new()
            producers[out] = [name]
            where[name] = (out, 1)
        elif isinstance(layer, Add):
            ids = [where[i][0] for i in layer.inputs]
            root = find(ids[0])
            for other in ids[1:]:
                parent[find(other)] = root
            where[name] = (root, 1)
        elif isinstance(layer, Flatten):
            s, e = where[layer.inputs[0]]
            in_shape = shapes[layer.inputs[0]]
            spatial = e * (int(_prod(in_shape[:-1])) if len(in_shape) > 1 else 1)
            where[name] = (s, spatial)
        elif isinstance(layer, (BatchNorm, Activation, MaxPool2, GlobalAvgPool)):
            s, e = where[layer.inputs[0]]
            where[name] = (s, e)
            if isinstance(layer, BatchNorm):
                bns.setdefault(s, []).append(name)
        else:
            raise TypeError(f"channel analysis does not know layer type {type(layer).__name__}")
        if where[name][1] == 1:
            tensors.setdefault(where[name][0], []).append(name)

    merged: dict[int, ChannelSpace] = {}
    for i in range(len(parent)):
        root = find(i)
        space = merged.get(root)
        if space is None:
            # channel count of the space: last extent of any member tensor
            space = merged[root] = ChannelSpace(channels=0, is_input=False)
        space.producers += producers.get(i, [])
        space.tensors += tensors.get(i, [])
        space.batchnorms += bns.get(i, [])
        space.consumers += consumers.get(i, [])
        if i == input_sid:
            space.is_input = True
    order = {name: k for k, name in enumerate(net.layer_names)}
    out = []
    for space in merged.values():
        if space.tensors:
            space.channels = shapes[space.tensors[0]][-1]
        for attr in ("producers", "batchnorms"):
            getattr(space, attr).sort(key=order.__getitem__)
        space.consumers.sort(key=lambda c: order[c.layer])
        out.append(space)
    return out


def _prod(xs) -> int:
    p = 1
    for x in xs:
        p *= x
    return p


def space_of_producer(spaces: list[ChannelSpace], layer: str) -> ChannelSpace:
    for space in spaces:
        if layer in space.producers:
            return space
    raise KeyError(layer)
