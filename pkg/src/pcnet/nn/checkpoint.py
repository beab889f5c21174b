"""PCNC checkpoint container.

Layout (little-endian)::

    b"PCNC" | version u16 | manifest length u32 | manifest (UTF-8 JSON) |
    tensor count u32 | per tensor: name length u16, name, PCNT record |
    CRC-64/XZ of everything above, u64

The manifest lists the layer configs in order, the input shape, optimizer
hyper-parameters, the epoch counter, the RNG state and arbitrary metadata.
Tensor names are ``layer/key`` for network tensors and
``opt:layer/param/slot`` for optimizer state.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from pcnet.exceptions import CheckpointError
from pcnet.nn.layers import layer_from_config
from pcnet.nn.network import Network
from pcnet.nn.optim import Optimizer, make_optimizer
from pcnet.tensor.io import read_tensor, tensor_to_bytes

MAGIC = b"PCNC"
VERSION = 1
_POLY = np.uint64(0xC96C5795D7870F42)


def _crc_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ 0xC96C5795D7870F42 if crc & 1 else crc >> 1
        table[i] = crc
    return table


_TABLE = _crc_table()


@numba.njit(cache=True)
def _crc64_kernel(data, table, crc):
    for b in data:
        crc = table[(crc ^ np.uint64(b)) & np.uint64(0xFF)] ^ (crc >> np.uint64(8))
    return crc


def crc64(data: bytes) -> int:
    """CRC-64/XZ (ECMA-182 polynomial, reflected, all-ones init and xor-out)."""
    init = np.uint64(0xFFFFFFFFFFFFFFFF)
    crc = _crc64_kernel(np.frombuffer(data, dtype=np.uint8), _TABLE, init)
    return int(crc ^ init)


@dataclass
class Checkpoint:
    network: Network
    optimizer: Optimizer | None = None
    epoch: int = 0
    rng_state: dict | None = None
    metadata: dict = field(default_factory=dict)


def checkpoint_bytes(net: Network, optimizer: Optimizer | None = None, epoch: int = 0,
                     rng_state: dict | None = None, metadata: dict | None = None) -> bytes:
    manifest = {
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": [layer.config() for layer in net.layers],
        "optimizer": None if optimizer is None else {"kind": optimizer.kind, **optimizer.hyper()},
        "epoch": epoch,
        "rng_state": rng_state,
        "metadata": metadata or {},
    }
    tensors = {}
    for layer in net.layers:
        for key, value in layer.tensors().items():
            tensors[f"{layer.name}/{key}"] = value
    if optimizer is not None:
        for key, value in optimizer.state_tensors().items():
            tensors[f"opt:{key}"] = value
    body = io.BytesIO()
    text = json.dumps(manifest, sort_keys=True).encode()
    body.write(MAGIC + struct.pack("<HI", VERSION, len(text)) + text)
    body.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        raw = name.encode()
        body.write(struct.pack("<H", len(raw)) + raw + tensor_to_bytes(value))
    payload = body.getvalue()
    return payload + struct.pack("<Q", crc64(payload))


def save_checkpoint(net: Network, path: str | Path, optimizer: Optimizer | None = None, epoch: int = 0,
                    rng_state: dict | None = None, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(net, optimizer, epoch, rng_state, metadata)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 18 or data[:4] != MAGIC:
        raise CheckpointError("not a PCNC checkpoint (bad magic or truncated)")
    payload, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if crc64(payload) != stored:
        raise CheckpointError("checkpoint checksum mismatch (file is corrupt or truncated)")
    version, mlen = struct.unpack("<HI", payload[4:10])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    f = io.BytesIO(payload[10:])
    manifest = json.loads(f.read(mlen).decode())
    (count,) = struct.unpack("<I", f.read(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", f.read(2))
        name = f.read(nlen).decode()
        tensors[name] = read_tensor(f)
    if f.read(1):
        raise CheckpointError("trailing bytes in checkpoint payload")

    layers = []
    for cfg in manifest["layers"]:
        prefix = cfg["name"] + "/"
        own = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        layers.append(layer_from_config(cfg, own))
    net = Network(layers, tuple(manifest["input_shape"]), manifest["num_classes"])
    opt = None
    if manifest["optimizer"] is not None:
        hyper = dict(manifest["optimizer"])
        opt = make_optimizer(hyper.pop("kind"), **hyper)
        opt.load_state_tensors({k[4:]: v for k, v in tensors.items() if k.startswith("opt:")})
    return Checkpoint(net, opt, manifest["epoch"], manifest["rng_state"], manifest["metadata"])


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return parse_checkpoint(data)
