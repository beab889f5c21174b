"""Transform plans and their JSON schema.

A plan file looks like::

    {
      "transform_epoch": 2,
      "post_epochs": 18,
      "layers": {
        "conv1": [null, 40],
        "conv2": [20, 50],
        "fc1":   [{"threshold": 0.1}, null],
        "output": {"input": 30, "output": null}
      }
    }

Each layer maps to ``[input_cfg, output_cfg]`` (or an object with those
keys). An input config is ``null`` (no input-based transformation), an
integer number of PCA directions to keep, or ``{"threshold": tau}`` (a bare
float is read as a threshold too). An output config is ``null``, an integer
number of units/filters to keep, or ``{"threshold": t}`` on the L1 scores.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from pcnet.exceptions import PlanError


@dataclass(frozen=True)
class DimConfig:
    """Either a fixed count or a threshold."""

    count: int | None = None
    threshold: float | None = None

    def __post_init__(self):
        if (self.count is None) == (self.threshold is None):
            raise PlanError("a dimension config needs exactly one of count or threshold")
        if self.count is not None and self.count < 1:
            raise PlanError(f"dimension count must be >= 1, got {self.count}")
        if self.threshold is not None and self.threshold < 0:
            raise PlanError(f"threshold must be >= 0, got {self.threshold}")

    @classmethod
    def parse(cls, raw: Any) -> "DimConfig | None":
        if raw is None or isinstance(raw, DimConfig):
            return raw
        if isinstance(raw, bool):
            raise PlanError(f"invalid dimension config {raw!r}")
        if isinstance(raw, int):
            return cls(count=raw)
        if isinstance(raw, float):
            return cls(threshold=raw)
        if isinstance(raw, dict):
            if set(raw) == {"threshold"}:
                return cls(threshold=float(raw["threshold"]))
            if set(raw) & {"count", "keep"} and len(raw) == 1:
                return cls(count=int(raw.get("count", raw.get("keep"))))
        raise PlanError(f"invalid dimension config {raw!r}")

    def to_json(self):
        return self.count if self.count is not None else {"threshold": self.threshold}


@dataclass(frozen=True)
class LayerPlan:
    input: DimConfig | None = None
    output: DimConfig | None = None


@dataclass
class TransformPlan:
    """Which layers get the input- and output-based transformations, and when.

    ``inputs`` (I) and ``outputs`` (O) are derived from ``layers``.
    """

    layers: dict[str, LayerPlan] = field(default_factory=dict)
    transform_epoch: int = 1
    post_epochs: int = 0

    @property
    def inputs(self) -> set[str]:
        return {name for name, lp in self.layers.items() if lp.input is not None}

    @property
    def outputs(self) -> set[str]:
        return {name for name, lp in self.layers.items() if lp.output is not None}

    @classmethod
    def from_dict(cls, raw: dict) -> "TransformPlan":
        if not isinstance(raw, dict) or "layers" not in raw:
            raise PlanError("plan must be an object with a 'layers' entry")
        unknown = set(raw) - {"layers", "transform_epoch", "post_epochs"}
        if unknown:
            raise PlanError(f"unknown plan keys: {sorted(unknown)}")
        layers = {}
        for name, entry in raw["layers"].items():
            if isinstance(entry, dict):
                extra = set(entry) - {"input", "output"}
                if extra:
                    raise PlanError(f"layer {name!r}: unknown keys {sorted(extra)}")
                inp, out = entry.get("input"), entry.get("output")
            elif isinstance(entry, (list, tuple)) and len(entry) == 2:
                inp, out = entry
            else:
                raise PlanError(f"layer {name!r}: expected [input, output] or an object")
            try:
                layers[name] = LayerPlan(DimConfig.parse(inp), DimConfig.parse(out))
            except PlanError as exc:
                raise PlanError(f"layer {name!r}: {exc}") from None
        K = raw.get("transform_epoch", 1)
        T = raw.get("post_epochs", 0)
        if not isinstance(K, int) or K < 0 or not isinstance(T, int) or T < 0:
            raise PlanError("transform_epoch and post_epochs must be non-negative integers")
        return cls(layers, K, T)

    def to_dict(self) -> dict:
        return {
            "transform_epoch": self.transform_epoch,
            "post_epochs": self.post_epochs,
            "layers": {
                name: [None if lp.input is None else lp.input.to_json(),
                       None if lp.output is None else lp.output.to_json()]
                for name, lp in self.layers.items()
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def load_plan(path: str | Path) -> TransformPlan:
    path = Path(path)
    if not path.is_file():
        raise PlanError(f"plan file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PlanError(f"{path}: invalid JSON ({exc})") from None
    return TransformPlan.from_dict(raw)


def uniform_plan(layers, input_cfg=None, output_cfg=None, transform_epoch: int = 1,
                 post_epochs: int = 0) -> TransformPlan:
    """Same configuration for every named layer."""
    lp = LayerPlan(DimConfig.parse(input_cfg), DimConfig.parse(output_cfg))
    return TransformPlan({name: lp for name in layers}, transform_epoch, post_epochs)


# Conv4-PCN from the Conv4 training details (input dims, kept outputs).
CONV4_PCN = TransformPlan.from_dict({
    "transform_epoch": 2,
    "post_epochs": 18,
    "layers": {
        "conv1": [None, 40], "conv2": [20, 50], "conv3": [40, 100], "conv4": [80, 60],
        "fc1": [50, 90], "fc2": [40, 180], "output": [30, None],
    },
})
