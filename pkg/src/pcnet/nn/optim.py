"""Optimizers and learning-rate schedules.

Optimizers update parameter arrays in place and keep per-tensor state keyed
by ``(layer name, param name)`` so that the state of individual layers can
be dropped when those layers are rewritten.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Optimizer:
    kind = "optimizer"

    def __init__(self, lr: float):
        self.lr = lr
        self.state: dict[tuple[str, str], dict[str, np.ndarray]] = {}

    def step(self, params: dict, grads: dict) -> None:
        for key, p in params.items():
            g = grads.get(key)
            if g is not None:
                self._update(key, p, g)

    def _update(self, key, p, g):
        raise NotImplementedError

    def reset(self, layers) -> None:
        """Forget accumulated state for every tensor of the given layers."""
        layers = set(layers)
        for key in [k for k in self.state if k[0] in layers]:
            del self.state[key]

    def hyper(self) -> dict:
        return {"lr": self.lr}

    def state_tensors(self) -> dict[str, np.ndarray]:
        flat = {}
        for (layer, param), slots in sorted(self.state.items()):
            for slot, value in sorted(slots.items()):
                flat[f"{layer}/{param}/{slot}"] = np.asarray(value)
        return flat

    def load_state_tensors(self, flat: dict[str, np.ndarray]) -> None:
        self.state = {}
        for name, value in flat.items():
            layer, param, slot = name.rsplit("/", 2)
            self.state.setdefault((layer, param), {})[slot] = value


class SGD(Optimizer):
    """SGD with (heavy-ball) momentum: ``v = momentum * v - lr * g; p += v``."""

    kind = "sgd"

    def __init__(self, lr: float = 0.01, momentum: float = 0.0):
        super().__init__(lr)
        self.momentum = momentum

    def hyper(self):
        return {"lr": self.lr, "momentum": self.momentum}

    def _update(self, key, p, g):
        if self.momentum:
            slots = self.state.setdefault(key, {"velocity": np.zeros_like(p)})
            v = slots["velocity"]
            v *= self.momentum
            v -= self.lr * g
            p += v
        else:
            p -= self.lr * g


class Adam(Optimizer):
    """Adam with per-tensor bias correction (a reset tensor starts from step 0 again)."""

    kind = "adam"

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def _update(self, key, p, g):
        slots = self.state.get(key)
        if slots is None:
            slots = self.state[key] = {"m": np.zeros_like(p), "v": np.zeros_like(p),
                                       "t": np.zeros((), dtype=np.float64)}
        slots["t"] = slots["t"] + 1
        t = float(slots["t"])
        m, v = slots["m"], slots["v"]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        step = self.lr * np.sqrt(1 - self.beta2 ** t) / (1 - self.beta1 ** t)
        p -= (step * m / (np.sqrt(v) + self.eps)).astype(p.dtype)


def make_optimizer(kind: str, **kw) -> Optimizer:
    kinds = {"sgd": SGD, "sgd-momentum": SGD, "adam": Adam}
    if kind not in kinds:
        raise ValueError(f"unknown optimizer {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind](**kw)


@dataclass
class StepSchedule:
    """Piecewise-constant learning rate on the global epoch clock.

    ``lr(epoch) = base * gamma ** (number of milestones <= epoch)``, with an
    optional warm-up rate for the first ``warmup_epochs`` epochs. Epochs are
    zero-based.
    """

    base: float
    milestones: list[int] = field(default_factory=list)
    gamma: float = 0.1
    warmup_lr: float | None = None
    warmup_epochs: int = 0

    def __call__(self, epoch: int) -> float:
        if self.warmup_lr is not None and epoch < self.warmup_epochs:
            return self.warmup_lr
        return self.base * self.gamma ** sum(1 for m in self.milestones if epoch >= m)
