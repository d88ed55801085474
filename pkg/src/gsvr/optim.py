"""AdamW with per-group learning rates and a step decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .errors import InvalidParameterError


@dataclass
class SchedulerConfig:
    factor: float = 0.5
    every: int = 200

    def __post_init__(self):
        if not (0.0 < self.factor <= 1.0):
            raise InvalidParameterError("scheduler factor must be in (0, 1]")
        if self.every < 1:
            raise InvalidParameterError("scheduler period must be positive")


def lr_at(epoch: int, base: float, scheduler: SchedulerConfig) -> float:
    """Step-decayed learning rate: base * factor**(epoch // every)."""
    if epoch < 0:
        raise InvalidParameterError("epoch must be >= 0")
    return base * scheduler.factor ** (epoch // scheduler.every)


@dataclass
class AdamWConfig:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0   # decoupled; zero by default so the explicit
                                # scale regularizer is the only shrinkage

    def __post_init__(self):
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise InvalidParameterError("betas must be two values in [0, 1)")
        if self.eps <= 0:
            raise InvalidParameterError("eps must be positive")
        if self.weight_decay < 0:
            raise InvalidParameterError("weight_decay must be >= 0")


class AdamW:
    """Decoupled-weight-decay Adam over a dict of named parameter arrays.

    Parameters are updated in place. Each named array has its own base
    learning rate; `step` takes a schedule multiplier applied to all groups.
    """

    def __init__(self, params: Dict[str, np.ndarray], lrs: Dict[str, float],
                 cfg: AdamWConfig = AdamWConfig()):
        missing = set(params) - set(lrs)
        if missing:
            raise InvalidParameterError(f"no learning rate for parameter(s): {sorted(missing)}")
        if any(lr <= 0 for lr in lrs.values()):
            raise InvalidParameterError("learning rates must be positive")
        self.params = params
        self.lrs = dict(lrs)
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        beta1, beta2 = self.cfg.betas
        self.t += 1
        bc1 = 1.0 - beta1 ** self.t
        bc2 = 1.0 - beta2 ** self.t
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != p.shape:
                raise InvalidParameterError(f"gradient shape mismatch for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            lr = self.lrs[name] * lr_scale
            update = (m / bc1) / (np.sqrt(v / bc2) + self.cfg.eps)
            if self.cfg.weight_decay > 0.0:
                update = update + self.cfg.weight_decay * p
            p -= (lr * update).astype(p.dtype, copy=False)
