"""SGD with momentum and Adam, with state that survives checkpointing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .nn import Parameter


@dataclass
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" (momentum) or "adam"
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    # piecewise-constant decay: multiply by ``decay_factor`` at each fraction of total steps
    decay_at: tuple[float, ...] = (0.5, 0.75)
    decay_factor: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        self.decay_at = tuple(float(x) for x in self.decay_at)


class Optimizer:
    def __init__(self, named_params: Iterable[tuple[str, Parameter]], cfg: OptimizerConfig):
        self.params: list[tuple[str, Parameter]] = list(named_params)
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.t = 0
        self.state: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"{k}": v for k, v in self.state.items()}
        out["__step__"] = np.array([float(self.t)])
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state.get("__step__", np.array([0.0]))[0])
        self.state = {k: np.array(v) for k, v in state.items() if k != "__step__"}


class SGD(Optimizer):
    """v <- momentum*v + (grad + wd*param);  param <- param - lr*v"""

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        m, wd = self.cfg.momentum, self.cfg.weight_decay
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad + wd * p.data if wd else p.grad
            v = self.state.get(name)
            v = g.copy() if v is None else m * v + g
            self.state[name] = v
            p.data = p.data - lr * v


class Adam(Optimizer):
    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.cfg.betas
        eps, wd = self.cfg.eps, self.cfg.weight_decay
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad + wd * p.data if wd else p.grad
            m = self.state.get(name + ".m", np.zeros_like(p.data))
            v = self.state.get(name + ".v", np.zeros_like(p.data))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.state[name + ".m"], self.state[name + ".v"] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def make_optimizer(named_params, cfg: OptimizerConfig) -> Optimizer:
    return (SGD if cfg.kind == "sgd" else Adam)(named_params, cfg)


def sgd_momentum_step(params, grads, velocities, cfg: OptimizerConfig, lr: Optional[float] = None):
    """Functional form over plain arrays; returns (new_params, new_velocities)."""
    lr = cfg.learning_rate if lr is None else lr
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocities):
        v = cfg.momentum * v + (g + cfg.weight_decay * p)
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


def adam_step(params, grads, moments, t: int, cfg: OptimizerConfig, lr: Optional[float] = None):
    """Functional Adam over plain arrays; ``moments`` is a list of (m, v); ``t`` counts from 1."""
    lr = cfg.learning_rate if lr is None else lr
    b1, b2 = cfg.betas
    new_p, new_m = [], []
    for p, g, (m, v) in zip(params, grads, moments):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat, vhat = m / (1 - b1**t), v / (1 - b2**t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + cfg.eps))
        new_m.append((m, v))
    return new_p, new_m
