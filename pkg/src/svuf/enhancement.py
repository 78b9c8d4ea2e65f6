"""Ratio-mask speech enhancement: a dilated CNN estimates M in (0, 1) and the
enhanced features are X * M. There is no separate enhancement loss; the mask
is trained through whatever loss sits downstream."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import BatchNorm, Conv, Module, Tensor
from .tensor import functional as F
from .tensor.nn import same_padding


@dataclass
class MaskNetConfig:
    layers: int = 10
    channels: int = 16
    kernel: int = 3
    dilation: int = 2


class MaskNet(Module):
    """``layers`` dilated 3x3 conv+BN+ReLU blocks followed by a 1x1 conv and sigmoid."""

    def __init__(self, cfg: MaskNetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        k = (cfg.kernel, cfg.kernel)
        dil = (cfg.dilation, cfg.dilation)
        pad = same_padding(k, dil)
        self.convs, self.bns = [], []
        c_in = 1
        for _ in range(cfg.layers):
            self.convs.append(Conv(c_in, cfg.channels, k, rng, dilation=dil, padding=pad))
            self.bns.append(BatchNorm(cfg.channels))
            c_in = cfg.channels
        self.head = Conv(c_in, 1, (1, 1), rng, gain=1.0)
        # ablation hook: when set the mask is exactly all ones
        self.force_identity = False

    def forward(self, x: Tensor) -> Tensor:
        """``x`` is (N, d, T); returns the mask M with the same shape."""
        if self.force_identity:
            return Tensor(np.ones(x.shape))
        n, d, t = x.shape
        h = x.reshape(n, 1, d, t)
        for conv, bn in zip(self.convs, self.bns):
            h = F.relu(bn(conv(h)))
        return F.sigmoid(self.head(h)).reshape(n, d, t)

    def receptive_field(self) -> int:
        return 1 + self.cfg.layers * self.cfg.dilation * (self.cfg.kernel - 1)


def mask_apply(x, m):
    """Enhanced features X * M; accepts arrays or tensors of identical shape."""
    if x.shape != m.shape:
        raise ValueError(f"mask shape {m.shape} does not match features {x.shape}")
    return x * m
