"""Voice activity detection: frame-wise VAD networks, an energy baseline, hard
frame filtering, the 1D-CNN synchronizer and soft-VAD weighting of feature maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .features import context_indices
from .tensor import LSTM, BatchNorm, Conv, Linear, Module, Tensor
from .tensor import functional as F
from .tensor.ops import max_pool

VAD_ARCHS = ("dnn", "lstm", "cldnn")


class UnverifiableUtterance(ValueError):
    """Raised when hard VAD leaves no frames to embed."""


@dataclass
class VadNetConfig:
    arch: str = "dnn"
    feature_dim: int = 64
    context: int = 11
    dnn_hidden: tuple[int, ...] = (64, 64)
    lstm_layers: int = 3
    lstm_hidden: int = 42
    truncate: int = 50
    cldnn_filters: int = 42
    cldnn_kernel: int = 8
    cldnn_pool: int = 3
    cldnn_hidden: int = 42

    def __post_init__(self):
        if self.arch not in VAD_ARCHS:
            raise ValueError(f"unknown VAD architecture {self.arch!r}; expected one of {VAD_ARCHS}")
        if self.context < 1 or self.context % 2 == 0:
            raise ValueError("context must be a positive odd number")
        self.dnn_hidden = tuple(int(h) for h in self.dnn_hidden)


class VadNet(Module):
    """Frame-wise speech posterior estimator over (N, d, T) features."""

    def __init__(self, cfg: VadNetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.feature_dim
        if cfg.arch == "dnn":
            sizes = (cfg.context * d,) + cfg.dnn_hidden
            self.hidden = [Linear(a, b, rng, gain=2.0) for a, b in zip(sizes[:-1], sizes[1:])]
            self.out = Linear(sizes[-1], 1, rng)
        elif cfg.arch == "lstm":
            sizes = (d,) + (cfg.lstm_hidden,) * cfg.lstm_layers
            self.lstms = [LSTM(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
            self.out = Linear(cfg.lstm_hidden, 1, rng)
        else:
            k = cfg.cldnn_kernel
            # frequency padded so the conv keeps d bins ahead of the pool
            self.conv = Conv(1, cfg.cldnn_filters, (1, k), rng, padding=((0, 0), ((k - 1) // 2, k // 2)))
            pooled = cfg.cldnn_filters * (d // cfg.cldnn_pool)
            self.lstms = [LSTM(pooled, cfg.lstm_hidden, rng)]
            self.fc = Linear(cfg.lstm_hidden, cfg.cldnn_hidden, rng, gain=2.0)
            self.out = Linear(cfg.cldnn_hidden, 1, rng)

    def _recurrent(self, h: Tensor) -> Tensor:
        truncate = self.cfg.truncate if self.training else None
        for lstm in self.lstms:
            h, _ = lstm(h, truncate=truncate)
        return h

    def forward(self, x: Tensor) -> Tensor:
        """``x`` is (N, d, T); returns speech posteriors q of shape (N, T)."""
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        n, d, t = x.shape
        if d != self.cfg.feature_dim:
            raise ValueError(f"VAD expects {self.cfg.feature_dim} feature dims, got {d}")
        frames = x.transpose(0, 2, 1)  # (N, T, d)
        arch = self.cfg.arch
        if arch == "dnn":
            h = frames[:, context_indices(t, self.cfg.context), :].reshape(n, t, -1)
            for layer in self.hidden:
                h = F.relu(layer(h))
        elif arch == "lstm":
            h = self._recurrent(frames)
        else:
            p = self.cfg.cldnn_pool
            c = F.relu(self.conv(frames.reshape(n, 1, t, d)))
            c = max_pool(c, (1, p), (1, p))  # (N, filters, T, d // p)
            h = self._recurrent(c.transpose(0, 2, 1, 3).reshape(n, t, -1))
            h = F.relu(self.fc(h))
        return F.sigmoid(self.out(h)).reshape(n, t)


def vad_forward(net: VadNet, features: Union[np.ndarray, Tensor]) -> Tensor:
    return net(features if isinstance(features, Tensor) else Tensor(features))


def energy_vad(features: np.ndarray, percentile: float = 30.0) -> np.ndarray:
    """Label a frame speech iff its mean log energy exceeds the given percentile.

    ``features`` is (d, T). Percentile 0 labels every frame as speech.
    """
    energy = np.asarray(features, dtype=np.float64).mean(axis=0)
    if percentile <= 0:
        return np.ones(energy.shape, dtype=bool)
    if np.ptp(energy) == 0:
        return np.zeros(energy.shape, dtype=bool)
    return energy > np.percentile(energy, percentile)


def hard_vad_filter(features: np.ndarray, q: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Keep the frames (columns of a (d, T) matrix) whose posterior is >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    q = np.asarray(q)
    if q.shape != (features.shape[-1],):
        raise ValueError(f"posterior length {q.shape} does not match {features.shape[-1]} frames")
    keep = q >= threshold
    if not keep.any():
        raise UnverifiableUtterance("hard VAD removed every frame")
    return features[..., keep]


@dataclass
class SynchronizerConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)


class Synchronizer(Module):
    """Three conv blocks that halve q's length while tracking the extractor.

    Each block is conv(k, s1) -> conv(k, s2) -> conv(1) with BN+ReLU after the
    first two; the block's 1-channel output passes through a sigmoid.
    """

    def __init__(self, cfg: SynchronizerConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        k = cfg.kernel
        self.convs_a, self.bns_a, self.convs_b, self.bns_b, self.heads = [], [], [], [], []
        c_in = 1
        for c in cfg.channels:
            self.convs_a.append(Conv(c_in, c, (k,), rng, padding=(k - 1) // 2))
            self.bns_a.append(BatchNorm(c))
            # (1, 0) padding gives floor(L / 2) for every L with k = 3
            self.convs_b.append(Conv(c, c, (k,), rng, stride=2, padding=(((k - 1) // 2, 0),)))
            self.bns_b.append(BatchNorm(c))
            self.heads.append(Conv(c, 1, (1,), rng, gain=1.0))
            c_in = c

    def forward(self, q: Tensor) -> list[Tensor]:
        """``q`` is (N, T); returns [q0, q1, q2, q3] with q0 = q."""
        if q.ndim == 1:
            q = q.reshape(1, -1)
        n, t = q.shape
        if t < 2 ** len(self.cfg.channels):
            raise ValueError(f"synchronizer needs at least {2 ** len(self.cfg.channels)} frames, got {t}")
        out = [q]
        h = q.reshape(n, 1, t)
        for conv_a, bn_a, conv_b, bn_b, head in zip(self.convs_a, self.bns_a, self.convs_b, self.bns_b, self.heads):
            h = F.relu(bn_a(conv_a(h)))
            h = F.relu(bn_b(conv_b(h)))
            out.append(F.sigmoid(head(h)).reshape(n, -1))
        return out


def soft_vad_apply(maps: Sequence[Tensor], posteriors: Sequence[Optional[Tensor]]) -> list[Tensor]:
    """H = P * q broadcast over every axis but batch and time; None leaves a map alone."""
    if len(maps) != len(posteriors):
        raise ValueError(f"{len(maps)} feature maps but {len(posteriors)} posterior vectors")
    out = []
    for p, q in zip(maps, posteriors):
        if q is None:
            out.append(p)
            continue
        if q.ndim == 1:
            q = q.reshape(1, -1)
        if q.shape[-1] != p.shape[-1] or q.shape[0] not in (1, p.shape[0]):
            raise ValueError(
                f"posterior shape {q.shape} does not match map batch/time extent {(p.shape[0], p.shape[-1])}"
            )
        out.append(p * q.reshape((q.shape[0],) + (1,) * (p.ndim - 2) + (q.shape[-1],)))
    return out


def write_frame_labels(path: Union[str, Path], labels: dict[str, np.ndarray]) -> None:
    """CSV ``utt_id,frame_index,label`` for standalone VAD evaluation."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utt_id", "frame_index", "label"])
        for utt_id, lab in labels.items():
            for i, v in enumerate(np.asarray(lab)):
                writer.writerow([utt_id, i, int(v)])
