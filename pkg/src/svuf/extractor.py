"""ResNet-34 speaker feature extractors, the feature pyramid module, global
pooling layers and the multi-scale embedding head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import BatchNorm, Conv, ConvTranspose, Linear, Module, Parameter, Tensor
from .tensor import functional as F
from .tensor.ops import max_pool
from .tensor.nn import kaiming

FEATURE_DIMS = {"fbank64": 64, "spec160": 160}
BASE_CHANNELS = (32, 64, 128, 256)
STAGE_NAMES = (2, 3, 4, 5)


@dataclass
class ResNetConfig:
    variant: str = "2d"
    width_multiplier: float = 1.0
    blocks_per_stage: tuple[int, ...] = (3, 4, 6, 3)
    input_kind: str = "fbank64"
    feature_dim: Optional[int] = None  # defaults to the input kind's dimension
    conv1_kernel: int = 7

    def __post_init__(self):
        if self.variant not in ("1d", "2d"):
            raise ValueError(f"variant must be '1d' or '2d', got {self.variant!r}")
        if self.input_kind not in FEATURE_DIMS:
            raise ValueError(f"unknown input kind {self.input_kind!r}")
        if self.width_multiplier * 32 < 4:
            raise ValueError("width_multiplier * 32 must be at least 4")
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.blocks_per_stage) != 4:
            raise ValueError("blocks_per_stage needs four entries")

    @property
    def dim(self) -> int:
        return self.feature_dim or FEATURE_DIMS[self.input_kind]

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(int(round(c * self.width_multiplier)) for c in BASE_CHANNELS)


def _k(nd: int, k: int) -> tuple[int, ...]:
    return (k,) * nd


def _down_pad(nd: int, stride: int):
    # (1, 0) padding makes a k=3 stride-2 conv produce floor(L/2) for any L
    return ((1, 0),) * nd if stride == 2 else ((1, 1),) * nd


class BasicBlock(Module):
    def __init__(self, nd: int, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv(c_in, c_out, _k(nd, 3), rng, stride=stride, padding=_down_pad(nd, stride), bias=False)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv(c_out, c_out, _k(nd, 3), rng, padding=1, bias=False)
        self.bn2 = BatchNorm(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Conv(c_in, c_out, _k(nd, 1), rng, stride=stride, bias=False)
            self.shortcut_bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.shortcut is None:
            skip = x
        else:
            skip = self.shortcut_bn(self.shortcut(x))
            skip = F.fit_to(skip, out.shape[2:], range(2, out.ndim))
        return F.relu(out + skip)


class ResNet34(Module):
    """Bottom-up pathway; ``forward`` returns the stage outputs C2..C5."""

    def __init__(self, cfg: ResNetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        nd = 2 if cfg.variant == "2d" else 1
        self.nd = nd
        ch = cfg.channels
        k1 = cfg.conv1_kernel
        self.spec_reduce = nd == 2 and cfg.input_kind == "spec160"
        if nd == 2:
            stride = (2, 1) if self.spec_reduce else 1
            self.conv1 = Conv(1, ch[0], (k1, k1), rng, stride=stride, padding=k1 // 2, bias=False)
        else:
            self.conv1 = Conv(cfg.dim, ch[0], (k1,), rng, padding=k1 // 2, bias=False)
        self.bn1 = BatchNorm(ch[0])
        blocks = []
        c_in = ch[0]
        for stage, (c_out, n_blocks) in enumerate(zip(ch, cfg.blocks_per_stage)):
            for b in range(n_blocks):
                stride = 2 if stage > 0 and b == 0 else 1
                blocks.append(BasicBlock(nd, c_in, c_out, stride, rng))
                c_in = c_out
        self.blocks = blocks

    def forward(self, x: Tensor) -> list[Tensor]:
        """``x`` is (N, d, T); returns [C2, C3, C4, C5]."""
        if x.shape[-1] < 8:
            raise ValueError(f"need at least 8 frames, got {x.shape[-1]}")
        if x.shape[1] != self.cfg.dim:
            raise ValueError(f"expected {self.cfg.dim} feature dims, got {x.shape[1]}")
        if self.nd == 2:
            x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
        out = F.relu(self.bn1(self.conv1(x)))
        if self.spec_reduce:
            # 2x2 max-pool with frequency stride 2; time padded so T is preserved
            out = max_pool(out, (2, 2), (2, 1), padding=((0, 0), (0, 1)))
        outputs = []
        i = 0
        for n_blocks in self.cfg.blocks_per_stage:
            for _ in range(n_blocks):
                out = self.blocks[i](out)
                i += 1
            outputs.append(out)
        return outputs


class FeaturePyramid(Module):
    """Top-down pathway with lateral 1x1 connections producing P2..P5."""

    def __init__(self, channels: Sequence[int], nd: int, rng: np.random.Generator):
        super().__init__()
        self.nd = nd
        inner = channels[0]
        # the merge path is linear, hence unit-gain initialization there
        self.lateral = [Conv(c, inner, _k(nd, 1), rng, gain=1.0) for c in channels]
        self.upsample = [ConvTranspose(inner, inner, _k(nd, 2), rng, stride=2) for _ in channels[:-1]]
        # the anti-aliasing convs are followed by batch norm and ReLU like every other conv block
        self.smooth = [Conv(inner, inner, _k(nd, 1), rng, bias=False) for _ in channels]
        self.smooth_bn = [BatchNorm(inner) for _ in channels]
        self.expand = [Conv(inner, c, _k(nd, 3), rng, padding=1, bias=False) for c in channels]
        self.expand_bn = [BatchNorm(c) for c in channels]

    def forward(self, stages: Sequence[Tensor]) -> list[Tensor]:
        merged: list[Optional[Tensor]] = [None] * len(stages)
        top = self.lateral[-1](stages[-1])
        merged[-1] = top
        for i in range(len(stages) - 2, -1, -1):
            lat = self.lateral[i](stages[i])
            up = self.upsample[i](top)
            up = F.fit_to(up, lat.shape[2:], range(2, lat.ndim))
            top = lat + up
            merged[i] = top
        out = []
        for i, m in enumerate(merged):
            h = F.relu(self.smooth_bn[i](self.smooth[i](m)))
            out.append(F.relu(self.expand_bn[i](self.expand[i](h))))
        return out


def _vectors(fmap: Tensor) -> Tensor:
    """(N, c, *spatial) -> (N, K, c) feature vectors h_k."""
    n, c = fmap.shape[:2]
    return fmap.reshape(n, c, -1).transpose(0, 2, 1)


POOLINGS = ("gap", "sp", "sap", "asp")


class Pooling(Module):
    """Global pooling of one feature map: gap, sp (mean+std), sap or asp."""

    def __init__(self, kind: str, channels: int, rng: np.random.Generator):
        super().__init__()
        if kind not in POOLINGS:
            raise ValueError(f"unknown pooling {kind!r}")
        self.kind = kind
        self.channels = channels
        if kind in ("sap", "asp"):
            self.W = Parameter(kaiming(rng, (channels, channels), channels, gain=1.0))
            self.b = Parameter(np.zeros(channels))
            self.v = Parameter(kaiming(rng, (channels,), channels, gain=1.0))

    @property
    def out_dim(self) -> int:
        return self.channels * (2 if self.kind in ("sp", "asp") else 1)

    def attention(self, h: Tensor) -> Tensor:
        """alpha_k = softmax_k(v . tanh(W h_k + b)); returns (N, K)."""
        e = F.tanh(h @ self.W.transpose(1, 0) + self.b) @ self.v
        return F.softmax(e, axis=1)

    def forward(self, fmap: Tensor) -> Tensor:
        if fmap.size == 0:
            raise ValueError("cannot pool an empty feature map")
        h = _vectors(fmap)
        n, k, c = h.shape
        if self.kind in ("gap", "sp"):
            mu = h.mean(axis=1)
            if self.kind == "gap":
                return mu
            var = (h * h).mean(axis=1) - mu * mu
            return F.concat([mu, F.sqrt(F.clip_min(var, 1e-10))], axis=1)
        alpha = self.attention(h).reshape(n, 1, k)
        mu = (alpha @ h).reshape(n, c)
        if self.kind == "sap":
            return mu
        second = (alpha @ (h * h)).reshape(n, c)
        return F.concat([mu, F.sqrt(F.clip_min(second - mu * mu, 1e-10))], axis=1)


def msea_embed(pooled: Sequence[Tensor], fc1: Linear) -> Tensor:
    """Concatenate per-stage pooled vectors and project to the embedding."""
    if not pooled:
        raise ValueError("at least one stage must be selected")
    return fc1(F.concat(list(pooled), axis=1))


@dataclass
class SpeakerNetConfig:
    resnet: ResNetConfig = field(default_factory=ResNetConfig)
    use_fpm: bool = True
    stages: tuple[int, ...] = STAGE_NAMES
    pooling: str = "sap"
    embed_dim: int = 128
    n_speakers: int = 2

    def __post_init__(self):
        self.stages = tuple(sorted(int(s) for s in self.stages))
        if not self.stages or not set(self.stages) <= set(STAGE_NAMES):
            raise ValueError(f"stages must be a non-empty subset of {STAGE_NAMES}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @property
    def fc1_input(self) -> int:
        ch = self.resnet.channels
        k = sum(ch[s - 2] for s in self.stages)
        return k * (2 if self.pooling in ("sp", "asp") else 1)


class SpeakerNet(Module):
    """Extractor, optional FPM, per-stage pooling, FC1 (embedding) and FC2 (classifier)."""

    def __init__(self, cfg: SpeakerNetConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.n_speakers < 2:
            raise ValueError("the classifier needs at least two speakers")
        self.cfg = cfg
        self.extractor = ResNet34(cfg.resnet, rng)
        ch = cfg.resnet.channels
        self.fpm = FeaturePyramid(ch, self.extractor.nd, rng) if cfg.use_fpm else None
        self.pools = [Pooling(cfg.pooling, ch[s - 2], rng) for s in cfg.stages]
        self.fc1 = Linear(cfg.fc1_input, cfg.embed_dim, rng)
        self.fc2 = Linear(cfg.embed_dim, cfg.n_speakers, rng)

    def feature_maps(self, x: Tensor) -> list[Tensor]:
        """Maps of the selected stages: P_i with the FPM, C_i without."""
        stages = self.extractor(x)
        if self.fpm is not None:
            stages = self.fpm(stages)
        return [stages[s - 2] for s in self.cfg.stages]

    def embed(self, x: Tensor, posteriors: Optional[Sequence[Optional[Tensor]]] = None) -> Tensor:
        """Speaker embedding z; ``posteriors`` (one per selected stage, or None) apply soft VAD."""
        maps = self.feature_maps(x)
        if posteriors is not None:
            from .vad import soft_vad_apply

            maps = soft_vad_apply(maps, posteriors)
        return msea_embed([pool(m) for pool, m in zip(self.pools, maps)], self.fc1)

    def forward(self, x: Tensor, posteriors=None) -> Tensor:
        return self.fc2(self.embed(x, posteriors))

    def forward_single_scale(self, x: Tensor) -> Tensor:
        """The plain single-scale path: C5 -> global average -> FC1 -> FC2."""
        c5 = self.extractor(x)[-1]
        n, c = c5.shape[:2]
        return self.fc2(self.fc1(c5.reshape(n, c, -1).mean(axis=2)))


def classify_softmax_loss(logits: Tensor, labels, n_speakers: Optional[int] = None) -> Tensor:
    """-ln softmax(logits)[label], averaged over the batch."""
    labels = np.atleast_1d(np.asarray(labels))
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    if n_speakers is not None and labels.max(initial=0) >= n_speakers:
        raise ValueError(f"label {labels.max()} out of range for {n_speakers} speakers")
    return F.cross_entropy(logits, labels)
