"""The integrated system: optional ratio-mask enhancement in front of the
speaker network, and an optional VAD whose posteriors are synchronized to the
pyramid time scales and multiplied into the feature maps (soft VAD)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .enhancement import MaskNet, MaskNetConfig, mask_apply
from .extractor import SpeakerNet, SpeakerNetConfig
from .tensor import Module, Tensor
from .vad import Synchronizer, SynchronizerConfig, VadNet, VadNetConfig


@dataclass
class SystemConfig:
    speaker: SpeakerNetConfig = field(default_factory=SpeakerNetConfig)
    use_se: bool = False
    use_vad: bool = False
    vad: VadNetConfig = field(default_factory=VadNetConfig)
    sync: SynchronizerConfig = field(default_factory=SynchronizerConfig)
    mask: MaskNetConfig = field(default_factory=MaskNetConfig)
    # pyramid stages whose maps are weighted by the posteriors
    vad_stages: tuple[int, ...] = (2, 3, 4, 5)

    def __post_init__(self):
        self.vad_stages = tuple(int(s) for s in self.vad_stages)
        if self.use_vad and self.vad.feature_dim != self.speaker.resnet.dim:
            raise ValueError("VAD and speaker network must read the same feature dimension")


class SpeakerSystem(Module):
    def __init__(self, cfg: SystemConfig, rng_init: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.speaker = SpeakerNet(cfg.speaker, rng_init)
        self.mask_net = MaskNet(cfg.mask, rng_init) if cfg.use_se else None
        self.vad = VadNet(cfg.vad, rng_init) if cfg.use_vad else None
        self.sync = Synchronizer(cfg.sync, rng_init) if cfg.use_vad else None
        # ablation hook: when set every synchronized posterior is exactly 1
        self.force_unit_posteriors = False

    def speaker_parameters(self):
        """theta_s: everything except the VAD network."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("vad.")]

    def vad_parameters(self):
        """theta_v: the VAD network only."""
        return [(n, p) for n, p in self.named_parameters() if n.startswith("vad.")]

    def mask(self, x: Tensor) -> Optional[Tensor]:
        return self.mask_net(x) if self.mask_net is not None else None

    def posteriors(self, x_vad: Tensor, mask: Optional[Tensor] = None) -> list[Optional[Tensor]]:
        """Synchronized posteriors, one entry per selected speaker stage (None = no weighting)."""
        if mask is not None:
            x_vad = mask_apply(x_vad, mask)
        q = self.vad(x_vad)
        reduced = self.sync(q)
        if self.force_unit_posteriors:
            reduced = [Tensor(np.ones(r.shape)) for r in reduced]
        return [reduced[s - 2] if s in self.cfg.vad_stages else None for s in self.cfg.speaker.stages]

    def embed(self, x: Tensor, x_vad: Optional[Tensor] = None) -> Tensor:
        """``x`` is the segment-normalized SV input; ``x_vad`` the globally standardized VAD input."""
        m = self.mask(x)
        x_hat = mask_apply(x, m) if m is not None else x
        post = None
        if self.vad is not None:
            if x_vad is None:
                raise ValueError("the VAD path needs its own standardized features")
            post = self.posteriors(x_vad, m)
        return self.speaker.embed(x_hat, post)

    def forward(self, x: Tensor, x_vad: Optional[Tensor] = None) -> Tensor:
        return self.speaker.fc2(self.embed(x, x_vad))
