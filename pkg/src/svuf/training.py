"""Losses and training loops.

The joint trainer follows the self-adaptive soft VAD recipe. One backward
pass of L_JL + lambda * L_SP gives the VAD parameters the gradient of L_v and
the speaker-side parameters the gradient of L_JL, because L_SP only depends
on the VAD. L_JL is the speaker classification loss on the soft-VAD weighted
pyramid. L_SP is the focal loss on the VAD's own confident frames (speech
posterior based domain adaptation).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .extractor import classify_softmax_loss
from .features import segment_mean_normalize
from .model import SpeakerSystem
from .tensor import Tensor, no_grad
from .tensor import functional as F
from .tensor.checkpoint import dumps, loads
from .tensor.optim import Optimizer, OptimizerConfig, make_optimizer
from .vad import VadNet

PROB_EPS = 1e-12


# -- losses -------------------------------------------------------------------


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.all(np.isin(y, (-1, 1))):
        raise ValueError("labels must be +1 (speech) or -1 (non-speech)")
    return y


def focal_loss(p: float, y: int, gamma: float) -> float:
    """-(1 - p_t)^gamma * ln(p_t) with p_t = p for speech (+1) and 1 - p otherwise."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie strictly inside (0, 1), got {p}")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    _check_labels(y)
    pt = p if y == 1 else 1.0 - p
    return -((1.0 - pt) ** gamma) * math.log(pt)


def focal_loss_frames(p: Tensor, y, gamma: float) -> Tensor:
    """Mean focal loss over frames; ``p`` holds speech posteriors, ``y`` is +/-1."""
    y = _check_labels(y)
    if p.shape != y.shape:
        raise ValueError(f"posterior shape {p.shape} does not match labels {y.shape}")
    speech = (y == 1).astype(np.float64)
    pt = F.clip(p * speech + (1.0 - p) * (1.0 - speech), PROB_EPS, 1.0 - PROB_EPS)
    nll = -F.log(pt)
    if gamma != 0:
        nll = F.power(1.0 - pt, gamma) * nll
    return nll.mean()


def sp_da_indices(q: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Frames with q > delta (speech, +1) or 1 - q > delta (non-speech, -1), in order."""
    if not 0.5 < delta < 1.0:
        raise ValueError("delta must lie in (0.5, 1)")
    q = np.asarray(q, dtype=np.float64)
    speech = q > delta
    nonspeech = (1.0 - q) > delta
    idx = np.flatnonzero(speech | nonspeech)
    return idx, np.where(speech[idx], 1, -1)


def sp_da_select(q: np.ndarray, x_v: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-labelled frames (columns of ``x_v``) and their +/-1 labels."""
    idx, labels = sp_da_indices(q, delta)
    return x_v[..., idx], labels


def combined_vad_loss(l_jl, l_sp, lam: float):
    """L_v = L_JL + lambda * L_SP."""
    return l_jl + lam * l_sp


def lr_schedule(
    step: int, total_steps: int, base_lr: float, decay_at: Sequence[float] = (0.5, 0.75), factor: float = 0.1
) -> float:
    """Piecewise-constant decay: multiply by ``factor`` at each listed fraction of the run."""
    drops = sum(step >= frac * total_steps for frac in decay_at)
    return base_lr * factor**drops


# -- configuration and state -----------------------------------------------------


@dataclass
class SasVadConfig:
    delta: float = 0.7
    lam: float = 4.0
    gamma: float = 0.5
    eta_v: float = 1e-3
    eta_s: float = 0.1
    vad_checkpoint: Optional[str] = None

    def __post_init__(self):
        if not 0.5 < self.delta < 1.0:
            raise ValueError("delta must lie in (0.5, 1)")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be non-negative")
        if self.eta_v < 0 or self.eta_s <= 0:
            raise ValueError("eta_s must be positive and eta_v non-negative")


@dataclass
class TrainConfig:
    epochs: int = 10
    segment_frames: int = 200
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_at: tuple[float, ...] = (0.5, 0.75)
    decay_factor: float = 0.1
    sas: SasVadConfig = field(default_factory=SasVadConfig)

    def __post_init__(self):
        if self.epochs <= 0 or self.segment_frames < 8 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive and segment_frames >= 8")
        self.decay_at = tuple(float(x) for x in self.decay_at)


@dataclass
class TrainItem:
    """One training utterance: raw log features for SV, standardized ones for the VAD."""

    utt_id: str
    label: int
    feats: np.ndarray
    feats_vad: Optional[np.ndarray] = None


class TrainState:
    """Model, optimizers, counters, sampling RNG and loss history."""

    def __init__(self, model: SpeakerSystem, cfg: TrainConfig, seed: int, sampling: np.random.Generator):
        self.model = model
        self.cfg = cfg
        self.seed = int(seed)
        self.sampling = sampling
        self.epoch = 0
        self.step = 0
        self.total_steps = 0
        self.history: list[dict] = []
        self.epoch_log: list[dict] = []
        self.vad_pretrained = False
        base = dict(
            kind="sgd",
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            batch_size=cfg.batch_size,
            decay_at=cfg.decay_at,
            decay_factor=cfg.decay_factor,
        )
        self.opt_s: Optimizer = make_optimizer(
            model.speaker_parameters(), OptimizerConfig(learning_rate=cfg.sas.eta_s, **base)
        )
        self.opt_v: Optional[Optimizer] = None
        if model.vad is not None and cfg.sas.eta_v > 0:
            self.opt_v = make_optimizer(model.vad_parameters(), OptimizerConfig(learning_rate=cfg.sas.eta_v, **base))

    def load_pretrained_vad(self, state: dict[str, np.ndarray]) -> None:
        if self.model.vad is None:
            raise ValueError("this system has no VAD")
        self.model.vad.load_state_dict(state)
        self.vad_pretrained = True

    # -- checkpointing --

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        out.update({f"opt_s.{k}": v for k, v in self.opt_s.state_dict().items()})
        if self.opt_v is not None:
            out.update({f"opt_v.{k}": v for k, v in self.opt_v.state_dict().items()})
        return out

    def meta(self) -> dict:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "total_steps": self.total_steps,
            "seed": self.seed,
            "vad_pretrained": self.vad_pretrained,
            "sampling_state": self.sampling.bit_generator.state,
            "history": self.history,
            "epoch_log": self.epoch_log,
        }

    def to_bytes(self) -> bytes:
        return dumps(self.arrays(), self.meta())

    def load_bytes(self, blob: bytes) -> None:
        arrays, meta = loads(blob)

        def section(prefix):
            return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

        self.model.load_state_dict(section("model."))
        self.opt_s.load_state_dict(section("opt_s."))
        if self.opt_v is not None:
            self.opt_v.load_state_dict(section("opt_v."))
        self.epoch = int(meta["epoch"])
        self.step = int(meta["step"])
        self.total_steps = int(meta["total_steps"])
        self.seed = int(meta["seed"])
        self.vad_pretrained = bool(meta["vad_pretrained"])
        self.sampling.bit_generator.state = meta["sampling_state"]
        self.history = list(meta["history"])
        self.epoch_log = list(meta["epoch_log"])

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    def load(self, path: Union[str, Path]) -> None:
        self.load_bytes(Path(path).read_bytes())


# -- steps and epochs -------------------------------------------------------------


def _segment(feats: np.ndarray, start: int, length: int) -> np.ndarray:
    if feats.shape[1] < length:
        feats = np.pad(feats, ((0, 0), (0, length - feats.shape[1])), mode="wrap")
    return feats[:, start : start + length]


def sample_batch(items: Sequence[TrainItem], seg_len: int, rng: np.random.Generator):
    """One random ``seg_len``-frame segment per item; SV input is mean-normalized per segment."""
    xs, xvs, labels = [], [], []
    for item in items:
        start = int(rng.integers(0, max(item.feats.shape[1] - seg_len, 0) + 1))
        xs.append(segment_mean_normalize(_segment(item.feats, start, seg_len)))
        if item.feats_vad is not None:
            xvs.append(_segment(item.feats_vad, start, seg_len))
        labels.append(item.label)
    x_vad = np.stack(xvs) if len(xvs) == len(items) else None
    return np.stack(xs), x_vad, np.asarray(labels)


def sp_da_loss(vad: VadNet, items: Sequence[TrainItem], delta: float, gamma: float) -> tuple[Tensor, int]:
    """Focal loss over the confidently labelled frames of the batch's full utterances.

    Each utterance gets a fresh VAD pass on its unmasked, globally standardized
    features. The loss is averaged over all selected frames and is zero
    when nothing was selected.
    """
    total: Optional[Tensor] = None
    count = 0
    for item in items:
        q = vad(Tensor(item.feats_vad)).reshape(-1)
        idx, labels = sp_da_indices(q.data, delta)
        if idx.size == 0:
            continue
        term = focal_loss_frames(q[idx], labels, gamma) * float(idx.size)
        total = term if total is None else total + term
        count += idx.size
    if total is None:
        return Tensor(0.0), 0
    return total / float(count), count


def sas_vad_train_step(state: TrainState, items: Sequence[TrainItem]) -> dict:
    """One update of theta_s (by L_JL) and theta_v (by L_v = L_JL + lambda * L_SP)."""
    model, cfg = state.model, state.cfg
    sas = cfg.sas
    if model.vad is not None and not state.vad_pretrained:
        raise RuntimeError("SAS-VAD training needs a pre-trained VAD; load one with load_pretrained_vad")
    model.train()
    x, x_vad, labels = sample_batch(items, cfg.segment_frames, state.sampling)
    logits = model(Tensor(x), Tensor(x_vad) if model.vad is not None else None)
    l_jl = classify_softmax_loss(logits, labels, model.cfg.speaker.n_speakers)
    l_sp = Tensor(0.0)
    if model.vad is not None and sas.lam > 0:
        l_sp, _ = sp_da_loss(model.vad, items, sas.delta, sas.gamma)
    l_v = combined_vad_loss(l_jl, l_sp, sas.lam)
    l_v.backward()
    total = max(state.total_steps, 1)
    lr_s = lr_schedule(state.step, total, sas.eta_s, cfg.decay_at, cfg.decay_factor)
    lr_v = lr_schedule(state.step, total, sas.eta_v, cfg.decay_at, cfg.decay_factor) if state.opt_v else 0.0
    state.opt_s.step(lr_s)
    if state.opt_v is not None:
        state.opt_v.step(lr_v)
    model.zero_grad()
    row = {
        "step": state.step,
        "L_JL": float(l_jl.data),
        "L_SP": float(l_sp.data),
        "L_v": float(l_v.data) if model.vad is not None else 0.0,
        "lr_s": lr_s,
        "lr_v": lr_v,
    }
    state.history.append(row)
    state.step += 1
    return row


def steps_per_epoch(n_items: int, batch_size: int) -> int:
    return -(-n_items // batch_size)


def joint_train_epoch(dataset: Sequence[TrainItem], state: TrainState) -> dict:
    """Shuffle, cut into batches, step through them; logs the epoch-mean losses."""
    if len({item.label for item in dataset}) < 2:
        raise ValueError("speaker classification needs at least two speakers")
    bs = state.cfg.batch_size
    if state.total_steps == 0:
        state.total_steps = state.cfg.epochs * steps_per_epoch(len(dataset), bs)
    order = state.sampling.permutation(len(dataset))
    rows = [
        sas_vad_train_step(state, [dataset[i] for i in order[lo : lo + bs]]) for lo in range(0, len(order), bs)
    ]
    summary = {
        "epoch": state.epoch,
        "L_s": float(np.mean([r["L_JL"] for r in rows])),
        "L_v": float(np.mean([r["L_v"] for r in rows])),
    }
    state.epoch_log.append(summary)
    state.epoch += 1
    return summary


def train(dataset: Sequence[TrainItem], state: TrainState, log=None) -> TrainState:
    while state.epoch < state.cfg.epochs:
        summary = joint_train_epoch(dataset, state)
        if log is not None:
            log(summary)
    return state


def write_training_log(path: Union[str, Path], rows: Iterable[dict]) -> None:
    """CSV ``step,L_JL,L_SP,L_v,lr_s,lr_v``."""
    cols = ["step", "L_JL", "L_SP", "L_v", "lr_s", "lr_v"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols})


# -- VAD pre-training ----------------------------------------------------------------


@dataclass
class VadTrainConfig:
    epochs: int = 5
    segment_frames: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    gamma: float = 0.0


def pretrain_vad(
    vad: VadNet,
    data: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: VadTrainConfig,
    rng: np.random.Generator,
) -> list[float]:
    """Adam on frame-level focal loss (cross-entropy at gamma 0).

    ``data`` holds (standardized features (d, T), 0/1 frame labels) pairs.
    Returns the per-epoch mean loss.
    """
    opt = make_optimizer(
        vad.named_parameters(), OptimizerConfig(kind="adam", learning_rate=cfg.learning_rate, weight_decay=0.0)
    )
    vad.train()
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        epoch = []
        for lo in range(0, len(order), cfg.batch_size):
            xs, ys = [], []
            for i in order[lo : lo + cfg.batch_size]:
                feats, lab = data[i]
                start = int(rng.integers(0, max(feats.shape[1] - cfg.segment_frames, 0) + 1))
                xs.append(_segment(feats, start, cfg.segment_frames))
                ys.append(np.where(_segment(lab[None, :], start, cfg.segment_frames)[0] > 0, 1, -1))
            loss = focal_loss_frames(vad(Tensor(np.stack(xs))), np.stack(ys), cfg.gamma)
            loss.backward()
            opt.step()
            vad.zero_grad()
            epoch.append(float(loss.data))
        losses.append(float(np.mean(epoch)))
    vad.eval()
    return losses


def vad_posteriors(vad: VadNet, feats: np.ndarray) -> np.ndarray:
    vad.eval()
    with no_grad():
        return vad(Tensor(feats)).data.reshape(-1)


# -- embedding extraction ----------------------------------------------------------


def extract_embeddings(model: SpeakerSystem, items: Sequence[TrainItem]) -> dict[str, np.ndarray]:
    """Embeddings from whole utterances in eval mode; SV input is utterance-mean-normalized."""
    model.eval()
    out = {}
    with no_grad():
        for item in items:
            x = Tensor(segment_mean_normalize(item.feats)[None])
            xv = Tensor(item.feats_vad[None]) if model.vad is not None else None
            out[item.utt_id] = model.embed(x, xv).data[0].copy()
    return out
