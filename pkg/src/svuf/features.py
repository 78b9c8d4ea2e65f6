"""Acoustic front end: WAV IO, STFT, log Mel filterbanks (Fbank64), the
160-bin log spectrogram (Spec160) and feature normalization."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-10
SPEC160_BINS = 160


@dataclass(frozen=True)
class FrameParams:
    sample_rate: int = 16000
    window_len: int = 400  # 25 ms
    hop: int = 160  # 10 ms, i.e. 200 frames for a 2 s segment
    fft_size: int = 512

    def __post_init__(self):
        if self.window_len > self.fft_size:
            raise ValueError("window_len must not exceed fft_size")
        if self.hop <= 0:
            raise ValueError("hop must be positive")

    @property
    def bin_hz(self) -> float:
        return self.sample_rate / self.fft_size


DEFAULT_PARAMS = FrameParams()


def read_wav(path: Union[str, Path]) -> tuple[np.ndarray, int]:
    """Read 16-bit mono PCM; returns float samples in [-1, 1) and the rate."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path: Union[str, Path], signal: np.ndarray, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(signal) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def num_frames(n_samples: int, params: FrameParams = DEFAULT_PARAMS) -> int:
    return (n_samples - params.window_len) // params.hop + 1


def stft(signal: np.ndarray, params: FrameParams = DEFAULT_PARAMS) -> np.ndarray:
    """Hamming-windowed short-time Fourier transform, shape (fft_size // 2 + 1, T)."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1 or signal.size < params.window_len:
        raise ValueError(
            f"need a 1-D signal of at least {params.window_len} samples, got shape {signal.shape}"
        )
    frames = sliding_window_view(signal, params.window_len)[:: params.hop]
    return np.fft.rfft(frames * np.hamming(params.window_len), n=params.fft_size, axis=1).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = 64, params: FrameParams = DEFAULT_PARAMS, f_min: float = 0.0, f_max: float = 8000.0
) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters equally spaced on the mel scale.

    Returns the (n_mels, n_bins) weight matrix and the filter centre frequencies.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(params.fft_size // 2 + 1) * params.bin_hz
    lo, centre, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (centre - lo)
    falling = (hi - freqs) / (hi - centre)
    return np.maximum(0.0, np.minimum(rising, falling)), edges[1:-1]


_FILTERBANKS: dict[tuple, np.ndarray] = {}


def log_mel_fbank(spectrogram: np.ndarray, n_mels: int = 64, params: FrameParams = DEFAULT_PARAMS) -> np.ndarray:
    """ln(max(mel-filtered power, 1e-10)), shape (n_mels, T)."""
    key = (n_mels, params)
    if key not in _FILTERBANKS:
        _FILTERBANKS[key] = mel_filterbank(n_mels, params)[0]
    power = np.abs(spectrogram) ** 2
    return np.log(np.maximum(_FILTERBANKS[key] @ power, LOG_FLOOR))


def log_spectrogram_160(spectrogram: np.ndarray) -> np.ndarray:
    """Log power of FFT bins 0..159 (0 to just under 5 kHz), shape (160, T)."""
    return np.log(np.maximum(np.abs(spectrogram[:SPEC160_BINS]) ** 2, LOG_FLOOR))


FEATURE_KINDS = ("fbank64", "spec160")


def extract(signal: np.ndarray, kind: str = "fbank64", params: FrameParams = DEFAULT_PARAMS) -> np.ndarray:
    if kind == "fbank64":
        return log_mel_fbank(stft(signal, params), 64, params)
    if kind == "spec160":
        return log_spectrogram_160(stft(signal, params))
    raise ValueError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")


def segment_mean_normalize(x: np.ndarray) -> np.ndarray:
    """Subtract each feature dimension's mean over the frames of the segment."""
    return x - x.mean(axis=-1, keepdims=True)


@dataclass
class GlobalStats:
    mean: np.ndarray
    std: np.ndarray


def global_stats(features: Iterable[np.ndarray]) -> GlobalStats:
    """Per-dimension mean and standard deviation pooled over every frame."""
    frames = np.concatenate([np.asarray(f) for f in features], axis=-1)
    return GlobalStats(frames.mean(axis=-1), frames.std(axis=-1))


def global_standardize(x: np.ndarray, stats: GlobalStats) -> np.ndarray:
    if stats.mean.shape != (x.shape[-2],) or stats.std.shape != (x.shape[-2],):
        raise ValueError(
            f"stats have dimension {stats.mean.shape[0]} but features have {x.shape[-2]}"
        )
    return (x - stats.mean[:, None]) / np.maximum(stats.std, 1e-8)[:, None]


def context_indices(n_frames: int, context: int) -> np.ndarray:
    """(T, context) frame indices centred on each frame, edges replicated."""
    half = context // 2
    idx = np.arange(n_frames)[:, None] + np.arange(-half, half + 1)[None, :]
    return np.clip(idx, 0, n_frames - 1)


def frame_context_stack(x: np.ndarray, context: int = 11) -> np.ndarray:
    """Stack ``context`` neighbouring frames around each frame, replicating the edges.

    ``x`` is (d, T); the result is (context * d, T) with the earliest frame first.
    """
    if context < 1 or context % 2 == 0:
        raise ValueError("context must be a positive odd number")
    d, t = x.shape
    idx = context_indices(t, context)  # (T, context)
    return x[:, idx.T].transpose(1, 0, 2).reshape(context * d, t)
