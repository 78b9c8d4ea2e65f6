"""Synthetic multi-speaker corpus with ground-truth VAD labels.

Speakers are formant synthesizers: a jittered harmonic source at the
speaker's F0 passes through three resonators and a spectral tilt. Utterances
alternate voiced syllables with silent micro-pauses, which gives exact
speech/non-speech labels. On top of that the module mixes noise at a target
SNR, adds synthetic reverberation, builds the Sx-Ny padded test conditions
and draws verification trials.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy import signal as sps

from .features import DEFAULT_PARAMS, FrameParams, num_frames

SAMPLE_RATE = 16000
NOISE_TYPES = ("white", "pink", "chirp", "babble")
DISTORTIONS = ("none", "reverb") + NOISE_TYPES
DITHER = 1e-4


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    f0: float
    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]
    tilt: float  # one-pole coefficient in (-1, 1); positive darkens the spectrum


_FORMANT_RANGES = ((300.0, 900.0), (900.0, 2300.0), (2400.0, 3600.0))


def make_speakers(n: int, rng: np.random.Generator, min_formant_gap: float = 50.0) -> list[SyntheticSpeaker]:
    """Draw ``n`` speakers, each differing from all others by >= ``min_formant_gap`` Hz in some formant."""
    speakers: list[SyntheticSpeaker] = []
    while len(speakers) < n:
        formants = tuple(float(rng.uniform(lo, hi)) for lo, hi in _FORMANT_RANGES)
        if any(max(abs(a - b) for a, b in zip(formants, s.formants)) < min_formant_gap for s in speakers):
            continue
        speakers.append(
            SyntheticSpeaker(
                speaker_id=f"spk{len(speakers):03d}",
                f0=float(rng.uniform(90.0, 250.0)),
                formants=formants,
                bandwidths=tuple(float(rng.uniform(60.0, 160.0)) for _ in range(3)),
                tilt=float(rng.uniform(-0.3, 0.8)),
            )
        )
    return speakers


def _resonator(x: np.ndarray, freq: float, bw: float, fs: int = SAMPLE_RATE) -> np.ndarray:
    r = math.exp(-math.pi * bw / fs)
    a = [1.0, -2.0 * r * math.cos(2.0 * math.pi * freq / fs), r * r]
    return sps.lfilter([1.0 - r], a, x)


def _voiced(speaker: SyntheticSpeaker, n: int, rng: np.random.Generator) -> np.ndarray:
    """One syllable: harmonic source with vibrato and jitter, formant-filtered."""
    t = np.arange(n) / SAMPLE_RATE
    f0 = speaker.f0 * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi)))
    f0 *= 1.0 + 0.01 * rng.standard_normal()
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    n_harm = int(min(40, 7000 // speaker.f0))
    k = np.arange(1, n_harm + 1)[:, None]
    source = (np.sin(k * phase[None, :]) / k).sum(axis=0)
    source += 0.05 * rng.standard_normal(n)  # aspiration
    shift = 1.0 + 0.04 * rng.standard_normal(3)  # small vowel-to-vowel variation
    y = source
    for f, bw, s in zip(speaker.formants, speaker.bandwidths, shift):
        y = _resonator(y, f * s, bw)
    y = sps.lfilter([1.0], [1.0, -speaker.tilt], y)
    env = np.sqrt(np.maximum(np.sin(np.pi * np.arange(n) / max(n - 1, 1)), 0.0))
    y = y * env
    return y / (np.sqrt(np.mean(y**2)) + 1e-12) * rng.uniform(0.05, 0.15)


def synth_utterance_samples(
    speaker: SyntheticSpeaker, duration: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Audio plus a per-sample speech mask."""
    n_total = int(round(duration * SAMPLE_RATE))
    pcm = np.zeros(n_total)
    mask = np.zeros(n_total, dtype=bool)
    pos = int(rng.uniform(0.0, 0.05) * SAMPLE_RATE)
    while pos < n_total:
        n = min(int(rng.uniform(0.15, 0.4) * SAMPLE_RATE), n_total - pos)
        if n > 64:
            pcm[pos : pos + n] = _voiced(speaker, n, rng)
            mask[pos : pos + n] = True
        pos += n + int(rng.uniform(0.04, 0.15) * SAMPLE_RATE)
    pcm += DITHER * rng.standard_normal(n_total)
    return pcm, mask


def frame_labels(mask: np.ndarray, params: FrameParams = DEFAULT_PARAMS) -> np.ndarray:
    """A frame is speech iff the sample at its window centre is speech."""
    t = num_frames(mask.size, params)
    return mask[np.arange(t) * params.hop + params.window_len // 2].astype(np.int8)


def frame_mask_to_samples(labels: np.ndarray, n_samples: int, params: FrameParams = DEFAULT_PARAMS) -> np.ndarray:
    """Spread frame labels back to samples: each frame owns ``hop`` samples around its centre."""
    mask = np.zeros(n_samples, dtype=bool)
    start = params.window_len // 2 - params.hop // 2
    for t in np.flatnonzero(labels):
        lo = start + t * params.hop
        mask[max(lo, 0) : lo + params.hop] = True
    return mask


def speech_region(mask: np.ndarray, params: FrameParams = DEFAULT_PARAMS) -> np.ndarray:
    """Samples owned by speech-labelled frames, the reference region for SNR.

    Falls back to the raw sample mask when the audio is too short to hold a
    speech-labelled frame.
    """
    mask = np.asarray(mask, dtype=bool)
    region = frame_mask_to_samples(frame_labels(mask, params), mask.size, params) if mask.size >= params.window_len else mask
    return region if region.any() else mask



def synth_utterance(
    speaker: SyntheticSpeaker, duration: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic utterance for (speaker, seed); returns PCM and frame labels."""
    if duration < 0.5:
        raise ValueError("duration must be at least 0.5 s")
    pcm, mask = synth_utterance_samples(speaker, duration, np.random.default_rng(seed))
    return pcm, frame_labels(mask)


# -- noise and reverberation ------------------------------------------------


def white_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n)


def chirp_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    f_lo, f_hi = rng.uniform(200, 800), rng.uniform(1500, 4000)
    period = rng.uniform(0.5, 2.0)
    return sps.chirp(t % period, f_lo, period, f_hi, method="logarithmic")


def babble_noise(n: int, rng: np.random.Generator, speakers: Sequence[SyntheticSpeaker]) -> np.ndarray:
    """Sum of four synthetic talkers drawn from ``speakers``."""
    if len(speakers) == 0:
        raise ValueError("babble noise needs at least one speaker")
    out = np.zeros(n)
    for i in rng.choice(len(speakers), size=4, replace=len(speakers) < 4):
        out += synth_utterance_samples(speakers[i], n / SAMPLE_RATE, rng)[0][:n]
    return out


def make_noise(
    kind: str, n: int, rng: np.random.Generator, speakers: Sequence[SyntheticSpeaker] = ()
) -> np.ndarray:
    if kind == "white":
        return white_noise(n, rng)
    if kind == "pink":
        return pink_noise(n, rng)
    if kind == "chirp":
        return chirp_noise(n, rng)
    if kind == "babble":
        return babble_noise(n, rng, speakers)
    raise ValueError(f"unknown noise type {kind!r}; expected one of {NOISE_TYPES}")


def add_noise_at_snr(
    signal: np.ndarray, noise: np.ndarray, snr_db: float, speech_mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """Mix ``noise`` so the speech-region SNR equals ``snr_db``.

    Both powers are measured over ``speech_mask`` (all samples when None);
    the noise is tiled or cut to the signal length. ``snr_db = inf`` returns
    the signal unchanged.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return signal.copy()
    noise = np.resize(np.asarray(noise, dtype=np.float64), signal.shape)
    region = np.ones(signal.shape, dtype=bool) if speech_mask is None else np.asarray(speech_mask, dtype=bool)
    p_n = np.mean(noise[region] ** 2) if region.any() else 0.0
    if p_n == 0.0:
        raise ValueError("noise has zero power over the reference region")
    p_s = np.mean(signal[region] ** 2)
    return signal + snr_gain(p_s, p_n, snr_db) * noise


def snr_gain(p_s: float, p_n: float, snr_db: float) -> float:
    return math.sqrt(p_s / (p_n * 10.0 ** (snr_db / 10.0)))


def measured_snr(clean: np.ndarray, mixed: np.ndarray, speech_mask: Optional[np.ndarray] = None) -> float:
    region = slice(None) if speech_mask is None else np.asarray(speech_mask, dtype=bool)
    noise = mixed[region] - clean[region]
    return 10.0 * math.log10(np.mean(clean[region] ** 2) / np.mean(noise**2))


def synthetic_rir(rt60: float, rng: np.random.Generator) -> np.ndarray:
    """Exponentially decaying noise tail (-60 dB at ``rt60``) behind a unit direct path."""
    if rt60 <= 0:
        raise ValueError("rt60 must be positive")
    n = max(1, int(round(1.5 * rt60 * SAMPLE_RATE)))
    t = np.arange(n) / SAMPLE_RATE
    rir = rng.standard_normal(n) * np.exp(-6.9078 * t / rt60)
    rir[0] = 1.0
    return rir


def apply_reverb(signal: np.ndarray, rt60: float, seed: int, trim: bool = True) -> np.ndarray:
    """Convolve with a synthetic RIR and rescale to the input RMS.

    With ``trim`` the tail is cut back to the input length.
    """
    rir = synthetic_rir(rt60, np.random.default_rng(seed))
    out = sps.fftconvolve(signal, rir) if rir.size > 1 else np.asarray(signal, dtype=np.float64).copy()
    rms_in = np.sqrt(np.mean(np.square(signal)))
    rms_out = np.sqrt(np.mean(np.square(out)))
    if rms_out > 0 and rir.size > 1:
        out = out * (rms_in / rms_out)
    return out[: len(signal)] if trim else out


# -- test conditions -----------------------------------------------------------

_COND_RE = re.compile(r"^S(\d+(?:\.\d+)?)-N(\d+(?:\.\d+)?)$")


@dataclass(frozen=True)
class Condition:
    speech_len: float
    nonspeech_len: float
    snr: Optional[float] = None  # None means clean
    distortion: str = "none"

    def __post_init__(self):
        if self.speech_len <= 0 or self.nonspeech_len < 0:
            raise ValueError("speech_len must be positive and nonspeech_len non-negative")
        if self.distortion not in DISTORTIONS:
            raise ValueError(f"unknown distortion {self.distortion!r}")
        if self.distortion in NOISE_TYPES and self.snr is None:
            raise ValueError(f"{self.distortion} noise needs an SNR")

    @property
    def name(self) -> str:
        return f"S{self.speech_len:g}-N{self.nonspeech_len:g}"

    @classmethod
    def parse(cls, text: str, snr: Optional[float] = None, distortion: str = "none") -> "Condition":
        m = _COND_RE.match(text.strip())
        if not m:
            raise ValueError(f"condition {text!r} is not of the form Sx-Ny")
        return cls(float(m.group(1)), float(m.group(2)), snr, distortion)


def pad_silence_condition(
    pieces: Sequence[tuple[np.ndarray, np.ndarray]],
    cond: Condition,
    rng: np.random.Generator,
    babble_speakers: Sequence[SyntheticSpeaker] = (),
    rt60: float = 0.23,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build one conditioned test utterance.

    ``pieces`` are (pcm, sample speech mask) pairs that get concatenated until
    they cover S seconds and then cut to exactly S seconds. N/2 seconds of
    silence go on each side, and the distortion is applied last. Returns the
    audio, the per-sample mask and the frame labels.
    """
    n_speech = int(round(cond.speech_len * SAMPLE_RATE))
    pcm_parts, mask_parts, have = [], [], 0
    for i in range(10_000):
        pcm, mask = pieces[i % len(pieces)]
        pcm_parts.append(pcm)
        mask_parts.append(mask)
        have += pcm.size
        if have >= n_speech:
            break
    speech = np.concatenate(pcm_parts)[:n_speech]
    smask = np.concatenate(mask_parts)[:n_speech]
    half = int(round(cond.nonspeech_len * SAMPLE_RATE / 2))
    pad = DITHER * rng.standard_normal((2, half))
    pcm = np.concatenate([pad[0], speech, pad[1]])
    mask = np.concatenate([np.zeros(half, bool), smask, np.zeros(half, bool)])
    if cond.distortion == "reverb":
        pcm = apply_reverb(pcm, rt60, int(rng.integers(2**31)))
    elif cond.distortion != "none" and cond.snr is not None:
        noise = make_noise(cond.distortion, pcm.size, rng, babble_speakers)
        pcm = add_noise_at_snr(pcm, noise, cond.snr, speech_region(mask))
    return pcm, mask, frame_labels(mask)


# -- corpus tables and trials ----------------------------------------------------


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    pcm: np.ndarray
    mask: np.ndarray
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = frame_labels(self.mask)


def synth_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    rng: np.random.Generator,
    duration: tuple[float, float] = (1.5, 2.5),
    speakers: Optional[list[SyntheticSpeaker]] = None,
) -> tuple[list[SyntheticSpeaker], list[Utterance]]:
    """Generate the clean training/evaluation pool."""
    speakers = speakers or make_speakers(n_speakers, rng)
    utts = []
    for spk in speakers:
        for j in range(utts_per_speaker):
            pcm, mask = synth_utterance_samples(spk, float(rng.uniform(*duration)), rng)
            utts.append(Utterance(f"{spk.speaker_id}_u{j:03d}", spk.speaker_id, pcm, mask))
    return speakers, utts


def build_trials(
    utterances: Sequence[tuple[str, str]], n_trials: int, balance: float = 0.5, seed: int = 0
) -> list[tuple[str, str, bool]]:
    """Draw (enroll, test, target) rows from (utt_id, speaker_id) pairs.

    ``balance`` is the fraction of target trials. Pairs are distinct within
    each class while enough distinct pairs exist.
    """
    rng = np.random.default_rng(seed)
    by_spk: dict[str, list[str]] = {}
    for utt_id, spk in utterances:
        by_spk.setdefault(spk, []).append(utt_id)
    eligible = sorted(s for s, u in by_spk.items() if len(u) >= 2)
    if len(by_spk) < 2 or not eligible:
        raise ValueError("need at least 2 speakers, and some speaker with 2 or more utterances")
    spks = sorted(by_spk)
    n_pos = int(round(n_trials * balance))
    n_neg = n_trials - n_pos
    n_pos_possible = sum(len(by_spk[s]) * (len(by_spk[s]) - 1) for s in eligible)
    total = len(utterances)
    n_neg_possible = total * total - sum(len(u) ** 2 for u in by_spk.values())

    def draw(n, possible, sample):
        seen, rows = set(), []
        while len(rows) < n:
            pair = sample()
            if pair in seen and len(seen) < possible:
                continue
            seen.add(pair)
            rows.append(pair)
        return rows

    def positive():
        s = eligible[rng.integers(len(eligible))]
        a, b = rng.choice(len(by_spk[s]), 2, replace=False)
        return by_spk[s][a], by_spk[s][b]

    def negative():
        a, b = rng.choice(len(spks), 2, replace=False)
        ua, ub = by_spk[spks[a]], by_spk[spks[b]]
        return ua[rng.integers(len(ua))], ub[rng.integers(len(ub))]

    rows = [(e, t, True) for e, t in draw(n_pos, n_pos_possible, positive)]
    rows += [(e, t, False) for e, t in draw(n_neg, n_neg_possible, negative)]
    order = rng.permutation(len(rows))
    return [rows[i] for i in order]


def write_manifest(path: Union[str, Path], rows: Iterable[dict]) -> None:
    """CSV ``utt_id,speaker_id,wav_path,S,N,snr,distortion``."""
    cols = ["utt_id", "speaker_id", "wav_path", "S", "N", "snr", "distortion"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in cols})


def read_manifest(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_trials(path: Union[str, Path], trials: Iterable[tuple[str, str, bool]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["enroll_id", "test_id", "target"])
        for e, t, target in trials:
            writer.writerow([e, t, int(bool(target))])


def read_trials(path: Union[str, Path]) -> list[tuple[str, str, bool]]:
    with open(path, newline="") as fh:
        return [(r["enroll_id"], r["test_id"], r["target"] == "1") for r in csv.DictReader(fh)]
