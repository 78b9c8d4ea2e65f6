import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svuf import corpus as C
from svuf.features import DEFAULT_PARAMS


@pytest.fixture(scope="module")
def speakers():
    return C.make_speakers(4, np.random.default_rng(0))


def test_utterance_deterministic(speakers):
    a, la = C.synth_utterance(speakers[0], 1.0, seed=9)
    b, lb = C.synth_utterance(speakers[0], 1.0, seed=9)
    assert a.tobytes() == b.tobytes() and np.array_equal(la, lb)


def test_speakers_have_distinct_spectra(speakers):
    def peak(spk):
        pcm, _ = C.synth_utterance(spk, 2.0, seed=3)
        spec = np.abs(np.fft.rfft(pcm)) ** 2
        # smooth over 50 Hz so the formant envelope, not a single harmonic, decides
        smooth = np.convolve(spec, np.ones(100) / 100, mode="same")
        return int(np.argmax(smooth))

    peaks = [peak(s) for s in speakers]
    assert len(set(peaks)) == len(peaks)


def test_labels_mark_silent_frames(speakers):
    pcm, mask = C.synth_utterance_samples(speakers[1], 2.0, np.random.default_rng(4))
    labels = C.frame_labels(mask)
    centres = np.arange(labels.size) * DEFAULT_PARAMS.hop + DEFAULT_PARAMS.window_len // 2
    silent = labels == 0
    assert silent.any() and (~silent).any()
    assert np.all(np.abs(pcm[centres[silent]]) < 1e-3)


def test_snr_gain_examples():
    assert C.snr_gain(1.0, 1.0, 0.0) == 1.0
    assert math.isclose(C.snr_gain(1.0, 1.0, 10.0), 10 ** -0.5, rel_tol=1e-15)
    assert math.isclose(C.snr_gain(2.0, 2.0, 10.0), 0.31623, abs_tol=5e-6)


def test_infinite_snr_is_clean(rng):
    x = rng.standard_normal(100)
    np.testing.assert_array_equal(C.add_noise_at_snr(x, rng.standard_normal(100), math.inf), x)


@given(st.integers(0, 2**16), st.floats(-5, 30), st.sampled_from(["white", "pink", "chirp"]))
def test_mixed_snr_on_speech_frames(seed, snr, kind):
    r = np.random.default_rng(seed)
    spk = C.make_speakers(1, r)[0]
    pcm, mask = C.synth_utterance_samples(spk, 1.0, r)
    mixed = C.add_noise_at_snr(pcm, C.make_noise(kind, pcm.size, r), snr, mask)
    assert abs(C.measured_snr(pcm, mixed, mask) - snr) < 0.1


def test_babble_noise_uses_other_speakers(speakers):
    n = C.make_noise("babble", 8000, np.random.default_rng(1), speakers)
    assert n.shape == (8000,) and np.std(n) > 0
    with pytest.raises(ValueError):
        C.make_noise("babble", 100, np.random.default_rng(1), [])


def test_reverb_limits_and_lengths(rng):
    x = rng.standard_normal(4000)
    # a vanishing RT60 leaves only the unit direct path
    np.testing.assert_allclose(C.apply_reverb(x, 1e-6, 0), x, atol=0)
    rir = C.synthetic_rir(0.3, np.random.default_rng(5))
    full = C.apply_reverb(x, 0.3, 5, trim=False)
    assert full.size == x.size + rir.size - 1
    assert C.apply_reverb(x, 0.3, 5).size == x.size


def test_rir_envelope_minus_60_db_at_rt60():
    rt60 = 0.25
    n = int(rt60 * C.SAMPLE_RATE)
    envelope = np.exp(-6.9078 * np.arange(2 * n) / C.SAMPLE_RATE / rt60)
    assert abs(20 * math.log10(envelope[n] / envelope[0]) + 60.0) < 0.01
    # the drawn tail follows that envelope: compare energy well before and at rt60
    rir = C.synthetic_rir(rt60, np.random.default_rng(0))
    early = np.mean(rir[100:1100] ** 2)
    late = np.mean(rir[n - 500 : n + 500] ** 2)
    assert abs(10 * math.log10(late / early) + 60.0 * (n - 600) / n) < 3.0


def test_condition_padding(speakers):
    r = np.random.default_rng(2)
    pieces = [C.synth_utterance_samples(speakers[0], 2.5, r)]
    for text, speech, pad in (("S4-N0", 4, 0.0), ("S4-N2", 4, 1.0), ("S1-N6", 1, 3.0)):
        cond = C.Condition.parse(text)
        pcm, mask, labels = C.pad_silence_condition(pieces, cond, r)
        n_pad = int(pad * C.SAMPLE_RATE)
        assert pcm.size == int((speech + 2 * pad) * C.SAMPLE_RATE)
        assert not mask[:n_pad].any() and not mask[pcm.size - n_pad :].any()
        assert np.all(np.abs(pcm[:n_pad]) < 1e-3)


@given(st.sampled_from([(1, 6), (2, 2), (3, 4), (0.5, 1)]))
def test_conditioned_duration_within_one_hop(cond):
    s, n = cond
    r = np.random.default_rng(int(10 * s + n))
    spk = C.make_speakers(1, r)[0]
    pcm, _, labels = C.pad_silence_condition(
        [C.synth_utterance_samples(spk, 1.0, r)], C.Condition(s, n, 10.0, "pink"), r
    )
    expected_frames = (s + n) * C.SAMPLE_RATE / DEFAULT_PARAMS.hop
    assert abs(labels.size - expected_frames) <= 3  # window overhang spans 2.5 hops


def test_condition_parse_errors():
    with pytest.raises(ValueError):
        C.Condition.parse("S1N2")
    with pytest.raises(ValueError):
        C.Condition(1, 2, None, "pink")


def test_trials():
    utts = [(f"s{s}_{j}", f"s{s}") for s in range(5) for j in range(6)]
    t = C.build_trials(utts, 100, 0.5, seed=3)
    assert sum(x[2] for x in t) == 50 and len(t) == 100
    assert all(e != u for e, u, _ in t)
    spk = dict(utts)
    assert all((spk[e] == spk[u]) == target for e, u, target in t)
    assert t == C.build_trials(utts, 100, 0.5, seed=3)
    with pytest.raises(ValueError):
        C.build_trials([("a", "s0"), ("b", "s0")], 10)


def test_trial_and_manifest_io(tmp_path):
    rows = [("a", "b", True), ("c", "d", False)]
    C.write_trials(tmp_path / "t.csv", rows)
    assert C.read_trials(tmp_path / "t.csv") == rows
    C.write_manifest(tmp_path / "m.csv", [{"utt_id": "a", "speaker_id": "s", "wav_path": "a.wav"}])
    assert C.read_manifest(tmp_path / "m.csv")[0]["utt_id"] == "a"


def test_speech_region_follows_frame_labels():
    mask = np.zeros(4000, bool)
    mask[1000:2500] = True
    region = C.speech_region(mask)
    labels = C.frame_labels(mask)
    # every speech frame owns hop samples; nothing else is in the region
    assert region.sum() == labels.sum() * 160
    assert C.frame_labels(region).tolist() == labels.tolist()
    short = np.array([False, True, True, False])
    np.testing.assert_array_equal(C.speech_region(short), short)
