"""End-to-end experiment plumbing shared by the command line and the
acceptance tests: corpus, features, (optional) VAD pre-training, joint
training, embedding extraction and trial evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import corpus as C
from .config import RunConfig, float_list, int_list, str_list
from .extractor import ResNetConfig, SpeakerNetConfig
from .features import GlobalStats, extract, global_standardize, global_stats, read_wav
from .metrics import compute_auc, det_curve_export, metrics_report, score_trials, write_metrics_json
from .model import SpeakerSystem, SystemConfig
from .rng import stream
from .tensor.checkpoint import CheckpointError, dumps, loads
from .training import (
    SasVadConfig,
    TrainConfig,
    TrainItem,
    TrainState,
    VadTrainConfig,
    extract_embeddings,
    pretrain_vad,
    train,
    vad_posteriors,
    write_training_log,
)
from .vad import VadNet, VadNetConfig


@dataclass
class CorpusSplit:
    speakers: list
    train: list  # list[C.Utterance]
    test: list


def system_config(cfg: RunConfig, n_speakers: int) -> SystemConfig:
    m = cfg["model"]
    kind = cfg["features"]["kind"]
    resnet = ResNetConfig(
        variant=m["variant"],
        width_multiplier=m["width_multiplier"],
        blocks_per_stage=int_list(m["blocks_per_stage"]),
        input_kind=kind,
    )
    speaker = SpeakerNetConfig(
        resnet=resnet,
        use_fpm=m["use_fpm"],
        stages=int_list(m["stages"]),
        pooling=m["pooling"],
        embed_dim=m["embed_dim"],
        n_speakers=n_speakers,
    )
    return SystemConfig(
        speaker=speaker,
        use_se=m["use_se"],
        use_vad=m["use_vad"],
        vad=VadNetConfig(arch=m["vad_arch"], feature_dim=resnet.dim),
        vad_stages=int_list(m["vad_stages"]),
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"],
        segment_frames=t["segment_frames"],
        batch_size=t["batch_size"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        decay_at=float_list(t["decay_at"]),
        decay_factor=t["decay_factor"],
        sas=SasVadConfig(delta=t["delta"], lam=t["lam"], gamma=t["gamma"], eta_v=t["eta_v"], eta_s=t["eta_s"]),
    )


# -- corpus -----------------------------------------------------------------------


def _read_labels(path: Path) -> dict[str, np.ndarray]:
    labels: dict[str, list[int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            labels.setdefault(row["utt_id"], []).append(int(row["label"]))
    return {k: np.asarray(v, dtype=np.int8) for k, v in labels.items()}


def load_manifest_corpus(path: Union[str, Path]) -> list[C.Utterance]:
    """Utterances listed in a manifest; speech masks come from a sibling labels.csv."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus manifest {path} does not exist")
    rows = C.read_manifest(path)
    label_file = path.with_name("labels.csv")
    labels = _read_labels(label_file) if label_file.is_file() else {}
    utts = []
    for row in rows:
        wav = Path(row["wav_path"])
        pcm, _ = read_wav(wav if wav.is_absolute() else path.parent / wav)
        lab = labels.get(row["utt_id"])
        mask = C.frame_mask_to_samples(lab, pcm.size) if lab is not None else np.ones(pcm.size, bool)
        utts.append(C.Utterance(row["utt_id"], row["speaker_id"], pcm, mask))
    return utts


def build_corpus(cfg: RunConfig) -> CorpusSplit:
    c = cfg["corpus"]
    seed = cfg["run"]["seed"]
    if c["manifest"]:
        utts = load_manifest_corpus(c["manifest"])
        speakers = sorted({u.speaker_id for u in utts})
    else:
        rng = stream(seed, "corpus")
        speakers, utts = C.synth_corpus(
            c["n_speakers"], c["utts_per_speaker"], rng, (c["min_duration"], c["max_duration"])
        )
    by_spk: dict[str, list] = {}
    for u in utts:
        by_spk.setdefault(u.speaker_id, []).append(u)
    n_test = c["test_per_speaker"]
    train_utts, test_utts = [], []
    for spk in sorted(by_spk):
        group = by_spk[spk]
        if n_test >= len(group):
            raise ValueError(f"speaker {spk} has {len(group)} utterances; cannot hold out {n_test}")
        train_utts += group[: len(group) - n_test]
        test_utts += group[len(group) - n_test :]
    return CorpusSplit(speakers, train_utts, test_utts)


# -- features -------------------------------------------------------------------------


def make_items(
    utts: Sequence[C.Utterance], kind: str, speaker_index: Mapping[str, int], stats: Optional[GlobalStats] = None
) -> list[TrainItem]:
    items = []
    for u in utts:
        feats = extract(u.pcm, kind)
        items.append(TrainItem(u.utt_id, speaker_index.get(u.speaker_id, -1), feats))
    if stats is not None:
        for item in items:
            item.feats_vad = global_standardize(item.feats, stats)
    return items


def noisy_vad_data(
    utts: Sequence[C.Utterance],
    kind: str,
    rng: np.random.Generator,
    snrs: Sequence[float],
    noises: Sequence[str],
    babble_speakers: Sequence = (),
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Silence-padded, noise-corrupted versions of ``utts`` with frame labels."""
    out = []
    for u in utts:
        pad = int(rng.uniform(0.2, 1.0) * C.SAMPLE_RATE)
        pcm = np.concatenate([C.DITHER * rng.standard_normal(pad), u.pcm, C.DITHER * rng.standard_normal(pad)])
        mask = np.concatenate([np.zeros(pad, bool), u.mask, np.zeros(pad, bool)])
        kind_noise = noises[int(rng.integers(len(noises)))]
        snr = float(snrs[int(rng.integers(len(snrs)))])
        noise = C.make_noise(kind_noise, pcm.size, rng, babble_speakers)
        pcm = C.add_noise_at_snr(pcm, noise, snr, C.speech_region(mask))
        out.append((extract(pcm, kind), C.frame_labels(mask)))
    return out


def vad_train_config(cfg: RunConfig) -> VadTrainConfig:
    v = cfg["vad_train"]
    return VadTrainConfig(
        epochs=v["epochs"],
        segment_frames=v["segment_frames"],
        batch_size=v["batch_size"],
        learning_rate=v["learning_rate"],
    )


@dataclass
class VadExperiment:
    vad: VadNet
    stats: GlobalStats
    losses: list
    auc: float


def run_vad_experiment(cfg: RunConfig, split: Optional[CorpusSplit] = None, eval_snr: float = 5.0) -> VadExperiment:
    """Pre-train a VAD on noisy training utterances and measure frame AUC on noisy held-out ones."""
    seed = cfg["run"]["seed"]
    split = split or build_corpus(cfg)
    kind = cfg["features"]["kind"]
    v = cfg["vad_train"]
    noises = str_list(v["noises"])
    babble = split.speakers if not isinstance(split.speakers[0], str) else ()
    if not babble:
        noises = tuple(n for n in noises if n != "babble")
    data = noisy_vad_data(split.train, kind, stream(seed, "vad-data"), float_list(v["snrs"]), noises, babble)
    stats = global_stats([f for f, _ in data])
    data = [(global_standardize(f, stats), lab) for f, lab in data]
    vad = VadNet(VadNetConfig(arch=cfg["model"]["vad_arch"], feature_dim=data[0][0].shape[0]), stream(seed, "vad-init"))
    losses = pretrain_vad(vad, data, vad_train_config(cfg), stream(seed, "vad-sampling"))
    test = noisy_vad_data(split.test, kind, stream(seed, "vad-eval"), (eval_snr,), noises, babble)
    scores = np.concatenate([vad_posteriors(vad, global_standardize(f, stats)) for f, _ in test])
    labels = np.concatenate([lab for _, lab in test]) > 0
    return VadExperiment(vad, stats, losses, compute_auc(scores, labels))


# -- evaluation conditions --------------------------------------------------------------


def condition_items(
    split: CorpusSplit,
    cond: Optional[C.Condition],
    kind: str,
    stats: Optional[GlobalStats],
    rng: np.random.Generator,
) -> list[TrainItem]:
    """Test items for one condition; None means the clean held-out utterances as they are."""
    if cond is None:
        return make_items(split.test, kind, {}, stats)
    by_spk: dict[str, list] = {}
    for u in split.test:
        by_spk.setdefault(u.speaker_id, []).append(u)
    babble = split.speakers if not isinstance(split.speakers[0], str) else ()
    out = []
    for u in split.test:
        others = [o for o in by_spk[u.speaker_id] if o is not u]
        pieces = [(u.pcm, u.mask)] + [(o.pcm, o.mask) for o in others]
        pcm, mask, _ = C.pad_silence_condition(pieces, cond, rng, babble)
        out.append(C.Utterance(u.utt_id, u.speaker_id, pcm, mask))
    return make_items(out, kind, {}, stats)


def parse_conditions(cfg: RunConfig) -> list[Optional[C.Condition]]:
    e = cfg["eval"]
    names = str_list(e["conditions"])
    if not names:
        return [None]
    snr = float(e["snr"]) if str(e["snr"]).strip() else None
    return [C.Condition.parse(n, snr, e["distortion"]) for n in names]


# -- training, evaluation and the full experiment --------------------------------------------


@dataclass
class TrainedSystem:
    state: TrainState
    stats: Optional[GlobalStats]
    vad_pretrain: Optional[VadExperiment] = None

    @property
    def model(self) -> SpeakerSystem:
        return self.state.model


def train_system(
    cfg: RunConfig,
    split: Optional[CorpusSplit] = None,
    pretrained_vad: Optional[tuple[dict, GlobalStats]] = None,
    log: Optional[Callable[[dict], None]] = None,
) -> TrainedSystem:
    """Build and train the configured system on the training split.

    With the VAD enabled and no ``pretrained_vad`` (weights, feature stats)
    given, the VAD is pre-trained first.
    """
    seed = cfg["run"]["seed"]
    split = split or build_corpus(cfg)
    spk_ids = sorted({u.speaker_id for u in split.train})
    index = {s: i for i, s in enumerate(spk_ids)}
    sys_cfg = system_config(cfg, len(spk_ids))

    stats, vad_pre, vad_state = None, None, None
    if sys_cfg.use_vad:
        if pretrained_vad is None:
            vad_pre = run_vad_experiment(cfg, split)
            vad_state, stats = vad_pre.vad.state_dict(), vad_pre.stats
        else:
            vad_state, stats = pretrained_vad
    items = make_items(split.train, cfg["features"]["kind"], index, stats)

    model = SpeakerSystem(sys_cfg, stream(seed, "init"))
    state = TrainState(model, train_config(cfg), seed, stream(seed, "sampling"))
    if sys_cfg.use_vad:
        state.load_pretrained_vad(vad_state)
    train(items, state, log)
    return TrainedSystem(state, stats, vad_pre)


def trial_list(cfg: RunConfig, split: CorpusSplit) -> list[tuple[str, str, bool]]:
    return C.build_trials(
        [(u.utt_id, u.speaker_id) for u in split.test],
        cfg["corpus"]["n_trials"],
        cfg["corpus"]["target_fraction"],
        seed=int(stream(cfg["run"]["seed"], "trials").integers(2**31)),
    )


def enroll_sets(cfg: RunConfig, split: CorpusSplit, trials) -> Optional[dict[str, list[str]]]:
    """Per-speaker enrollment averaging sets when enabled (the test utterance itself excluded)."""
    if not cfg["eval"]["enroll_average"]:
        return None
    by_spk: dict[str, list[str]] = {}
    for u in split.test:
        by_spk.setdefault(u.speaker_id, []).append(u.utt_id)
    spk_of = {u.utt_id: u.speaker_id for u in split.test}
    return {e: [x for x in by_spk[spk_of[e]] if x != t] for e, t, _ in trials}


def condition_name(cond: Optional[C.Condition]) -> str:
    return cond.name if cond is not None else "clean"


def extract_condition_embeddings(
    cfg: RunConfig, split: CorpusSplit, model: SpeakerSystem, stats: Optional[GlobalStats]
) -> dict[str, dict[str, np.ndarray]]:
    """condition name -> {utt_id: embedding} for every held-out utterance."""
    kind = cfg["features"]["kind"]
    cond_rng = stream(cfg["run"]["seed"], "conditions")
    out = {}
    for cond in parse_conditions(cfg):
        items = condition_items(split, cond, kind, stats, cond_rng)
        out[condition_name(cond)] = extract_embeddings(model, items)
    return out


def random_embeddings(cfg: RunConfig, split: CorpusSplit, dim: int) -> dict[str, np.ndarray]:
    ctrl = stream(cfg["run"]["seed"], "control")
    return {u.utt_id: ctrl.standard_normal(dim) for u in split.test}


def evaluate_embeddings(
    cfg: RunConfig,
    split: CorpusSplit,
    embeddings: Mapping[str, Mapping[str, np.ndarray]],
    trials,
    out_dir: Optional[Union[str, Path]] = None,
) -> dict:
    sets = enroll_sets(cfg, split, trials)
    report = {}
    for name, emb in embeddings.items():
        scores, targets = score_trials(trials, emb, sets)
        report[name] = metrics_report(scores, targets)
        if out_dir is not None:
            det_curve_export(scores, targets, Path(out_dir) / f"det_{name}.csv")
    return report


@dataclass
class ExperimentResult:
    metrics: dict
    system: TrainedSystem
    embeddings: dict = field(default_factory=dict)

    @property
    def state(self) -> TrainState:
        return self.system.state


def run_experiment(
    cfg: RunConfig,
    out_dir: Optional[Union[str, Path]] = None,
    log: Optional[Callable[[dict], None]] = None,
    split: Optional[CorpusSplit] = None,
    pretrained_vad: Optional[tuple[dict, GlobalStats]] = None,
) -> ExperimentResult:
    """Train the configured system and evaluate it on held-out trials.

    All randomness comes from named substreams of ``run.seed``, so two runs
    of one configuration give identical metrics.
    """
    split = split or build_corpus(cfg)
    system = train_system(cfg, split, pretrained_vad, log)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    trials = trial_list(cfg, split)
    embeddings = extract_condition_embeddings(cfg, split, system.model, system.stats)
    metrics: dict = {
        "conditions": evaluate_embeddings(cfg, split, embeddings, trials, out_dir),
        "epoch_log": system.state.epoch_log,
    }
    if cfg["eval"]["random_control"]:
        rand = random_embeddings(cfg, split, system.model.cfg.speaker.embed_dim)
        metrics["random_control"] = metrics_report(*score_trials(trials, rand))
    if system.vad_pretrain is not None:
        metrics["vad_pretrain"] = {"auc": system.vad_pretrain.auc, "losses": system.vad_pretrain.losses}

    if out_dir is not None:
        out = Path(out_dir)
        (out / "config.ini").write_text(cfg.to_ini())
        write_metrics_json(out / "metrics.json", metrics)
        write_training_log(out / "train_log.csv", system.state.history)
        C.write_trials(out / "trials.csv", trials)
        save_run(out / "state.ckpt", system, cfg)
    return ExperimentResult(metrics, system, embeddings)


# -- run checkpoints -------------------------------------------------------------------


def run_bytes(system: TrainedSystem, cfg: RunConfig) -> bytes:
    """Training state plus the feature statistics and resolved config that produced it."""
    arrays = system.state.arrays()
    if system.stats is not None:
        arrays["feature_stats.mean"] = system.stats.mean
        arrays["feature_stats.std"] = system.stats.std
    meta = dict(system.state.meta())
    meta["config"] = cfg.to_ini()
    return dumps(arrays, meta)


def save_run(path: Union[str, Path], system: TrainedSystem, cfg: RunConfig) -> None:
    Path(path).write_bytes(run_bytes(system, cfg))


def load_run(path: Union[str, Path]) -> tuple[RunConfig, TrainedSystem]:
    blob = Path(path).read_bytes()
    arrays, meta = loads(blob)
    if "config" not in meta:
        raise CheckpointError(f"{path} is not a training run checkpoint (no config)")
    cfg = RunConfig()
    cfg.update_from_ini(meta["config"])
    n_speakers = int(arrays["model.speaker.fc2.weight"].shape[1])
    model = SpeakerSystem(system_config(cfg, n_speakers), stream(cfg["run"]["seed"], "init"))
    state = TrainState(model, train_config(cfg), cfg["run"]["seed"], stream(cfg["run"]["seed"], "sampling"))
    state.load_bytes(blob)
    stats = None
    if "feature_stats.mean" in arrays:
        stats = GlobalStats(arrays["feature_stats.mean"], arrays["feature_stats.std"])
    return cfg, TrainedSystem(state, stats)


# -- ablation ------------------------------------------------------------------------------

ABLATION_COMPONENTS = ("fpm", "vad", "fl", "se")


def ablation_overrides(flags: str) -> tuple[str, list[str]]:
    """Map a four-character on/off string over (FPM, VAD, FL, SE) to a row name and overrides.

    FL is the self-adaptive part of the soft VAD: with it the VAD keeps
    training through the focal SP-DA loss, without it the pre-trained VAD is
    frozen (lambda 0, eta_v 0).
    """
    if len(flags) != 4 or set(flags) - {"0", "1"}:
        raise ValueError(f"ablation row {flags!r} must be four 0/1 characters for {ABLATION_COMPONENTS}")
    on = dict(zip(ABLATION_COMPONENTS, (c == "1" for c in flags)))
    if on["fl"] and not on["vad"]:
        raise ValueError(f"ablation row {flags!r} enables FL without the VAD")
    sets = [
        f"model.use_fpm={on['fpm']}",
        f"model.use_vad={on['vad']}",
        f"model.use_se={on['se']}",
    ]
    if on["vad"] and not on["fl"]:
        sets += ["train.lam=0", "train.eta_v=0"]
    name = "+".join(c.upper() for c in ABLATION_COMPONENTS if on[c]) or "baseline"
    return name, sets


def run_ablation(
    cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None, log: Optional[Callable[[str], None]] = None
) -> list[tuple[str, dict[str, float]]]:
    """One row of per-condition EERs per configured on/off combination."""
    split = build_corpus(cfg)
    rows = []
    for flags in str_list(cfg["ablate"]["rows"]):
        name, sets = ablation_overrides(flags)
        run_cfg = cfg.copy()
        for item in sets:
            key, _, value = item.partition("=")
            run_cfg.set(key, value)
        sub = Path(out_dir) / name if out_dir is not None else None
        result = run_experiment(run_cfg, sub, split=split)
        rows.append((name, {c: m["eer"] for c, m in result.metrics["conditions"].items()}))
        if log is not None:
            log(f"{name}: " + ", ".join(f"{c}={v:.4f}" for c, v in rows[-1][1].items()))
    return rows


def emit_report(rows: Sequence[tuple[str, Mapping[str, float]]], path: Union[str, Path]) -> None:
    """CSV with one row per configuration and one column per condition.

    With more than one condition an ``Avg`` column holds the row mean; a
    single condition gives a two-column (name, value) table.
    """
    if not rows:
        raise ValueError("nothing to report")
    conds = list(rows[0][1])
    if not conds:
        raise ValueError("at least one evaluated condition is needed")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name"] + conds + (["Avg"] if len(conds) > 1 else []))
        for name, values in rows:
            vals = [float(values[c]) for c in conds]
            extra = [float(np.mean(vals))] if len(conds) > 1 else []
            writer.writerow([name] + [repr(v) for v in vals + extra])
