"""Command line entry point.

Every subcommand resolves its configuration (defaults, then ``--config``,
then ``--set`` overrides, then ``--seed``), writes it to the output directory
as config.ini and then does its work. Exit status is 0 on success, 1 on a
usage or configuration error and 2 when a gradient check fails.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import corpus as C
from . import pipeline as P
from .config import ConfigError, RunConfig, load_config
from .features import GlobalStats, write_wav
from .metrics import det_curve_export, metrics_report, score_trials, write_metrics_json
from .tensor.checkpoint import CheckpointError, dumps, loads
from .vad import write_frame_labels

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _say(text: str) -> None:
    print(text, flush=True)


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


# -- subcommands ---------------------------------------------------------------------------


def cmd_synth_data(cfg: RunConfig, out: Path, args) -> int:
    if cfg["corpus"]["manifest"]:
        raise UsageError("synth-data generates its own corpus; unset corpus.manifest")
    split = P.build_corpus(cfg)
    wav_dir = out / "wav"
    wav_dir.mkdir(exist_ok=True)
    rows, labels = [], {}
    for u in split.train + split.test:
        rel = Path("wav") / f"{u.utt_id}.wav"
        write_wav(out / rel, u.pcm)
        labels[u.utt_id] = u.labels
        rows.append(
            {
                "utt_id": u.utt_id,
                "speaker_id": u.speaker_id,
                "wav_path": str(rel),
                "S": f"{np.count_nonzero(u.mask) / C.SAMPLE_RATE:.3f}",
                "N": f"{np.count_nonzero(~u.mask) / C.SAMPLE_RATE:.3f}",
                "snr": "",
                "distortion": "none",
            }
        )
    C.write_manifest(out / "manifest.csv", rows)
    write_frame_labels(out / "labels.csv", labels)
    C.write_trials(out / "trials.csv", P.trial_list(cfg, split))
    _say(f"wrote {len(rows)} utterances from {len(split.speakers)} speakers to {out}")
    return EXIT_OK


def _save_vad(path: Path, exp: P.VadExperiment, cfg: RunConfig) -> None:
    arrays = {f"vad.{k}": v for k, v in exp.vad.state_dict().items()}
    arrays["feature_stats.mean"] = exp.stats.mean
    arrays["feature_stats.std"] = exp.stats.std
    path.write_bytes(dumps(arrays, {"auc": exp.auc, "losses": exp.losses, "config": cfg.to_ini()}))


def _load_vad(path: Path) -> tuple[dict, GlobalStats]:
    arrays, _ = loads(path.read_bytes())
    if "feature_stats.mean" not in arrays:
        raise CheckpointError(f"{path} is not a VAD checkpoint")
    weights = {k[4:]: v for k, v in arrays.items() if k.startswith("vad.")}
    return weights, GlobalStats(arrays["feature_stats.mean"], arrays["feature_stats.std"])


def cmd_train_vad(cfg: RunConfig, out: Path, args) -> int:
    exp = P.run_vad_experiment(cfg, eval_snr=args.eval_snr)
    _save_vad(out / "vad.ckpt", exp, cfg)
    write_metrics_json(out / "vad_metrics.json", {"auc": exp.auc, "eval_snr": args.eval_snr, "losses": exp.losses})
    _say(f"VAD frame AUC at {args.eval_snr:g} dB: {exp.auc:.4f}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    pretrained = _load_vad(_require(args.vad, "--vad checkpoint")) if args.vad else None
    split = P.build_corpus(cfg)
    system = P.train_system(cfg, split, pretrained, log=lambda s: _say(f"epoch {s['epoch']}: L_s={s['L_s']:.4f}"))
    P.save_run(out / "state.ckpt", system, cfg)
    P.write_training_log(out / "train_log.csv", system.state.history)
    write_metrics_json(out / "epoch_log.json", {"epoch_log": system.state.epoch_log})
    _say(f"saved {out / 'state.ckpt'}")
    return EXIT_OK


def _embedding_bytes(embeddings: dict[str, dict[str, np.ndarray]]) -> bytes:
    arrays = {f"{cond}/{utt}": vec for cond, table in embeddings.items() for utt, vec in table.items()}
    return dumps(arrays, {"conditions": list(embeddings)})


def _load_embeddings(path: Path) -> dict[str, dict[str, np.ndarray]]:
    arrays, meta = loads(path.read_bytes())
    out: dict[str, dict[str, np.ndarray]] = {c: {} for c in meta.get("conditions", [])}
    for key, vec in arrays.items():
        cond, _, utt = key.partition("/")
        out.setdefault(cond, {})[utt] = vec
    return out


def _run_config(args, cfg: RunConfig) -> tuple[RunConfig, P.TrainedSystem]:
    run_cfg, system = P.load_run(_require(args.checkpoint, "--checkpoint"))
    # evaluation settings and the seed may be changed at enroll time; the model may not
    for key in ("eval", "corpus"):
        run_cfg.values[key] = dict(cfg[key])
    return run_cfg, system


def cmd_enroll(cfg: RunConfig, out: Path, args) -> int:
    run_cfg, system = _run_config(args, cfg)
    split = P.build_corpus(run_cfg)
    embeddings = P.extract_condition_embeddings(run_cfg, split, system.model, system.stats)
    (out / "embeddings.ckpt").write_bytes(_embedding_bytes(embeddings))
    (out / "config.ini").write_text(run_cfg.to_ini())
    _say(f"embedded {len(split.test)} utterances under {len(embeddings)} condition(s)")
    return EXIT_OK


def cmd_score(cfg: RunConfig, out: Path, args) -> int:
    embeddings = _load_embeddings(_require(args.embeddings, "--embeddings"))
    if args.trials:
        trials = C.read_trials(_require(args.trials, "--trials"))
    else:
        trials = P.trial_list(cfg, P.build_corpus(cfg))
        C.write_trials(out / "trials.csv", trials)
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "enroll_id", "test_id", "target", "score"])
        for cond, table in embeddings.items():
            scores, targets = score_trials(trials, table)
            for (e, t, _), s, y in zip(trials, scores, targets):
                writer.writerow([cond, e, t, int(y), repr(float(s))])
    _say(f"scored {len(trials)} trials under {len(embeddings)} condition(s)")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    path = _require(args.scores, "--scores")
    by_cond: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            s, y = by_cond.setdefault(row["condition"], ([], []))
            s.append(float(row["score"]))
            y.append(row["target"] == "1")
    if not by_cond:
        raise UsageError(f"{path} holds no scores")
    report = {}
    for cond, (s, y) in by_cond.items():
        report[cond] = metrics_report(s, y)
        det_curve_export(s, y, out / f"det_{cond}.csv")
        _say(f"{cond}: EER {report[cond]['eer']:.4f}  AUC {report[cond]['auc']:.4f}")
    write_metrics_json(out / "metrics.json", {"conditions": report})
    P.emit_report([("system", {c: m["eer"] for c, m in report.items()})], out / "report.csv")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    rows = P.run_ablation(cfg, out, log=_say)
    P.emit_report(rows, out / "report.csv")
    _say(f"wrote {out / 'report.csv'}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> int:
    from .gradsuite import run_suite

    results = run_suite(cfg["run"]["seed"], include_model=not args.skip_model,
                        log=lambda r: _say(
                            f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.error:.3e} (< {r.tolerance:g})"
                            + (f", {r.kinks}/{r.probes} probes on kinks" if r.kinks else "")))
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "rel_error", "tolerance", "passed", "probes", "kinks", "seconds"])
        for r in results:
            writer.writerow([r.name, repr(r.error), r.tolerance, int(r.passed), r.probes, r.kinks, f"{r.seconds:.3f}"])
    failed = [r.name for r in results if not r.passed]
    if failed:
        _say(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}")
        return EXIT_CHECK
    _say(f"all {len(results)} gradient checks passed")
    return EXIT_OK


COMMANDS = {
    "synth-data": (cmd_synth_data, "synthesize the corpus: WAVs, manifest, frame labels, trials"),
    "train-vad": (cmd_train_vad, "pre-train the VAD on noisy synthetic utterances"),
    "train": (cmd_train, "train the speaker system (SAS-VAD when the VAD is enabled)"),
    "enroll": (cmd_enroll, "extract embeddings for the held-out utterances"),
    "score": (cmd_score, "cosine-score a trial list"),
    "eval": (cmd_eval, "EER, AUC and DET points from scored trials"),
    "ablate": (cmd_ablate, "train and evaluate each FPM/VAD/FL/SE on-off row"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file overriding the defaults")
    common.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting, e.g. train.epochs=3 (repeatable)")
    parser = _Parser(prog="svuf", description="Unified speaker verification toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "train-vad":
            p.add_argument("--eval-snr", type=float, default=5.0, help="SNR of the held-out AUC check")
        if name == "train":
            p.add_argument("--vad", help="pre-trained VAD checkpoint from train-vad")
        if name == "enroll":
            p.add_argument("--checkpoint", help="state.ckpt written by train")
        if name == "score":
            p.add_argument("--embeddings", help="embeddings.ckpt written by enroll")
            p.add_argument("--trials", help="trial CSV (default: regenerate from the config)")
        if name == "eval":
            p.add_argument("--scores", help="scores.csv written by score")
        if name == "gradcheck":
            p.add_argument("--skip-model", action="store_true", help="skip the full tiny model check")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini())
        handler = COMMANDS[args.command][0]
        return handler(cfg, out, args)
    except (ConfigError, UsageError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"svuf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
