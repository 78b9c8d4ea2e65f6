import csv
import json

import numpy as np
import pytest

from svuf.cli import main
from svuf.config import ConfigError, load_config
from svuf.pipeline import ablation_overrides, emit_report, load_run, run_bytes, run_experiment

TINY = [
    "corpus.n_speakers=3",
    "corpus.utts_per_speaker=5",
    "corpus.test_per_speaker=2",
    "corpus.n_trials=20",
    "model.width_multiplier=0.125",
    "model.blocks_per_stage=1,1,1,1",
    "model.embed_dim=16",
    "train.epochs=1",
    "train.batch_size=8",
]


def sets(*items):
    out = []
    for item in items:
        out += ["--set", item]
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- configuration ----------------------------------------------------------------------


def test_overrides_and_seed(tmp_path):
    ini = tmp_path / "a.ini"
    ini.write_text("[train]\nepochs = 3\n[model]\nuse_vad = yes\n")
    cfg = load_config(ini, ["train.epochs=4"], seed=9)
    assert cfg["train"]["epochs"] == 4 and cfg["model"]["use_vad"] is True and cfg["run"]["seed"] == 9
    assert load_config(overrides=[]).to_ini() == load_config().to_ini()


@pytest.mark.parametrize(
    "bad, named",
    [("train.nope=1", "train.nope"), ("nosection.x=1", "nosection"),
     ("train.epochs=many", "train.epochs"), ("noequals", "noequals")],
)
def test_bad_overrides_name_the_problem(bad, named):
    with pytest.raises(ConfigError) as err:
        load_config(overrides=[bad])
    assert named in str(err.value)


def test_ini_roundtrip():
    cfg = load_config(overrides=["eval.conditions=S1-N6", "train.lam=2.5"])
    again = load_config()
    again.update_from_ini(cfg.to_ini())
    assert again.values == cfg.values


# -- report layout -------------------------------------------------------------------------


def test_report_single_condition(tmp_path):
    emit_report([("sys", {"clean": 0.25})], tmp_path / "r.csv")
    assert read_csv(tmp_path / "r.csv") == [["name", "clean"], ["sys", "0.25"]]


def test_report_average_column(tmp_path):
    conds = ["S1-N6", "S2-N6", "S3-N6", "S4-N6"]
    vals = {c: v for c, v in zip(conds, [0.3, 0.1, 0.07, 0.05])}
    emit_report([("a", vals), ("b", {c: 2 * v for c, v in vals.items()})], tmp_path / "r.csv")
    rows = read_csv(tmp_path / "r.csv")
    assert rows[0] == ["name"] + conds + ["Avg"]
    for row in rows[1:]:
        nums = [float(x) for x in row[1:]]
        assert abs(nums[-1] - np.mean(nums[:-1])) < 1e-12


def test_ablation_rows():
    assert ablation_overrides("0000")[0] == "baseline"
    name, items = ablation_overrides("1100")
    assert name == "FPM+VAD" and "train.lam=0" in items and "train.eta_v=0" in items
    name, items = ablation_overrides("1111")
    assert name == "FPM+VAD+FL+SE" and "model.use_se=True" in items and "train.lam=0" not in items
    with pytest.raises(ValueError):
        ablation_overrides("0010")
    with pytest.raises(ValueError):
        ablation_overrides("10")


# -- command line --------------------------------------------------------------------------


def test_missing_manifest_exit_1(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path), "--set", f"corpus.manifest={tmp_path / 'none.csv'}"])
    assert code == 1
    assert "none.csv" in capsys.readouterr().err


def test_unknown_key_exit_1(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "train.learning_rate=1"]) == 1
    assert "train.learning_rate" in capsys.readouterr().err


def test_unknown_subcommand_exit_1():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 1


def test_gradcheck_ops_only(tmp_path):
    assert main(["gradcheck", "--skip-model", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "gradcheck.csv")
    assert len(rows) > 30 and all(r[3] == "1" for r in rows[1:])
    assert (tmp_path / "config.ini").is_file()


def test_cli_end_to_end(tmp_path):
    data, run, emb, sc, ev = (tmp_path / n for n in ("data", "run", "emb", "score", "eval"))
    assert main(["synth-data", "--out", str(data)] + sets(*TINY)) == 0
    manifest = data / "manifest.csv"
    assert len(read_csv(manifest)) == 16 and (data / "labels.csv").is_file()
    common = sets(*TINY, f"corpus.manifest={manifest}")
    assert main(["train", "--out", str(run)] + common) == 0
    assert main(["enroll", "--out", str(emb), "--checkpoint", str(run / "state.ckpt")] + common) == 0
    assert main(["score", "--out", str(sc), "--embeddings", str(emb / "embeddings.ckpt"),
                 "--trials", str(data / "trials.csv")] + common) == 0
    assert main(["eval", "--out", str(ev), "--scores", str(sc / "scores.csv")] + common) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert 0.0 <= metrics["conditions"]["clean"]["eer"] <= 1.0
    assert read_csv(ev / "report.csv")[0] == ["name", "clean"]
    for d in (data, run, emb, sc, ev):
        assert (d / "config.ini").is_file()


# -- reproducibility and checkpoints ----------------------------------------------------------


def test_run_reproducible_and_checkpoint_roundtrip(tmp_path):
    cfg = load_config(overrides=TINY, seed=3)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a/metrics.json").read_bytes() == (tmp_path / "b/metrics.json").read_bytes()
    assert a.metrics == b.metrics
    blob = (tmp_path / "a/state.ckpt").read_bytes()
    assert blob == (tmp_path / "b/state.ckpt").read_bytes()
    loaded_cfg, system = load_run(tmp_path / "a/state.ckpt")
    assert run_bytes(system, loaded_cfg) == blob


def test_truncated_checkpoint_refused(tmp_path, capsys):
    cfg = load_config(overrides=TINY)
    run_experiment(cfg, tmp_path / "a")
    blob = (tmp_path / "a/state.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(blob[: len(blob) // 2])
    code = main(["enroll", "--out", str(tmp_path / "e"), "--checkpoint", str(tmp_path / "bad.ckpt")] + sets(*TINY))
    assert code == 1
    assert "bytes" in capsys.readouterr().err
