"""Run configuration: typed defaults, overlaid by an INI-style file and then by
``section.key=value`` overrides. Unknown sections or keys are errors that name
the offending key."""

from __future__ import annotations

import configparser
import copy
import io
from pathlib import Path
from typing import Any, Iterable, Optional, Union

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0},
    "corpus": {
        "n_speakers": 20,
        "utts_per_speaker": 50,
        "test_per_speaker": 10,
        "min_duration": 1.5,
        "max_duration": 2.5,
        "n_trials": 3000,
        "target_fraction": 0.5,
        "manifest": "",
    },
    "features": {"kind": "fbank64"},
    "model": {
        "variant": "2d",
        "width_multiplier": 0.25,
        "blocks_per_stage": "3,4,6,3",
        "use_fpm": True,
        "stages": "2,3,4,5",
        "pooling": "sap",
        "embed_dim": 128,
        "use_se": False,
        "use_vad": False,
        "vad_arch": "dnn",
        "vad_stages": "2,3,4,5",
    },
    "train": {
        "epochs": 10,
        "segment_frames": 32,
        "batch_size": 64,
        "eta_s": 0.1,
        "eta_v": 1e-3,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "decay_at": "0.5,0.75",
        "decay_factor": 0.1,
        "lam": 4.0,
        "gamma": 0.5,
        "delta": 0.7,
    },
    "vad_train": {
        "epochs": 5,
        "segment_frames": 100,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "snrs": "0,5,10",
        "noises": "white,pink,chirp,babble",
    },
    "eval": {
        "conditions": "",
        "snr": "",
        "distortion": "none",
        "enroll_average": False,
        "random_control": True,
    },
    "ablate": {"rows": "0000,1000,1001,1100,1110,1111"},
}


class ConfigError(ValueError):
    pass


def _coerce(section: str, key: str, raw: str, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


class RunConfig:
    """Fully resolved configuration; ``cfg["train"]["epochs"]`` style access."""

    def __init__(self, values: Optional[dict[str, dict[str, Any]]] = None):
        self.values = copy.deepcopy(DEFAULTS if values is None else values)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def set(self, dotted: str, raw: str) -> None:
        section, sep, key = dotted.partition(".")
        if not sep:
            raise ConfigError(f"override {dotted!r} must look like section.key=value")
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = _coerce(section, key, str(raw), DEFAULTS[section][key])

    def update_from_ini(self, text: str) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                self.set(f"{section}.{key}", raw)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, entries in self.values.items():
            parser[section] = {k: str(v) for k, v in entries.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def copy(self) -> "RunConfig":
        return RunConfig(self.values)


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = (), seed: Optional[int] = None
) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        cfg.update_from_ini(text)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        cfg.set(key.strip(), value.strip())
    if seed is not None:
        cfg.set("run.seed", str(seed))
    return cfg


def int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in str(text).split(",") if x.strip())
