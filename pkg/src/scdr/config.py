"""Run configuration: ``key = value`` text with ``[section]`` headers.

Every tunable of an experiment lives here.  Unknown sections or keys are
rejected so that a typo in, say, a loss weight name cannot silently fall
back to a default.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import EmbeddingConfig
from .data import SyntheticSpec
from .errors import ConfigError
from .model import LossWeights, TrainConfig
from .optim import LrSchedule


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# section -> key -> (parser, default); the defaults form the reference configuration
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "num_classes": (int, 5),
        "image_size": (_ints, (64, 64)),
        "chassis_size": (_floats, (30.0, 16.0)),
        "chassis_intensity": (float, 0.25),
        "background": (float, 0.06),
        "glyph_cell": (float, 3.0),
        "glyph_intensity": (float, 2.0),
        "glyph_offset": (float, 6.0),
        "clutter_count": (int, 6),
        "clutter_intensity": (_floats, (0.3, 0.7)),
        "clutter_sigma": (_floats, (1.5, 3.0)),
        "speckle": (_bool, True),
        "rotation": (_bool, False),
        "supersample": (int, 2),
        "seed": (int, 0),
        "train_per_class": (int, 40),
        "test_per_class": (int, 40),
    },
    "model": {
        "stage_channels": (_ints, (8, 16, 32)),
        "kernel": (int, 3),
        "input_shift": (float, 0.0),
        "input_scale": (float, 6.0),
        "mu": (float, 1.0),
        "margin": (float, 0.3),
    },
    "loss": {
        "lambda_whole": (float, 1.0),
        "lambda_local": (float, 0.5),
        "lambda_disc": (float, 0.5),
        "lambda_fuse": (float, 1.0),
    },
    "schedule": {
        "base_lr": (float, 0.2),
        "warmup_epochs": (int, 10),
        "decay_every": (int, 25),
        "decay_ratio": (float, 0.5),
    },
    "train": {
        "k": (int, 20),
        "epochs": (int, 60),
        "batch_classes": (int, 4),
        "batch_per_class": (int, 4),
        "seed": (int, 0),
        "augment_chips": (int, 0),
        "save_every": (int, 10),
    },
    "eval": {
        "mode": (str, "fused"),
    },
}

# keys that steer a run but do not change what a checkpoint means
RUN_CONTROL = {("train", "epochs"), ("train", "save_every"), ("eval", "mode")}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=lambda: {
        s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()
    })

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        parser = SCHEMA[section][key][0]
        if isinstance(value, str):
            try:
                value = parser(value)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
        self.values[section][key] = value

    def copy(self) -> RunConfig:
        return RunConfig({s: dict(kv) for s, kv in self.values.items()})

    # domain objects ------------------------------------------------------

    def spec(self) -> SyntheticSpec:
        d = {k: v for k, v in self["data"].items() if k not in ("train_per_class", "test_per_class")}
        return SyntheticSpec.from_dict(d)

    def embedding(self) -> EmbeddingConfig:
        m = self["model"]
        return EmbeddingConfig(
            input_size=tuple(self.get("data", "image_size")),
            stage_channels=tuple(m["stage_channels"]),
            kernel=m["kernel"],
            num_classes=self.get("data", "num_classes"),
            input_shift=m["input_shift"],
            input_scale=m["input_scale"],
        )

    def loss_weights(self) -> LossWeights:
        l = self["loss"]
        return LossWeights(l["lambda_whole"], l["lambda_local"], l["lambda_disc"], l["lambda_fuse"])

    def schedule(self) -> LrSchedule:
        s = self["schedule"]
        return LrSchedule(s["base_lr"], s["warmup_epochs"], s["decay_every"], s["decay_ratio"])

    def train_config(self) -> TrainConfig:
        t = self["train"]
        return TrainConfig(epochs=t["epochs"], batch_classes=t["batch_classes"],
                           batch_per_class=t["batch_per_class"], schedule=self.schedule(),
                           weights=self.loss_weights(), seed=t["seed"])

    def validate(self) -> RunConfig:
        try:
            self.spec().validate()
            self.embedding().validate()
            self.loss_weights()
            self.schedule()
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
        t = self["train"]
        if t["k"] < 1 or t["epochs"] < 0 or t["save_every"] < 1:
            raise ConfigError(f"invalid [train] values {t}")
        if t["k"] > self.get("data", "train_per_class"):
            raise ConfigError(f"k={t['k']} exceeds train_per_class={self.get('data', 'train_per_class')}")
        if self.get("eval", "mode") not in ("fused", "whole", "local"):
            raise ConfigError("[eval] mode must be fused, whole or local")
        return self

    # text form -----------------------------------------------------------

    def dumps(self) -> str:
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_fmt(self.values[section][key])}\n")
            out.write("\n")
        return out.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    def hash(self) -> str:
        """SHA-256 over everything except run-control keys."""
        lines = [f"{s}.{k}={_fmt(self.values[s][k])}" for s, keys in SCHEMA.items() for k in keys
                 if (s, k) not in RUN_CONTROL]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def loads(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            cfg.set(section, key, raw)
    return cfg.validate()


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text(), source=str(path))
