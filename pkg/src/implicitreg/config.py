"""Flat-file experiment configuration.

Format: one `section.key = value` per line, `#` comments and blank lines
ignored. Every key has a default; unknown keys are rejected with the key name
so typos fail loudly. Overrides arrive as extra `key=value` strings and go
through the same validation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

__all__ = ["ExperimentConfig", "parse_config_text", "load_config", "CONFIG_SCHEMA"]

EXPERIMENTS = (
    "scaling",
    "palindrome",
    "nstep-scaling",
    "nstep-first-order",
    "variance-oracle",
    "xi-check",
    "train",
    "sweep",
)

MODEL_KINDS = ("quadratic", "logistic", "mlp")
DATASET_KINDS = ("auto", "clusters", "xor", "csv")
SWEEP_PARAMETERS = ("epsilon", "lambda", "batch_size", "n_step")


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(part.strip()) for part in raw.split(","))


def _parse_float_list(raw: str) -> tuple[float, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(float(part.strip()) for part in raw.split(","))


# key -> (python type tag, default). The tag drives parsing and echo formatting.
CONFIG_SCHEMA: dict[str, tuple[str, object]] = {
    "experiment": ("choice:experiment", "scaling"),
    "model.kind": ("choice:model", "quadratic"),
    "model.dim": ("int", 4),
    "model.widths": ("int_list", (16, 64, 64, 2)),
    "model.activation": ("str", "tanh"),
    "model.init_seed": ("int", 0),
    "dataset.kind": ("choice:dataset", "auto"),
    "dataset.n": ("int", 8),
    "dataset.n_test": ("int", 0),
    "dataset.dim": ("int", 16),
    "dataset.noise": ("float", 0.0),
    "dataset.separation": ("float", 3.0),
    "dataset.seed": ("int", 0),
    "dataset.csv_path": ("str", ""),
    "dataset.test_csv_path": ("str", ""),
    "train.epsilon": ("float", 0.05),
    "train.lambda": ("float", 0.0),
    "train.batch_size": ("int", 2),
    "train.epochs": ("int", 100),
    "train.n_step": ("int", 1),
    "train.weight_decay": ("float", 0.0),
    "train.lr_decay": ("str", "none"),
    "train.reshuffle_each_epoch": ("bool", True),
    "train.eval_every": ("int", 1),
    "train.seed": ("int", 0),
    "verify.eps_max": ("float", 0.0),  # 0 = auto: 0.1 / m
    "verify.eps_points": ("int", 5),
    "verify.flow_substeps": ("int", 1000),
    "verify.mc_samples": ("int", 4000),
    "verify.enum_cap": ("int", 40320),
    "sweep.parameter": ("choice:sweep", "lambda"),
    "sweep.values": ("float_list", ()),
    "sweep.runs_per_point": ("int", 7),
    "sweep.keep_best": ("int", 5),
    "sweep.link_epsilon_to_batch": ("bool", False),
    "output.dir": ("str", "runs"),
}

_CHOICES = {
    "choice:experiment": EXPERIMENTS,
    "choice:model": MODEL_KINDS,
    "choice:dataset": DATASET_KINDS,
    "choice:sweep": SWEEP_PARAMETERS,
}


class ConfigError(ValueError):
    """Invalid configuration file, key, or value."""


def _convert(key: str, raw: str):
    tag, _ = CONFIG_SCHEMA[key]
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            return _parse_bool(raw)
        if tag == "int_list":
            return _parse_int_list(raw)
        if tag == "float_list":
            return _parse_float_list(raw)
        if tag.startswith("choice:"):
            if raw not in _CHOICES[tag]:
                raise ValueError(f"must be one of {', '.join(_CHOICES[tag])}")
            return raw
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved configuration: every schema key, defaults filled in."""

    values: dict[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def experiment(self) -> str:
        return self.values["experiment"]

    def echo_lines(self) -> list[str]:
        return [f"{k} = {_format(self.values[k])}" for k in sorted(self.values)]

    def validate(self) -> None:
        v = self.values
        if v["train.epsilon"] <= 0:
            raise ConfigError("train.epsilon: must be positive")
        if v["train.lambda"] < 0:
            raise ConfigError("train.lambda: must be >= 0")
        if v["train.n_step"] < 1:
            raise ConfigError("train.n_step: must be >= 1")
        if v["train.weight_decay"] < 0:
            raise ConfigError("train.weight_decay: must be >= 0")
        if v["train.batch_size"] < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if v["train.epochs"] < 0:
            raise ConfigError("train.epochs: must be >= 0")
        if v["train.eval_every"] < 1:
            raise ConfigError("train.eval_every: must be >= 1")
        if v["train.lr_decay"] not in ("none", "step_halving"):
            raise ConfigError("train.lr_decay: must be none or step_halving")
        if v["model.kind"] == "mlp":
            if len(v["model.widths"]) < 2:
                raise ConfigError("model.widths: need at least input and output sizes")
            if v["model.activation"] not in ("tanh", "relu"):
                raise ConfigError("model.activation: must be tanh or relu")
        if v["dataset.n"] < 1:
            raise ConfigError("dataset.n: must be >= 1")
        if v["verify.eps_points"] < 2:
            raise ConfigError("verify.eps_points: must be >= 2")
        if v["verify.flow_substeps"] < 100:
            raise ConfigError("verify.flow_substeps: must be >= 100")
        if v["verify.mc_samples"] < 2:
            raise ConfigError("verify.mc_samples: must be >= 2")
        if v["experiment"] == "sweep":
            if not v["sweep.values"]:
                raise ConfigError("sweep.values: a sweep needs at least one value")
            if v["sweep.runs_per_point"] < 1:
                raise ConfigError("sweep.runs_per_point: must be >= 1")
            if not 1 <= v["sweep.keep_best"] <= v["sweep.runs_per_point"]:
                raise ConfigError(
                    "sweep.keep_best: must be between 1 and sweep.runs_per_point"
                )
        if v["dataset.kind"] == "csv" and not v["dataset.csv_path"]:
            raise ConfigError("dataset.csv_path: required when dataset.kind = csv")


def parse_config_text(text: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Parse file contents plus `key=value` override strings."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, _, value = stripped.partition("=")
        raw[key.strip()] = value.split("#", 1)[0].strip()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()

    unknown = [k for k in raw if k not in CONFIG_SCHEMA]
    if unknown:
        raise ConfigError(
            "unknown config key(s): " + ", ".join(sorted(unknown))
        )
    values = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    for key, rawval in raw.items():
        values[key] = _convert(key, rawval)
    cfg = ExperimentConfig(values=values)
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), overrides)
