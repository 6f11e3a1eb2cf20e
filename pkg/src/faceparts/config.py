"""Run configuration: a sectioned key = value file with '#' comments.

Four sections group the knobs: [data] for dataset paths, [model] for
architecture scale and seed, [train] for the two-stage trainer, and
[fusion] for committee decisions.  Unknown sections or keys are rejected
so typos fail loudly, and the resolved configuration can be re-emitted
verbatim for logging.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace

from .errors import ConfigError
from .training import TrainConfig

AGGREGATORS = ("hrp", "product", "median")
THRESHOLD_MODES = ("optimal", "fixed")


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of the pipeline with its documented default."""

    # [data]
    dataset_dir: str = ""
    image_size: int | None = None
    # [model]
    width_scale: float = 1.0
    seed: int = 0
    # [train]
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    keep_per_attribute: int = 7
    segment_dropout: float = 0.3
    flip_prob: float = 0.5
    partial_mix: float = 0.3
    tau: float = 0.5
    # [fusion]
    committee_size: int = 5
    aggregator: str = "product"
    threshold_mode: str = "optimal"

    def __post_init__(self):
        if self.width_scale <= 0.0:
            raise ConfigError(f"width_scale must be > 0, got {self.width_scale}")
        if self.image_size is not None and self.image_size <= 0:
            raise ConfigError(f"image_size must be > 0, got {self.image_size}")
        if self.committee_size < 1:
            raise ConfigError(
                f"committee_size must be >= 1, got {self.committee_size}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(
                f"aggregator {self.aggregator!r} not in {AGGREGATORS}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ConfigError(
                f"threshold_mode {self.threshold_mode!r} not in "
                f"{THRESHOLD_MODES}")
        self.train_config()  # reuse the trainer's field validation

    def train_config(self) -> TrainConfig:
        return TrainConfig(stage1_epochs=self.stage1_epochs,
                           stage2_epochs=self.stage2_epochs,
                           batch_size=self.batch_size,
                           learning_rate=self.learning_rate,
                           keep_per_attribute=self.keep_per_attribute,
                           segment_dropout=self.segment_dropout,
                           flip_prob=self.flip_prob,
                           partial_mix=self.partial_mix,
                           tau=self.tau, seed=self.seed)


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_str(text: str) -> str:
    return text


def _parse_optional_int(text: str):
    return None if text.lower() in ("", "none") else int(text)


_SCHEMA = {
    "data": {"dataset_dir": _parse_str, "image_size": _parse_optional_int},
    "model": {"width_scale": _parse_float, "seed": _parse_int},
    "train": {"stage1_epochs": _parse_int, "stage2_epochs": _parse_int,
              "batch_size": _parse_int, "learning_rate": _parse_float,
              "keep_per_attribute": _parse_int,
              "segment_dropout": _parse_float, "flip_prob": _parse_float,
              "partial_mix": _parse_float, "tau": _parse_float},
    "fusion": {"committee_size": _parse_int, "aggregator": _parse_str,
               "threshold_mode": _parse_str},
}

_FIELD_SECTION = {key: section for section, keys in _SCHEMA.items()
                  for key in keys}


def load_config(path) -> RunConfig:
    """Parse a config file; unknown sections, keys, or bad values fail."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",),
                                       comment_prefixes=("#",), strict=True)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except configparser.Error as err:
        raise ConfigError(f"malformed config {path}: {err}") from err

    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                values[key] = _SCHEMA[section][key](raw)
            except ValueError as err:
                raise ConfigError(
                    f"{path}: bad value for {key!r}: {raw!r}") from err
    return RunConfig(**values)


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """New config with the non-None overrides applied (flags beat files)."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    for key in changes:
        if key not in _FIELD_SECTION:
            raise ConfigError(f"unknown config field {key!r}")
    return replace(cfg, **changes) if changes else cfg


def format_config(cfg: RunConfig) -> str:
    """Deterministic key = value text that :func:`load_config` reads back."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, key)
            lines.append(f"{key} = {'none' if value is None else value}")
        lines.append("")
    return "\n".join(lines)
