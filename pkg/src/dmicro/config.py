"""Experiment configuration and the flat ``key = value`` config-file format.

Every key of :class:`ExperimentConfig` may appear in a file, one per line.
Blank lines and ``#`` comments are ignored. Unknown keys, repeated keys and
unparsable values are errors. Tuples are written comma separated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .inverse import DEFAULT_WIDTHS
from .metrics import compression

SCHEMES = ("learned", "uniform", "random", "hadamard")
PATTERN_DOMAINS = ("frequency", "spatial")
UPSAMPLERS = ("locality", "transpose")
TASKS = ("content", "segmentation")
SEG_LOSSES = ("l1", "bce")


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass
class ExperimentConfig:
    # data
    dataset: str = ""
    augment: bool = True
    # optics
    T: int = 8
    P: int = 64
    n: int = 8
    k: float = 10000.0
    sigma_read: float = 0.0
    gamma: float = 10.0
    noise: bool = True
    # patterns and network
    scheme: str = "learned"
    pattern_domain: str = "frequency"
    upsampler: str = "locality"
    widths: tuple = DEFAULT_WIDTHS
    # optimisation
    lr_forward: float = 1.0
    lr_inverse: float = 0.001
    batch: int = 32
    epochs: int = 600
    epoch_baseline: int = 300
    epoch_cutoff: int = 450
    epoch_step: int = 25
    plateau: bool = False
    plateau_patience: int = 20
    plateau_delta: float = 1e-4
    clip_norm: float = 5.0
    # segmentation
    task: str = "content"
    seg_loss: str = "l1"
    seg_width: int = 8
    seg_head_epochs: int = 50
    seg_finetune_epochs: int = 50
    seg_threshold: float = 0.3
    seg_close: int = 10
    # bookkeeping
    seed: int = 0
    eval_noise_seed: int = 1234
    checkpoint_every: int = 100
    out: str = ""  # empty: derived under $DMICRO_OUTPUT_ROOT

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self) -> None:
        for name, allowed in (("scheme", SCHEMES), ("pattern_domain", PATTERN_DOMAINS),
                              ("upsampler", UPSAMPLERS), ("task", TASKS), ("seg_loss", SEG_LOSSES)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("T", "P", "n", "batch", "seg_width", "seg_close"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.P % self.n:
            raise ConfigError(f"P={self.P} is not divisible by n={self.n}")
        if not self.k > 0:
            raise ConfigError("k must be positive")
        if self.sigma_read < 0 or self.gamma < 0:
            raise ConfigError("sigma_read and gamma must be non-negative")
        for name in ("epochs", "epoch_baseline", "epoch_cutoff", "epoch_step", "seg_head_epochs",
                     "seg_finetune_epochs", "checkpoint_every", "plateau_patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.epoch_baseline > self.epoch_cutoff:
            raise ConfigError("epoch_baseline must not exceed epoch_cutoff")
        if len(self.widths) != 5:
            raise ConfigError("widths needs five entries")

    @property
    def compression(self) -> Fraction:
        return compression(self.n, self.T)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        """Fully resolved config in file format, compression noted on top."""
        lines = [f"# compression = {self.compression} (n={self.n}, T={self.T})"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_FIELD_TYPES = {f.name: type(f.default) if f.default is not dataclasses.MISSING else tuple
                for f in fields(ExperimentConfig)}


def parse_value(key: str, text: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return text


def parse_config_text(text: str) -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, val)
    return values


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file (if any), then ``overrides``."""
    values = parse_config_text(Path(path).read_text()) if path is not None else {}
    for key, val in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(key, val) if isinstance(val, str) else val
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
