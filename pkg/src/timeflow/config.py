"""Run configuration: a sectioned key/value file (INI syntax).

Every hyperparameter has the paper-scale default, so a minimal file only
names the task mode and the data source::

    [task]
    mode = impute

    [data]
    path = electricity.csv
"""

from __future__ import annotations

import configparser
import io
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import SynthConfig
from .errors import ConfigError, ContractError
from .meta import InnerLoopConfig, OuterConfig
from .model import ModelConfig


@dataclass(frozen=True)
class TaskConfig:
    mode: str = ""
    tau: float = 0.5
    window_start: int = 0
    # imputation window length; 0 means the whole series
    window_len: int = 0
    lookback: int = 512
    horizon: int = 96
    train_start: int = 0
    # end of the forecasting training period; 0 means the whole series
    train_end: int = 0
    draws_per_epoch: int = 1


@dataclass(frozen=True)
class DataConfig:
    path: str = ""
    time_column: str = "0"
    name: str = ""
    synth: bool = False
    n_samples: int = 8
    length: int = 512
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    inner: InnerLoopConfig = field(default_factory=InnerLoopConfig)
    outer: OuterConfig = field(default_factory=OuterConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0
    threads: int = 0
    eval_steps: int = 0

    @property
    def eval_inner(self) -> InnerLoopConfig:
        return InnerLoopConfig(self.inner.alpha, self.eval_steps or self.inner.steps)

    @property
    def dataset_name(self) -> str:
        if self.data.name:
            return self.data.name
        return Path(self.data.path).stem if self.data.path else "synthetic"


# section -> key -> (dataclass attribute path, parser)
def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _pair(text: str) -> tuple[float, float]:
    vals = _floats(text)
    if len(vals) != 2:
        raise ValueError(f"expected two numbers, got {text!r}")
    return vals


_SCHEMA = {
    "model": {
        "num_frequencies": ("model.num_frequencies", int),
        "depth": ("model.depth", int),
        "hidden_dim": ("model.hidden_dim", int),
        "latent_dim": ("model.latent_dim", int),
        "max_frequency_index": ("model.max_frequency_index", _opt_int),
    },
    "inner": {
        "alpha": ("inner.alpha", float),
        "steps": ("inner.steps", int),
        "eval_steps": ("eval_steps", int),
    },
    "outer": {
        "lr": ("outer.outer_lr", float),
        "lr_min": ("outer.lr_min", float),
        "epochs": ("outer.epochs", int),
        "batch_size": ("outer.batch_size", int),
        "first_order": ("outer.first_order", _bool),
    },
    "task": {
        "mode": ("task.mode", str),
        "tau": ("task.tau", float),
        "window_start": ("task.window_start", int),
        "window_len": ("task.window_len", int),
        "lookback": ("task.lookback", int),
        "horizon": ("task.horizon", int),
        "train_start": ("task.train_start", int),
        "train_end": ("task.train_end", int),
        "draws_per_epoch": ("task.draws_per_epoch", int),
    },
    "data": {
        "path": ("data.path", str),
        "time_column": ("data.time_column", str),
        "name": ("data.name", str),
        "synth": ("data.synth", _bool),
        "n_samples": ("data.n_samples", int),
        "length": ("data.length", int),
        "seed": ("data.seed", int),
    },
    "synth": {
        "periods": ("synth.periods", _floats),
        "amplitude_range": ("synth.amplitude_range", _pair),
        "phase_range": ("synth.phase_range", _pair),
        "trend_range": ("synth.trend_range", _pair),
        "noise_std": ("synth.noise_std", float),
    },
    "run": {
        "seed": ("seed", int),
        "threads": ("threads", int),
    },
}


def _parse_sections(parser: configparser.ConfigParser, base: RunConfig) -> RunConfig:
    groups: dict[str, dict] = {}
    top: dict = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(section, "unknown section")
        for key, text in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            attr, conv = _SCHEMA[section][key]
            try:
                value = conv(text)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}", str(exc)) from None
            if "." in attr:
                group, name = attr.split(".")
                groups.setdefault(group, {})[name] = value
            else:
                top[attr] = value
    kwargs = {}
    for f in fields(RunConfig):
        current = getattr(base, f.name)
        if f.name in groups:
            merged = {g.name: getattr(current, g.name) for g in fields(current)}
            merged.update(groups[f.name])
            try:
                kwargs[f.name] = type(current)(**merged)
            except ContractError as exc:
                raise ConfigError(f.name, str(exc)) from None
        elif f.name in top:
            kwargs[f.name] = top[f.name]
        else:
            kwargs[f.name] = current
    return RunConfig(**kwargs)


def validate(cfg: RunConfig, require_mode: bool = True) -> RunConfig:
    t = cfg.task
    if require_mode and not t.mode:
        raise ConfigError("task.mode", "required field is missing (impute or forecast)")
    if t.mode and t.mode not in ("impute", "forecast"):
        raise ConfigError("task.mode", f"must be impute or forecast, got {t.mode!r}")
    if not 0 < t.tau <= 1:
        raise ConfigError("task.tau", f"must be in (0, 1], got {t.tau}")
    if t.window_start < 0 or t.window_len < 0 or t.window_len == 1:
        raise ConfigError("task.window_len", "window must start at >= 0 and span >= 2 steps")
    if t.lookback < 1 or t.horizon < 1:
        raise ConfigError("task.lookback", "lookback and horizon must be >= 1")
    if t.train_start < 0 or t.train_end < 0 or (t.train_end and t.train_end <= t.train_start):
        raise ConfigError("task.train_end", "training region must be a nonempty range")
    if t.draws_per_epoch < 1:
        raise ConfigError("task.draws_per_epoch", "must be >= 1")
    if require_mode and not cfg.data.path and not cfg.data.synth:
        raise ConfigError("data.path", "required field is missing (or set synth = true)")
    if cfg.data.synth and (cfg.data.n_samples < 1 or cfg.data.length < 2):
        raise ConfigError("data.n_samples", "synthetic data needs n_samples >= 1 and length >= 2")
    if not cfg.synth.periods or any(p <= 0 for p in cfg.synth.periods):
        raise ConfigError("synth.periods", "need at least one positive period")
    if cfg.synth.noise_std < 0:
        raise ConfigError("synth.noise_std", "must be >= 0")
    if cfg.eval_steps < 0:
        raise ConfigError("inner.eval_steps", "must be >= 0")
    if cfg.threads < 0:
        raise ConfigError("run.threads", "must be >= 0")
    return cfg


def parse_config(text: str, base: RunConfig | None = None, require_mode: bool = True) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    return validate(_parse_sections(parser, base or RunConfig()), require_mode=require_mode)


def load_config(path, require_mode: bool = True) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), require_mode=require_mode)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_ini(cfg: RunConfig) -> str:
    """Fully resolved configuration in the same file format."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in _SCHEMA.items():
        parser.add_section(section)
        for key, (attr, _) in keys.items():
            obj = cfg
            for part in attr.split("."):
                obj = getattr(obj, part)
            parser.set(section, key, _fmt(obj))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named generator derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**63 - 1))
