"""Run configuration: INI-style sections, unknown keys rejected.

Relative paths in ``[data]`` and ``[io]`` resolve against the directory of
the config file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .losses import LossWeights
from .model import ModelConfig


class RunConfigError(ValueError):
    """One or more config fields are invalid; ``problems`` lists each."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    lr_decay_factor: float = 0.1
    lr_milestones: tuple[int, ...] = (60, 90)
    epochs: int = 100
    batch: int = 8
    patch: int = 256
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: one decay per milestone <= epoch."""
        drops = sum(1 for m in self.lr_milestones if m <= epoch)
        return self.lr * self.lr_decay_factor ** drops


@dataclass(frozen=True)
class DataConfig:
    root: str = ""
    synthetic: int = 0
    synthetic_size: int = 64
    synthetic_motion: float = 3.0
    val_fraction: float = 0.1


@dataclass(frozen=True)
class IoConfig:
    checkpoint: str = "tsain.ckpt"
    log: str = "train.log"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.full)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    io: IoConfig = field(default_factory=IoConfig)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": LossWeights,
             "data": DataConfig, "io": IoConfig}


def _convert(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw.strip()


def validate(cfg: RunConfig) -> list[str]:
    problems = []
    t = cfg.train
    if t.lr <= 0:
        problems.append("train.lr must be positive")
    if not 0 < t.lr_decay_factor <= 1:
        problems.append("train.lr_decay_factor must lie in (0, 1]")
    if t.epochs < 0:
        problems.append("train.epochs must be >= 0")
    if t.batch < 1:
        problems.append("train.batch must be positive")
    if t.patch < 1:
        problems.append("train.patch must be positive")
    elif t.patch % cfg.model.divisor:
        problems.append(f"train.patch must be divisible by {cfg.model.divisor} "
                        f"(model.pyramid_levels={cfg.model.pyramid_levels})")
    if (cfg.loss.perc or cfg.loss.style) and t.patch % 8:
        problems.append("train.patch must be divisible by 8 when perceptual/style losses are on")
    ms = t.lr_milestones
    if any(b <= a for a, b in zip(ms, ms[1:])):
        problems.append("train.lr_milestones must be strictly increasing")
    if any(m < 1 or m >= t.epochs for m in ms) and t.epochs > 0:
        problems.append("train.lr_milestones must lie in [1, epochs)")
    d = cfg.data
    if not 0 <= d.val_fraction < 1:
        problems.append("data.val_fraction must lie in [0, 1)")
    if d.synthetic < 0:
        problems.append("data.synthetic must be >= 0")
    if d.synthetic == 0 and not d.root:
        problems.append("data.root is required unless data.synthetic > 0")
    if d.synthetic and d.synthetic_size < t.patch:
        problems.append("data.synthetic_size must be >= train.patch")
    if not cfg.io.checkpoint:
        problems.append("io.checkpoint must be set")
    return problems


def load_run_config(path) -> RunConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise RunConfigError([f"cannot read config {path}: {exc}"]) from exc
    problems = []
    built = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            problems.append(f"unknown section [{section}]")
    for section, cls in _SECTIONS.items():
        defaults = cls.full() if cls is ModelConfig else cls()
        known = {f.name: getattr(defaults, f.name) for f in fields(cls)}
        values = dict(known)
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in known:
                    problems.append(f"unknown key {section}.{key}")
                    continue
                try:
                    values[key] = _convert(raw, known[key])
                except ValueError:
                    problems.append(f"{section}.{key}: cannot parse {raw!r}")
        try:
            built[section] = cls(**values)
        except ValueError as exc:
            problems.append(f"[{section}] {exc}")
    if problems:
        raise RunConfigError(problems)
    base = path.parent
    data, io = built["data"], built["io"]
    if data.root:
        data = replace(data, root=str((base / data.root).resolve()))
    io = replace(io, checkpoint=str(base / io.checkpoint), log=str(base / io.log))
    cfg = RunConfig(built["model"], built["train"], built["loss"], data, io)
    problems = validate(cfg)
    if problems:
        raise RunConfigError(problems)
    return cfg
