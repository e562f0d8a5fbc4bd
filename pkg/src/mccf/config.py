"""Run configuration: one YAML document with data, model, train and synth sections.

Example::

    seed: 0
    out_dir: runs/ml100k
    data:
      ratings: data/ml-100k/u.data
      train_frac: 0.8
    model:
      n_components: 2
      dim: 64
    train:
      epochs: 20

Unknown keys anywhere are rejected.  Every field has a default, so an
empty document is a valid config (it just has no data source).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .model import ModelConfig
from .synthgen import SynthConfig
from .trainer import TrainConfig

COMPONENT_AXIS = (1, 2, 3, 4)
DIM_AXIS = (8, 16, 32, 64, 128)


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """Where the ratings come from: a delimited file, a graph snapshot, or the generator."""

    ratings: str | None = None
    graph: str | None = None
    synthetic: bool = False
    delimiter: str = "\t"
    max_rating: int | None = None
    train_frac: float = 0.8

    def __post_init__(self):
        sources = sum([self.ratings is not None, self.graph is not None, self.synthetic])
        if sources > 1:
            raise ConfigError("give at most one of ratings, graph, synthetic")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError("train_frac must be in (0, 1)")

    @property
    def has_source(self) -> bool:
        return self.ratings is not None or self.graph is not None or self.synthetic


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Same config with ``seed`` propagated to training and the generator."""
        d = self.to_dict()
        d["seed"] = seed
        d["train"]["seed"] = seed
        d["synth"]["seed"] = seed
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "out_dir": self.out_dir, "data": asdict(self.data),
                "model": self.model.to_dict(), "train": self.train.to_dict(),
                "synth": self.synth.to_dict()}

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = int(d.get("seed", 0))
        sections = {}
        for name, kind in (("data", DataConfig), ("model", ModelConfig),
                           ("train", TrainConfig), ("synth", SynthConfig)):
            sec = d.get(name) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            sec = dict(sec)
            # the root seed feeds every seeded section unless it sets its own
            if name in ("train", "synth"):
                sec.setdefault("seed", seed)
            bad = set(sec) - {f.name for f in fields(kind)}
            if bad:
                raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
            try:
                sections[name] = kind(**sec)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        return cls(seed=seed, out_dir=str(d.get("out_dir", cls.out_dir)), **sections)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc.__class__.__name__})") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(doc)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def check_axis(axis: str, values, strict: bool = True) -> list[int]:
    """Validate sweep values; ``strict`` limits them to the standard grids."""
    if axis not in ("components", "dim"):
        raise ConfigError(f"sweep axis must be 'components' or 'dim', got {axis!r}")
    vals = sorted({int(v) for v in values})
    if not vals or vals[0] < 1:
        raise ConfigError("sweep values must be positive integers")
    allowed = COMPONENT_AXIS if axis == "components" else DIM_AXIS
    off = [v for v in vals if v not in allowed]
    if strict and off:
        raise ConfigError(f"{axis} values {off} are outside {list(allowed)} (use --any-values)")
    return vals
