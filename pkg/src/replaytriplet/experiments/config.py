"""Declarative experiment configuration stored as YAML sections."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from ..agent import DqnConfig
from ..buffer import SamplerConfig, SamplerMode
from ..gridworld import GridSpec
from ..latentmodel.losses import LossConfig, ModelKind
from ..latentmodel.training import ModelConfig, TrainConfig

__all__ = [
    "DataConfig",
    "EvalConfig",
    "SweepConfig",
    "ComparisonConfig",
    "RlConfig",
    "ExperimentConfig",
    "config_hash",
    "apply_overrides",
    "packaged_config",
]


@dataclass
class DataConfig:
    episodes: int = 100
    steps_per_episode: int = 100
    start: str = "uniform"


@dataclass
class EvalConfig:
    metrics: list[str] = field(default_factory=lambda: ["mig", "rank_correlation"])
    mig_bins: int = 20
    mig_samples: int = 10_000
    rank_pairs: int = 10_000


@dataclass
class SweepConfig:
    step_px: list[int] = field(default_factory=lambda: list(range(1, 9)))
    models: list[str] = field(default_factory=lambda: ["BetaVAE", "AdaGVAE"])
    num_squares: int = 1
    # overrides train.steps for the sweep cells when set
    train_steps: int | None = None

    def __post_init__(self):
        self.models = [ModelKind(m).value for m in self.models]
        if self.train_steps is not None and self.train_steps < 0:
            raise ValueError("sweep.train_steps must be >= 0")


@dataclass
class ComparisonConfig:
    models: list[str] = field(default_factory=lambda: ["BetaVAE", "AdaGVAE", "BetaTVAE", "AdaTVAE"])
    supervision: list[str] = field(default_factory=lambda: ["temporal", "ground_truth"])
    # triplet strength used for the triplet kinds only
    alpha: float | None = None

    def __post_init__(self):
        self.models = [ModelKind(m).value for m in self.models]
        self.supervision = [SamplerMode(s).value for s in self.supervision]


@dataclass
class RlConfig:
    encoders: list[str] = field(default_factory=lambda: ["BetaVAE", "AdaGVAE", "BetaTVAE", "AdaTVAE"])
    supervision: str = "temporal"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # "dqn": one encoder (first experiment seed), DQN seed varies; "paired": encoder seed cycles with DQN seed
    seed_mode: str = "dqn"
    gamma: float = 0.99
    max_episode_steps: int = 100
    final_window: int = 50
    eval_episodes: int = 30
    dqn: DqnConfig = field(default_factory=DqnConfig)

    def __post_init__(self):
        if self.seed_mode not in ("dqn", "paired"):
            raise ValueError(f"rl.seed_mode must be 'dqn' or 'paired', got {self.seed_mode!r}")
        SamplerMode(self.supervision)


_SECTIONS = {
    "grid": GridSpec,
    "data": DataConfig,
    "sampler": SamplerConfig,
    "loss": LossConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
    "comparison": ComparisonConfig,
    "rl": RlConfig,
}


def _plain(obj):
    """Recursively convert dataclasses and enums into YAML-safe builtins."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def _build(cls, data: dict | None):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    if cls is RlConfig and isinstance(data.get("dqn"), dict):
        data["dqn"] = _build(DqnConfig, data["dqn"])
    return cls(**data)


@dataclass
class ExperimentConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    comparison: ComparisonConfig = field(default_factory=ComparisonConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/default"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.loss.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2 for the adaptive losses and MIG")

    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - set(_SECTIONS) - {"seeds", "output_dir"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {name: _build(sec, d.get(name)) for name, sec in _SECTIONS.items()}
        if "seeds" in d:
            kwargs["seeds"] = [int(s) for s in d["seeds"]]
        if "output_dir" in d:
            kwargs["output_dir"] = str(d["output_dir"])
        return cls(**kwargs)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def replace(self, **sections) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(_plain(sections))
        return ExperimentConfig.from_dict(d)


def config_hash(d: dict) -> str:
    """Content hash of a plain dict (key order independent)."""
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(blob).hexdigest()


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` overrides, values parsed as YAML scalars/lists."""
    d = copy.deepcopy(cfg.to_dict())
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ValueError(f"unknown config path {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config path {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return ExperimentConfig.from_dict(d)


def packaged_config(name: str) -> ExperimentConfig:
    """Load a config shipped with the package, e.g. ``desk`` or ``publication``."""
    from importlib import resources

    res = resources.files("replaytriplet") / "configs" / f"{name}.yaml"
    if not res.is_file():
        raise FileNotFoundError(f"no packaged config named {name!r}")
    return ExperimentConfig.loads(res.read_text())
