"""Pipeline configuration: one JSON document, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .correction import TrainConfig
from .pgo import InfoWeights, SolverConfig
from .registration import IcpConfig
from .sim import SimConfig


class ConfigError(ValueError):
    pass


@dataclass
class GmmConfig:
    candidates: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    beta: float = 0.999

    def __post_init__(self):
        if not self.candidates or any(int(g) < 1 for g in self.candidates):
            raise ValueError("candidates must be positive integers")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")


@dataclass
class ModelConfig:
    hidden: int = 8
    init_scale: float = 0.1

    def __post_init__(self):
        if self.hidden < 1 or self.init_scale <= 0:
            raise ValueError("hidden must be >= 1 and init_scale positive")


@dataclass
class PipelineConfig:
    seed: int = 0
    window_length: float = 0.2
    rpe_interval: float = 0.2
    chunk: int = 20
    overlap_tau: float | None = None
    sim: SimConfig = field(default_factory=SimConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    weights: InfoWeights = field(default_factory=InfoWeights)
    solver: SolverConfig = field(default_factory=SolverConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.window_length <= 0 or self.rpe_interval <= 0:
            raise ValueError("window_length and rpe_interval must be positive")
        if self.chunk < 2:
            raise ValueError("chunk must be at least 2")
        if self.overlap_tau is not None and self.overlap_tau <= 0:
            raise ValueError("overlap_tau must be positive")
        self.reseed(self.seed)

    def reseed(self, seed: int) -> None:
        """Propagate the single top-level seed into every seeded component."""
        self.seed = int(seed)
        self.sim.seed = self.seed
        self.train.seed = self.seed

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["sim"].pop("seed")
        doc["train"].pop("seed")
        return doc


_SECTIONS = {
    "sim": SimConfig,
    "icp": IcpConfig,
    "weights": InfoWeights,
    "solver": SolverConfig,
    "train": TrainConfig,
    "gmm": GmmConfig,
    "model": ModelConfig,
}
_SEEDED = {"sim", "train"}


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    if where.split(".")[-1] in _SEEDED:
        allowed.discard("seed")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected an object")
    allowed = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for k, val in doc.items():
        kw[k] = _build(_SECTIONS[k], val, f"config.{k}") if k in _SECTIONS else val
    try:
        return PipelineConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    return config_from_dict(doc)
