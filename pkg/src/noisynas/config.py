"""Experiment configuration: nested dataclasses with strict parsing.

Every field has a default; unknown keys are rejected with their dotted
path so a mistyped hyperparameter fails loudly instead of silently
falling back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from .bilevel import SearchConfig
from .data import NoiseSpec
from .objective import KL_AGGREGATES, MU_MODES


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "toy"              # toy | image | file
    n_bits: int = 12
    n_samples: int = 4096
    classes: int = 4
    per_class: int = 50
    hw: int = 8
    path: str = ""
    holdout_fraction: float = 0.2  # clean validation/test share

    def __post_init__(self):
        if self.kind not in ("toy", "image", "file"):
            raise ConfigError(f"dataset.kind: unknown kind {self.kind!r}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("dataset.holdout_fraction must lie in (0, 1)")


@dataclass
class NoiseConfig:
    kind: str = "none"             # none | symmetric | asymmetric
    rate: float = 0.0
    mapping: list = field(default_factory=list)

    def spec(self, seed: int) -> NoiseSpec:
        mapping = [(int(s), int(d)) for s, d in self.mapping]
        return NoiseSpec(self.kind, self.rate, mapping, seed)

    def __post_init__(self):
        try:
            self.spec(0)
        except ValueError as exc:
            raise ConfigError(f"noise: {exc}") from exc


@dataclass
class ModelConfig:
    kind: str = "mlp"              # mlp | supernet
    hidden: list = field(default_factory=lambda: [24, 16, 12, 8, 6])
    inject: bool = True
    injector_reduction: int = 4
    nodes: int = 4
    cells: int = 8
    channels: int = 16
    mask_nconv: bool = False       # restrict to the vanilla operator space

    def __post_init__(self):
        if self.kind not in ("mlp", "supernet"):
            raise ConfigError(f"model.kind: unknown kind {self.kind!r}")
        if self.kind == "mlp" and len(self.hidden) < 1:
            raise ConfigError("model.hidden must name at least one layer width")


@dataclass
class ObjectiveConfig:
    beta: float = 1.0
    mu_mode: str = "pooled"
    kl_aggregate: str = "mean"

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("objective.beta must be nonnegative")
        if self.mu_mode not in MU_MODES:
            raise ConfigError(f"objective.mu_mode must be one of {MU_MODES}")
        if self.kl_aggregate not in KL_AGGREGATES:
            raise ConfigError(f"objective.kl_aggregate must be one of {KL_AGGREGATES}")


@dataclass
class OptimConfig:
    epochs: int = 50
    batch_size: int = 96
    w_lr: float = 0.025
    w_lr_min: float = 0.0
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    cosine: bool = True
    arch_lr: float = 3e-4
    arch_weight_decay: float = 1e-3
    order: str = "second"
    eta: float = 0.025
    fd_scale: float = 0.01

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            epochs=self.epochs, batch_size=self.batch_size, w_lr=self.w_lr,
            w_lr_min=self.w_lr_min, w_momentum=self.w_momentum,
            w_weight_decay=self.w_weight_decay, cosine=self.cosine,
            arch_lr=self.arch_lr, arch_weight_decay=self.arch_weight_decay,
            order=self.order, eta=self.eta, fd_scale=self.fd_scale)

    def __post_init__(self):
        try:
            self.search_config()
        except ValueError as exc:
            raise ConfigError(f"optim: {exc}") from exc


@dataclass
class AnalysisConfig:
    mi_every: int = 0              # 0 disables MI tracking
    n_bins: int = 30
    mi_zx: bool = False
    gradnorm_every: int = 0
    gradnorm_samples: int = 64

    def __post_init__(self):
        if self.n_bins < 2:
            raise ConfigError("analysis.n_bins must be at least 2")


@dataclass
class AblationConfig:
    sigmas: list = field(default_factory=lambda: [0.0, 0.01, 0.05, 0.2, 0.3])
    mus: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3])


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/run"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}{key}: unknown field")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        ftype = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if is_dataclass(ftype):
            kwargs[name] = _build(type(ftype), value, f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg) -> dict:
    if is_dataclass(cfg):
        return {f.name: config_to_dict(getattr(cfg, f.name)) for f in fields(cfg)}
    if isinstance(cfg, (list, tuple)):
        return [config_to_dict(v) for v in cfg]
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable across field reordering: hash of the canonical JSON form."""
    doc = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
