"""Run configuration and deterministic seed derivation.

All randomness in the toolkit flows from a single 64-bit seed. Component
streams are derived by hashing a component label into the seed sequence, so
adding a component never perturbs the streams of existing ones.
"""

from __future__ import annotations

import hashlib
import struct
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_U64 = (1 << 64) - 1


def derive_seedseq(seed: int, label: str) -> np.random.SeedSequence:
    """Seed sequence for one named component of a run."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = struct.unpack("<4I", digest[:16])
    return np.random.SeedSequence([seed & _U64, *words])


def derive_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seedseq(seed, label))


@dataclass
class FeatureConfig:
    embedding_dim: int = 768      # catalog embedding width the pipeline expects
    pca_dim: int = 128            # per-channel PCA target dimension
    logit_epsilon: float = 1e-6   # clamp for the bounded-composite logit


@dataclass
class ModelConfig:
    hidden_layers: list[int] = field(default_factory=lambda: [256, 128])
    latent_dim: int = 96
    codebook_size: int = 256
    dropout: float = 0.1


@dataclass
class CodebookConfig:
    decay: float = 0.9            # EMA memory for entries and usage counts
    dead_fraction: float = 0.1    # entry is dead below this fraction of mean usage
    revival_interval: int = 50
    warmup_steps: int = 100
    revival_noise: float = 0.01


@dataclass
class ObjectiveConfig:
    recon_weight: float = 0.3
    commitment_weight: float = 0.75
    contrastive_weight: float = 0.15
    aux_weight: float = 0.5
    temperature: float = 0.1
    product_pool_size: int = 10   # peers kept by the product-similarity gate
    style_pool_size: int = 3      # peers kept by the browsing-style gate

    def validate(self) -> None:
        for name in ("recon_weight", "commitment_weight", "contrastive_weight",
                     "aux_weight", "temperature"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.product_pool_size <= self.style_pool_size:
            raise ConfigError("product_pool_size must exceed style_pool_size")


@dataclass
class TrainerConfig:
    per_shop_cap: int = 1500
    per_stratum_cap: int = 300
    train_fraction: float = 0.85
    batch_size: int = 256
    epochs: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def validate(self) -> None:
        if self.per_shop_cap < 1 or self.per_stratum_cap < 1:
            raise ConfigError("sampling caps must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")


@dataclass
class BaselineConfig:
    batch_size: int = 1024
    iterations: int = 150


@dataclass
class MetricsConfig:
    mixing_threshold: float = 0.2      # both funnel sides above this -> incompatible
    coherence_threshold: float = 0.05  # Low and High shares above this -> incoherent
    pairwise_cosine_cap: int = 200     # exact pair enumeration below, sampling above
    pairwise_cosine_samples: int = 10000
    permutation_rounds: int = 10000


@dataclass
class SimulatorConfig:
    sessions_per_group: int = 200
    # mean extra actions per session by engagement bin (Low, Medium, High)
    engagement_action_rates: list[float] = field(default_factory=lambda: [2.0, 5.0, 9.0])


@dataclass
class RunConfig:
    seed: int = 20240801
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    # synthetic-population document carried verbatim; validated by synthgen
    population: dict[str, Any] | None = None

    def validate(self) -> "RunConfig":
        self.objective.validate()
        self.trainer.validate()
        if self.features.pca_dim < 1 or self.features.pca_dim > self.features.embedding_dim:
            raise ConfigError("pca_dim must lie in [1, embedding_dim]")
        if self.model.dropout < 0 or self.model.dropout >= 1:
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    @classmethod
    def desk(cls, seed: int = 20240801) -> "RunConfig":
        """Small-embedding configuration sized for the synthetic desk fixture.

        Dropout is disabled here: with only a few thousand rows the
        train-mode quantization noise measurably smears code boundaries.
        """
        cfg = cls(seed=seed)
        cfg.features.embedding_dim = 32
        cfg.features.pca_dim = 8
        cfg.model.dropout = 0.0
        cfg.trainer.epochs = 130
        return cfg

    def as_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        if doc.get("population") is None:
            doc.pop("population", None)
        return doc

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        known = {f.name for f in fields(cls)}
        for key, value in doc.items():
            if key not in known:
                raise ConfigError(f"unknown config section or key: {key!r}")
            if key == "seed":
                cfg.seed = int(value)
                continue
            if key == "population":
                cfg.population = dict(value)
                continue
            section = getattr(cfg, key)
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be a table")
            section_fields = {f.name for f in fields(section)}
            for name, item in value.items():
                if name not in section_fields:
                    raise ConfigError(f"unknown key {key}.{name}")
                setattr(section, name, item)
        return cfg.validate()


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return RunConfig.from_dict(doc)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def _emit_table(name: str, table: dict[str, Any], lines: list[str]) -> None:
    lines.append(f"[{name}]")
    nested_tables = []
    table_arrays = []
    for key, value in table.items():
        if isinstance(value, dict):
            nested_tables.append((key, value))
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            table_arrays.append((key, value))
        else:
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in nested_tables:
        lines.append("")
        _emit_table(f"{name}.{key}", value, lines)
    for key, items in table_arrays:
        for item in items:
            lines.append("")
            lines.append(f"[[{name}.{key}]]")
            for k, v in item.items():
                lines.append(f"{k} = {_toml_value(v)}")


def dump_config(cfg: RunConfig) -> str:
    """Materialize a config (defaults included) as TOML text."""
    doc = cfg.as_dict()
    lines = [f"seed = {doc.pop('seed')}"]
    for section, table in doc.items():
        lines.append("")
        _emit_table(section, table, lines)
    return "\n".join(lines) + "\n"
