"""Run configuration: typed sections of flat keys, YAML on disk, dotted overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from xdfsl.backbone import OptimizerConfig
from xdfsl.contrastive import BaselineConfig, DbscanConfig
from xdfsl.datasets import STYLES, SyntheticBenchmarkConfig
from xdfsl.episodes import EpisodeSpec
from xdfsl.errors import ConfigError, ValidationError
from xdfsl.protonet import EpisodicConfig
from xdfsl.rotation import PretrainConfig

METHODS = ("ssl", "baseline", "backbone-only")


@dataclass
class BenchmarkSection:
    kind: str = "synthetic"  # or "directory"
    root: str = ""
    n_classes: int = 40
    domains: list = field(default_factory=lambda: list(STYLES))
    images_per_class_per_domain: int = 30
    image_size: list = field(default_factory=lambda: [32, 32])
    seed: int = 0
    workers: int = 1


@dataclass
class SplitSection:
    proportions: list = field(default_factory=lambda: [16, 16, 8])
    seed: int = 0
    manifest: str = ""  # existing manifest file; overrides proportions


@dataclass
class MethodSection:
    name: str = "ssl"
    source_domain: str = "real"
    target_domains: list = field(default_factory=lambda: ["clipart", "painting", "sketch"])
    unlabelled_multiplier: int = 1
    label: str = ""


@dataclass
class ModelSection:
    architecture: str = "conv-small"
    seed: int = 0


@dataclass
class PretrainSection:
    epochs: int = 30
    batch_size: int = 64
    rotation_weight: float = 1.0
    labelled_fraction: float = 0.5
    domain_norm: bool = True
    lr: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"


@dataclass
class BaselineSection:
    rounds: int = 10
    inner_iterations: int = 100
    batch_size: int = 64
    source_fraction: float = 0.5
    temperature: float = 0.05
    memory_momentum: float = 0.2
    eps: float = 0.6
    min_samples: int = 4
    metric: str = "euclidean"
    auto_eps: bool = False
    eps_quantile: float = 0.5
    clustering: str = "dbscan"
    kmeans_clusters: int = 16
    init: str = "backbone"  # start from the source-only supervised model, or "scratch"
    domain_norm: bool = True
    lr: float = 0.003
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"


@dataclass
class EpisodicSection:
    epochs: int = 200
    episodes_per_epoch: int = 1000
    n_way: int = 5
    shots: list = field(default_factory=lambda: [1, 5])
    n_query: int = 15
    metric: str = "sqeuclidean"
    frozen_blocks: int = 0
    lr: float = 0.001
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"


@dataclass
class EvalSection:
    n_way: int = 5
    shots: list = field(default_factory=lambda: [1, 5])
    n_query: int = 15
    n_episodes: int = 10000
    seed: int = 0
    metric: str = "sqeuclidean"


@dataclass
class OutputSection:
    dir: str = ""


SECTIONS = {
    "benchmark": BenchmarkSection,
    "split": SplitSection,
    "method": MethodSection,
    "model": ModelSection,
    "pretrain": PretrainSection,
    "baseline": BaselineSection,
    "episodic": EpisodicSection,
    "eval": EvalSection,
    "output": OutputSection,
}


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):  # YAML 1.1 reads exponents without a dot, like 1e-3, as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if value is None:
            return ""
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return list(value)
    return value


@dataclass
class RunConfig:
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    split: SplitSection = field(default_factory=SplitSection)
    method: MethodSection = field(default_factory=MethodSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    episodic: EpisodicSection = field(default_factory=EpisodicSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, data: dict | None) -> RunConfig:
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping of sections")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            values = data.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            defaults = section_cls()
            known = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(values) - known
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            kwargs[name] = section_cls(**{
                k: _coerce(name, k, v, getattr(defaults, k)) for k, v in values.items()})
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def load(cls, path: str | Path | None, overrides: Sequence[str] = (),
             profile: str | None = None) -> RunConfig:
        """Defaults, then ``profile``, then the file at ``path``, then ``overrides``."""
        data = {}
        if profile:
            if profile not in PROFILES:
                raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
            data = {k: dict(v) for k, v in PROFILES[profile].items()}
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            loaded = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
            if not isinstance(loaded, dict):
                raise ConfigError("config must be a mapping of sections")
            for section, values in loaded.items():
                data.setdefault(section, {}).update(values or {})
        return cls.from_dict(apply_overrides(data, overrides))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_yaml(), encoding="utf-8")

    def validate(self) -> None:
        m = self.method
        if m.name not in METHODS:
            raise ConfigError(f"method.name must be one of {METHODS}, got {m.name!r}")
        if m.unlabelled_multiplier < 1:
            raise ConfigError("method.unlabelled_multiplier must be >= 1")
        if m.source_domain in m.target_domains:
            raise ConfigError("method.source_domain must not be a target domain")
        b = self.benchmark
        if b.kind not in ("synthetic", "directory"):
            raise ConfigError(f"benchmark.kind must be synthetic or directory, got {b.kind!r}")
        if b.kind == "directory":
            if not b.root or not Path(b.root).is_dir():
                raise ConfigError(f"benchmark.root {b.root!r} is not a directory")
            if m.unlabelled_multiplier != 1:
                raise ConfigError("unlabelled_multiplier needs the synthetic benchmark")
        for d in [m.source_domain, *m.target_domains]:
            if d not in b.domains:
                raise ConfigError(f"domain {d!r} not listed in benchmark.domains")
        if self.baseline.init not in ("backbone", "scratch"):
            raise ConfigError(f"baseline.init must be backbone or scratch, got {self.baseline.init!r}")
        if self.split.manifest and not Path(self.split.manifest).is_file():
            raise ConfigError(f"split.manifest {self.split.manifest!r} not found")
        try:
            self.synthetic_config()
            self.pretrain_config()
            self.baseline_config()
            self.episodic_config()
            self.eval_specs()
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    # -- typed views -----------------------------------------------------

    def synthetic_config(self) -> SyntheticBenchmarkConfig:
        b = self.benchmark
        cfg = SyntheticBenchmarkConfig(
            n_classes=b.n_classes, domains=tuple(b.domains),
            images_per_class_per_domain=b.images_per_class_per_domain * self.method.unlabelled_multiplier,
            image_size=tuple(b.image_size), seed=b.seed)
        if b.kind == "synthetic":
            cfg.validate()
        return cfg

    @staticmethod
    def _optimizer(section) -> OptimizerConfig:
        return OptimizerConfig(lr=section.lr, momentum=section.sgd_momentum,
                               weight_decay=section.weight_decay, schedule=section.schedule)

    def pretrain_config(self, rotation_weight: float | None = None) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(
            epochs=p.epochs, batch_size=p.batch_size,
            rotation_weight=p.rotation_weight if rotation_weight is None else rotation_weight,
            labelled_fraction=p.labelled_fraction, domain_norm=p.domain_norm, optimizer=self._optimizer(p))

    def baseline_config(self) -> BaselineConfig:
        b = self.baseline
        return BaselineConfig(
            rounds=b.rounds, inner_iterations=b.inner_iterations, batch_size=b.batch_size,
            source_fraction=b.source_fraction, temperature=b.temperature, momentum=b.memory_momentum,
            dbscan=DbscanConfig(eps=b.eps, min_samples=b.min_samples, metric=b.metric,
                                auto_eps=b.auto_eps, eps_quantile=b.eps_quantile),
            clustering=b.clustering, kmeans_clusters=b.kmeans_clusters,
            domain_norm=b.domain_norm, optimizer=self._optimizer(b))

    def episodic_config(self) -> EpisodicConfig:
        e = self.episodic
        specs = tuple(EpisodeSpec(e.n_way, int(k), e.n_query) for k in e.shots)
        return EpisodicConfig(epochs=e.epochs, episodes_per_epoch=e.episodes_per_epoch, specs=specs,
                              metric=e.metric, frozen_blocks=e.frozen_blocks,
                              optimizer=self._optimizer(e))

    def eval_specs(self) -> list[EpisodeSpec]:
        ev = self.eval
        if ev.n_episodes < 1:
            raise ValidationError("eval.n_episodes must be positive")
        return [EpisodeSpec(ev.n_way, int(k), ev.n_query, ev.seed) for k in ev.shots]

    @property
    def method_label(self) -> str:
        m = self.method
        if m.label:
            return m.label
        if m.name == "backbone-only":
            return "backbone"
        if m.name == "baseline":
            return "baseline1" if m.unlabelled_multiplier > 1 else "baseline"
        return m.name

    def output_dir(self) -> Path:
        if self.output.dir:
            return Path(self.output.dir)
        root = os.environ.get("XDFSL_OUT", "runs")
        return Path(root) / f"{self.method_label}-seed{self.model.seed}"


# Reduced schedules that fit a single-CPU desk run (minutes, not GPU-days).
PROFILES = {
    "desk": {
        "pretrain": {"epochs": 15},
        "episodic": {"epochs": 3, "episodes_per_epoch": 100, "lr": 0.001},
        "baseline": {"rounds": 5, "inner_iterations": 40, "lr": 0.003, "auto_eps": True, "eps_quantile": 0.1},
        "eval": {"n_episodes": 2000},
    },
}


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars/lists."""
    data = {k: dict(v or {}) for k, v in (data or {}).items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, raw = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"override key {path!r} must be section.key")
        section, key = parts
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from None
        data.setdefault(section, {})[key] = value
    return data
