"""End-to-end runs: data, split, training for one method, evaluation, artifacts."""

from __future__ import annotations

import copy
import json
import logging
import math
import zlib
from pathlib import Path

import numpy as np
import torch

from xdfsl.backbone import (TrainState, estimate_norm_statistics, load_norm_statistics, new_train_state,
                            save_checkpoint)
from xdfsl.config import RunConfig
from xdfsl.contrastive import baseline_train
from xdfsl.datasets import (DomainDataset, SplitManifest, apply_split, build_split_manifest,
                            generate_synthetic_benchmark, load_domain_directory)
from xdfsl.evaluation import EvalReport, evaluate, write_report
from xdfsl.protonet import episodic_train
from xdfsl.rotation import pretrain

log = logging.getLogger(__name__)

_BENCHMARK_CACHE: dict = {}


def load_benchmark(cfg: RunConfig) -> dict[str, DomainDataset]:
    b = cfg.benchmark
    if b.kind == "directory":
        size = tuple(b.image_size) if b.image_size else None
        return {d: load_domain_directory(b.root, d, size, b.workers) for d in b.domains}
    synth = cfg.synthetic_config()
    if synth not in _BENCHMARK_CACHE:
        if len(_BENCHMARK_CACHE) >= 2:
            _BENCHMARK_CACHE.pop(next(iter(_BENCHMARK_CACHE)))
        _BENCHMARK_CACHE[synth] = generate_synthetic_benchmark(synth)
    return _BENCHMARK_CACHE[synth]


def build_manifest(cfg: RunConfig, datasets: dict[str, DomainDataset]) -> SplitManifest:
    if cfg.split.manifest:
        return SplitManifest.read(cfg.split.manifest)
    shared = None
    for ds in datasets.values():
        vocab = ds.class_vocabulary
        shared = list(vocab) if shared is None else [c for c in shared if c in set(vocab)]
    return build_split_manifest(shared, cfg.split.proportions, cfg.split.seed)


class MetricsSink:
    """Line-delimited JSON metrics; NaN written as null."""

    def __init__(self, path: Path | None, context: dict | None = None):
        self.path = path
        self.context = context or {}
        self.records: list[dict] = []

    def __call__(self, record: dict):
        rec = {**self.context, **record}
        self.records.append(rec)
        if self.path is not None:
            clean = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in rec.items()}
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(clean) + "\n")

    def bind(self, **context) -> MetricsSink:
        child = MetricsSink(self.path, {**self.context, **context})
        child.records = self.records
        return child


def _rng(cfg: RunConfig, stage: str, target: str = "") -> np.random.Generator:
    return np.random.default_rng([cfg.model.seed, zlib.crc32(stage.encode()), zlib.crc32(target.encode())])


def _new_state(cfg: RunConfig, train: DomainDataset, rotation: bool) -> TrainState:
    heads = {"supervised": len(train.class_vocabulary)}
    if rotation:
        heads["rotation"] = 4
    return new_train_state(cfg.model.architecture, train.images.shape[1:], cfg.model.seed, heads)


def train_backbone(cfg: RunConfig, train, sink=None) -> TrainState:
    """Supervised source-only training (no rotation term, no unlabelled data)."""
    state = _new_state(cfg, train, rotation=False)
    return pretrain(state, train, None, cfg.pretrain_config(rotation_weight=0.0), _rng(cfg, "pretrain"), sink)


def train_method(cfg: RunConfig, train, unlabelled, target: str, sink: MetricsSink,
                 ckpt_dir: Path | None = None, init_state: TrainState | None = None) -> TrainState:
    """Train the configured method for one target domain and return the final state.

    ``init_state`` (baseline only) is a source-only model to start from; it is
    copied, not modified.
    """
    name = cfg.method.name
    if name == "backbone-only":
        state = train_backbone(cfg, train, sink)
    elif name == "ssl":
        state = _new_state(cfg, train, rotation=True)
        pretrain(state, train, unlabelled, cfg.pretrain_config(), _rng(cfg, "pretrain", target), sink)
        if ckpt_dir is not None:
            save_checkpoint(state, ckpt_dir / f"{target}_pretrain.safetensors")
        episodic_train(state, train, cfg.episodic_config(), _rng(cfg, "episodic", target), sink)
        if cfg.pretrain.domain_norm and unlabelled is not None and len(unlabelled):
            # episodic training ran on source statistics; re-estimate the target's for testing
            load_norm_statistics(state, estimate_norm_statistics(state, unlabelled.images))
    elif name == "baseline":
        if init_state is not None:
            state = copy.deepcopy(init_state)
        elif cfg.baseline.init == "backbone":
            state = train_backbone(cfg, train, sink)
        else:
            state = _new_state(cfg, train, rotation=False)
        baseline_train(state, train, unlabelled, cfg.baseline_config(), _rng(cfg, "baseline", target), sink)
    else:  # guarded by config validation
        raise AssertionError(name)
    return state


def run(cfg: RunConfig, out_dir: str | Path | None = None,
        datasets: dict[str, DomainDataset] | None = None) -> list[EvalReport]:
    """Train and evaluate ``cfg``'s method on every target domain.

    Writes ``config.yaml`` (effective config), ``manifest.tsv``,
    ``metrics.jsonl``, checkpoints and one JSON report per (domain, spec).
    """
    torch.use_deterministic_algorithms(True)
    out = Path(out_dir) if out_dir is not None else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    datasets = datasets if datasets is not None else load_benchmark(cfg)
    manifest = build_manifest(cfg, datasets)
    manifest.write(out / "manifest.tsv")
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("", encoding="utf-8")
    sink = MetricsSink(metrics_path)
    ckpt_dir = out / "checkpoints"
    synthetic = cfg.benchmark.kind == "synthetic"
    per_class = cfg.benchmark.images_per_class_per_domain if synthetic else None
    unl_per_class = per_class * cfg.method.unlabelled_multiplier if synthetic else None
    label = cfg.method_label
    reports = []
    shared_state = None
    for target in cfg.method.target_domains:
        train, unlabelled, test = apply_split(datasets, manifest, cfg.method.source_domain, target,
                                              per_class=per_class, unlabelled_per_class=unl_per_class)
        if cfg.method.name == "backbone-only":
            # trained on the source domain only, so one model serves every target
            if shared_state is None:
                shared_state = train_method(cfg, train, None, "", sink.bind(target=None), ckpt_dir)
                save_checkpoint(shared_state, ckpt_dir / "final.safetensors")
            state = shared_state
        else:
            if cfg.method.name == "baseline" and cfg.baseline.init == "backbone" and shared_state is None:
                # the source-only starting point does not depend on the target
                shared_state = train_backbone(cfg, train, sink.bind(target=None))
                save_checkpoint(shared_state, ckpt_dir / "backbone.safetensors")
            state = train_method(cfg, train, unlabelled, target, sink.bind(target=target), ckpt_dir,
                                 init_state=shared_state)
            save_checkpoint(state, ckpt_dir / f"{target}_final.safetensors")
        for spec in cfg.eval_specs():
            report = evaluate(state, test, spec, cfg.eval.n_episodes, cfg.eval.seed, label, cfg.eval.metric)
            write_report(report, out / "reports")
            reports.append(report)
            log.info("%s %s %s: %.2f +- %.2f", label, target, spec.label,
                     report.mean_accuracy, report.ci95_halfwidth)
    return reports
