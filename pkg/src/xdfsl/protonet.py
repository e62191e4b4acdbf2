"""Mean-centroid classifier and phase-2 episodic training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from xdfsl.backbone import OptimizerConfig, TrainState, apply_update, loss_and_gradients
from xdfsl.datasets import DomainDataset
from xdfsl.episodes import EpisodeSpec, check_capacity, sample_episode
from xdfsl.errors import NumericError, ValidationError

log = logging.getLogger(__name__)


@dataclass
class PrototypeSet:
    centroids: torch.Tensor
    class_map: tuple[str, ...] | None = None


@dataclass
class EpisodePrediction:
    logits: torch.Tensor
    predicted: torch.Tensor
    accuracy: float | None = None


def compute_prototypes(support_features: torch.Tensor, support_labels, n_way: int | None = None,
                       class_map=None) -> PrototypeSet:
    """Per-class arithmetic mean of the support features (no normalization)."""
    labels = torch.as_tensor(support_labels, dtype=torch.long)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    counts = torch.bincount(labels, minlength=n_way)
    if len(counts) > n_way or (counts == 0).any():
        missing = [k for k in range(n_way) if k >= len(counts) or counts[k] == 0]
        raise ValidationError(f"support set lacks episode classes {missing}")
    one_hot = F.one_hot(labels, n_way).to(support_features.dtype)
    centroids = (one_hot.T @ support_features) / counts[:, None].to(support_features.dtype)
    return PrototypeSet(centroids, class_map)


def classify_queries(query_features: torch.Tensor, prototypes: PrototypeSet, query_labels=None,
                     metric: str = "sqeuclidean") -> EpisodePrediction:
    """Logits are negative squared distances; argmax ties go to the lowest class index."""
    c = prototypes.centroids
    if query_features.shape[-1] != c.shape[-1]:
        raise ValidationError("query and prototype dimensions differ")
    if not (torch.isfinite(query_features).all() and torch.isfinite(c).all()):
        raise NumericError("non-finite features in classification")
    if metric == "sqeuclidean":
        diff = query_features[:, None, :] - c[None, :, :]
        logits = -(diff ** 2).sum(-1)
    elif metric == "cosine":
        logits = F.normalize(query_features, dim=-1) @ F.normalize(c, dim=-1).T
    else:
        raise ValidationError(f"unknown metric {metric!r}")
    predicted = logits.argmax(1)
    acc = None
    if query_labels is not None:
        acc = float((predicted == torch.as_tensor(query_labels)).double().mean())
    return EpisodePrediction(logits, predicted, acc)


def episodic_loss(logits: torch.Tensor, query_labels) -> torch.Tensor:
    labels = torch.as_tensor(query_labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValidationError("query label out of range")
    return F.cross_entropy(logits, labels)


@dataclass(frozen=True)
class EpisodicConfig:
    epochs: int = 200
    episodes_per_epoch: int = 1000
    specs: tuple[EpisodeSpec, ...] = field(
        default_factory=lambda: (EpisodeSpec(5, 1, 15), EpisodeSpec(5, 5, 15)))
    metric: str = "sqeuclidean"
    frozen_blocks: int = 0
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=0.001))

    def __post_init__(self):
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ValidationError("epochs must be >= 0 and episodes_per_epoch >= 1")
        if not self.specs:
            raise ValidationError("at least one episode spec is required")


def episode_step(state: TrainState, images, support_count: int, support_labels, query_labels,
                 n_way: int, config: EpisodicConfig, lr=None):
    """One update from a single episode whose support images precede its queries."""
    state.train()
    x = state.as_tensor(images)
    out = {}

    def loss_fn(s):
        feats = s.forward(x)
        protos = compute_prototypes(feats[:support_count], support_labels, n_way)
        pred = classify_queries(feats[support_count:], protos, metric=config.metric)
        out["pred"] = pred
        return episodic_loss(pred.logits, query_labels)

    loss, grads = loss_and_gradients(state, loss_fn)
    apply_update(state, grads, config.optimizer, lr)
    acc = float((out["pred"].predicted == torch.as_tensor(query_labels)).double().mean())
    return loss, acc


def _frozen_prefixes(state: TrainState, n_blocks: int) -> tuple[str, ...]:
    if n_blocks <= 0:
        return ()
    net = state.extractor.net
    if not hasattr(net, "blocks"):
        raise ValidationError(f"{state.extractor.architecture_id} has no blocks to freeze")
    prefixes = [f"extractor.net.blocks.{i}." for i in range(min(n_blocks, len(net.blocks)))]
    if hasattr(net, "stem"):
        prefixes.append("extractor.net.stem.")
    return tuple(prefixes)


def episodic_train(state: TrainState, train_set: DomainDataset, config: EpisodicConfig,
                   rng: np.random.Generator | None = None, sink=None) -> TrainState:
    """Train on episodes drawn from the labelled set, cycling through ``config.specs``."""
    if config.epochs == 0:
        return state
    rng = rng if rng is not None else np.random.default_rng(state.seed)
    by_class = {spec: check_capacity(train_set, spec) for spec in config.specs}
    images = torch.from_numpy(train_set.images)
    total = config.epochs * config.episodes_per_epoch
    saved_frozen = state.frozen
    state.frozen = saved_frozen + _frozen_prefixes(state, config.frozen_blocks)
    try:
        for epoch in range(config.epochs):
            losses, accs = [], []
            for e in range(config.episodes_per_epoch):
                t = epoch * config.episodes_per_epoch + e
                spec = config.specs[t % len(config.specs)]
                task = sample_episode(train_set, spec, rng, by_class[spec])
                ids = np.concatenate([task.support_ids, task.query_ids])
                loss, acc = episode_step(
                    state, images[ids], len(task.support_ids), task.support_labels,
                    task.query_labels, spec.n_way, config, config.optimizer.lr_at(t, total))
                losses.append(loss)
                accs.append(acc)
            state.epoch += 1
            record = {"stage": "episodic_epoch", "epoch": state.epoch,
                      "mean_episodic_loss": float(np.mean(losses)),
                      "train_episode_acc": float(np.mean(accs))}
            log.info("episodic epoch %d: %s", state.epoch, record)
            if sink is not None:
                sink(record)
    finally:
        state.frozen = saved_frozen
    return state
