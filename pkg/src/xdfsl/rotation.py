"""Phase 1: rotation-prediction pretext trained jointly with supervised classification."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from xdfsl.backbone import (DomainNorm, OptimizerConfig, TrainState, apply_update, estimate_norm_statistics,
                            extract, loss_and_gradients, norm_statistics)
from xdfsl.datasets import DomainDataset, UnlabelledDataset
from xdfsl.errors import ValidationError

log = logging.getLogger(__name__)

N_ROTATIONS = 4  # 0, 90, 180, 270 degrees


@dataclass
class RotationBatch:
    images: np.ndarray | torch.Tensor
    rotation_labels: np.ndarray | torch.Tensor
    origin: np.ndarray | torch.Tensor


def rotate(images, k: int):
    """Rotate (..., H, W, C) rasters counter-clockwise by ``k`` quarter turns."""
    if isinstance(images, torch.Tensor):
        return torch.rot90(images, k, dims=(-3, -2))
    return np.rot90(images, k, axes=(-3, -2))


def expand_with_rotations(images) -> RotationBatch:
    """Stack four rotated copies of a (B, H, W, C) batch, rotation-major.

    Instance ``k * B + b`` is image ``b`` turned ``k`` times by 90 degrees.
    """
    if images.ndim != 4:
        raise ValidationError(f"expected a (B, H, W, C) batch, got shape {tuple(images.shape)}")
    b, h, w = images.shape[:3]
    if h != w:
        raise ValidationError(f"rotation needs square images, got {h}x{w}")
    if isinstance(images, torch.Tensor):
        out = torch.cat([rotate(images, k) for k in range(N_ROTATIONS)])
        labels = torch.arange(N_ROTATIONS).repeat_interleave(b)
        origin = torch.arange(b).repeat(N_ROTATIONS)
    else:
        out = np.concatenate([rotate(images, k) for k in range(N_ROTATIONS)])
        labels = np.repeat(np.arange(N_ROTATIONS), b)
        origin = np.tile(np.arange(b), N_ROTATIONS)
    return RotationBatch(out, labels, origin)


def rotation_loss(rotation_logits: torch.Tensor, rotation_labels) -> torch.Tensor:
    labels = torch.as_tensor(rotation_labels, dtype=torch.long)
    if rotation_logits.ndim != 2 or rotation_logits.shape[1] != N_ROTATIONS:
        raise ValidationError(f"rotation logits must be (n, 4), got {tuple(rotation_logits.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= N_ROTATIONS):
        raise ValidationError("rotation labels must lie in {0, 1, 2, 3}")
    return F.cross_entropy(rotation_logits, labels)


def supervised_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValidationError("class label out of range")
    return F.cross_entropy(logits, labels)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    rotation_weight: float = 1.0
    labelled_fraction: float = 0.5
    domain_norm: bool = True  # separate normalization statistics for labelled and unlabelled images
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=0.05))

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if self.rotation_weight < 0:
            raise ValidationError("rotation_weight must be non-negative")
        if not 0.0 <= self.labelled_fraction <= 1.0:
            raise ValidationError("labelled_fraction must lie in [0, 1]")


def _joint_losses(state: TrainState, labelled, labels, unlabelled, rotation_weight, norms=None):
    """(total, sup, rot, sup_logits, rot_logits) sharing one extractor.

    Without ``norms`` there is a single extractor pass; with it, labelled and
    unlabelled rotations pass separately under their own statistics.
    """
    n_lab = len(labelled)
    if rotation_weight == 0:
        feats = state.forward(labelled)
        sup_logits = state.heads["supervised"](feats)
        sup = supervised_loss(sup_logits, labels)
        return sup, sup, None, sup_logits, None
    if unlabelled is None or len(unlabelled) == 0:
        rb = expand_with_rotations(labelled)
        feats = state.forward(rb.images) if norms is None else norms.forward("source", rb.images)
    elif norms is None:
        rb = expand_with_rotations(torch.cat([labelled, unlabelled]))
        feats = state.forward(rb.images)
    else:
        rl, ru = expand_with_rotations(labelled), expand_with_rotations(unlabelled)
        feats = torch.cat([norms.forward("source", rl.images), norms.forward("target", ru.images)])
        rb = RotationBatch(torch.cat([rl.images, ru.images]),
                           torch.cat([rl.rotation_labels, ru.rotation_labels]),
                           torch.cat([rl.origin, ru.origin + n_lab]))
    # the upright labelled copies are the first n_lab rows
    sup_logits = state.heads["supervised"](feats[:n_lab])
    rot_logits = state.heads["rotation"](feats)
    sup = supervised_loss(sup_logits, labels) if n_lab else feats.sum() * 0
    rot = rotation_loss(rot_logits, rb.rotation_labels)
    return sup + rotation_weight * rot, sup, rot, sup_logits, (rot_logits, rb.rotation_labels)


def joint_pretrain_step(state: TrainState, labelled_images, labelled_labels, unlabelled_images,
                        config: PretrainConfig, lr: float | None = None, norms: DomainNorm | None = None):
    """One update on sup CE + rotation_weight * rotation CE; returns (state, metrics).

    Unlabelled images feed the rotation term only. With ``rotation_weight == 0``
    no rotated copies are built and the step is a plain supervised step
    (``rot_loss`` is then reported as NaN).
    """
    state.train()
    labelled = state.as_tensor(labelled_images)
    unlabelled = None if unlabelled_images is None else state.as_tensor(unlabelled_images)
    labels = torch.as_tensor(labelled_labels, dtype=torch.long)
    out = {}

    def loss_fn(s):
        total, sup, rot, sup_logits, rot_pack = _joint_losses(
            s, labelled, labels, unlabelled, config.rotation_weight, norms)
        out.update(sup=sup, rot=rot, sup_logits=sup_logits, rot_pack=rot_pack)
        return total

    total, grads = loss_and_gradients(state, loss_fn)
    metrics = {
        "step": state.step,
        "sup_loss": float(out["sup"].detach()),
        "rot_loss": float("nan") if out["rot"] is None else float(out["rot"].detach()),
        "total_loss": total,
        "sup_acc": float((out["sup_logits"].argmax(1) == labels).double().mean()) if len(labels) else float("nan"),
    }
    if out["rot_pack"] is not None:
        logits, rl = out["rot_pack"]
        metrics["rot_acc"] = float((logits.argmax(1) == rl).double().mean())
    apply_update(state, grads, config.optimizer, lr)
    return state, metrics


def supervised_step(state, images, labels, optimizer: OptimizerConfig, lr=None):
    """Plain cross-entropy step on the supervised head."""
    cfg = PretrainConfig(rotation_weight=0.0, optimizer=optimizer)
    return joint_pretrain_step(state, images, labels, None, cfg, lr)


def rotation_accuracy(state: TrainState, images) -> float:
    rb = expand_with_rotations(state.as_tensor(images))
    feats = extract(state, rb.images)
    with torch.no_grad():
        pred = state.heads["rotation"](feats).argmax(1)
    return float((pred == rb.rotation_labels).double().mean())


def supervised_accuracy(state: TrainState, dataset: DomainDataset) -> float:
    feats = extract(state, dataset.images)
    with torch.no_grad():
        pred = state.heads["supervised"](feats).argmax(1).numpy()
    return float((pred == dataset.labels).mean())


def pretrain(state: TrainState, train_set: DomainDataset, unlabelled_set: UnlabelledDataset | None,
             config: PretrainConfig, rng: np.random.Generator | None = None, sink=None) -> TrainState:
    """Run ``config.epochs`` epochs of joint steps.

    An epoch is one pass over the labelled set; unlabelled batches are drawn
    from a reshuffled pool that is cycled as needed. ``sink`` receives one
    record per step and one per epoch. With ``domain_norm`` the unlabelled
    rotations keep their own normalization statistics, seeded from the pool;
    the state ends with the labelled domain's statistics loaded.
    """
    if config.epochs == 0:
        return state
    rng = rng if rng is not None else np.random.default_rng(state.seed)
    x_lab = torch.from_numpy(train_set.images)
    y_lab = torch.from_numpy(train_set.labels)
    use_unl = (unlabelled_set is not None and len(unlabelled_set) > 0
               and config.rotation_weight > 0 and config.labelled_fraction < 1.0)
    x_unl = torch.from_numpy(unlabelled_set.images) if use_unl else None
    n_lab_batch = max(1, round(config.batch_size * (config.labelled_fraction if use_unl else 1.0)))
    n_unl_batch = config.batch_size - n_lab_batch if use_unl else 0
    steps_per_epoch = math.ceil(len(x_lab) / n_lab_batch)
    total = config.epochs * steps_per_epoch
    unl_order, unl_pos = np.empty(0, dtype=np.int64), 0
    norms = None
    if use_unl and config.domain_norm:
        norms = DomainNorm(state, source=norm_statistics(state), target=estimate_norm_statistics(state, x_unl))
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_lab))
        sums = {"sup_loss": 0.0, "rot_loss": 0.0, "total_loss": 0.0, "sup_acc": 0.0}
        for b in range(steps_per_epoch):
            idx = order[b * n_lab_batch:(b + 1) * n_lab_batch]
            unl = None
            if n_unl_batch:
                if unl_pos + n_unl_batch > len(unl_order):
                    unl_order, unl_pos = rng.permutation(len(x_unl)), 0
                unl = x_unl[unl_order[unl_pos:unl_pos + n_unl_batch]]
                unl_pos += n_unl_batch
            lr = config.optimizer.lr_at(epoch * steps_per_epoch + b, total)
            _, m = joint_pretrain_step(state, x_lab[idx], y_lab[idx], unl, config, lr, norms)
            for k in sums:
                sums[k] += m[k] / steps_per_epoch
            if sink is not None:
                sink({"stage": "pretrain", **m})
        state.epoch += 1
        record = {"stage": "pretrain_epoch", "epoch": state.epoch, **sums}
        log.info("pretrain epoch %d: %s", state.epoch, sums)
        if sink is not None:
            sink(record)
    if norms is not None:
        norms.use("source")  # the live statistics stay those of the labelled domain
    return state

