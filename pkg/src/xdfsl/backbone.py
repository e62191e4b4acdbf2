"""Feature extractors, linear heads, training state and the parameter update rule."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from xdfsl.errors import NumericError, ValidationError


def conv_block(in_channels, out_channels):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(),
        nn.MaxPool2d(2),
    )


class ConvSmall(nn.Module):
    """Four conv blocks, each halving resolution, then global average pooling."""

    def __init__(self, in_channels=3, widths=(16, 32, 64, 64)):
        super().__init__()
        chans = [in_channels, *widths]
        self.blocks = nn.Sequential(*[conv_block(a, b) for a, b in zip(chans, chans[1:])])
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = widths[-1]

    def forward(self, x):
        return self.pool(self.blocks(x)).flatten(1)


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ResNet18Like(nn.Module):
    """ResNet-18 topology ([2, 2, 2, 2] basic blocks) with a 3x3 stem for small rasters."""

    def __init__(self, in_channels=3, widths=(64, 128, 256, 512)):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False),
            nn.BatchNorm2d(widths[0]), nn.ReLU())
        layers, prev = [], widths[0]
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            layers += [BasicBlock(prev, w, stride), BasicBlock(w, w, 1)]
            prev = w
        self.blocks = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = widths[-1]

    def forward(self, x):
        return self.pool(self.blocks(self.stem(x))).flatten(1)


class LinearExtractor(nn.Module):
    """Flatten then one affine map; also serves as a random-projection featurizer."""

    def __init__(self, in_features, feature_dim=64, bias=True):
        super().__init__()
        self.proj = nn.Linear(in_features, feature_dim, bias=bias)
        self.feature_dim = feature_dim

    def forward(self, x):
        return self.proj(x.flatten(1))


ARCHITECTURES = ("conv-small", "resnet18-like", "linear")


class FeatureExtractor(nn.Module):
    """Maps an (B, H, W, C) raster batch to (B, d) features."""

    def __init__(self, architecture_id: str, image_shape: tuple[int, int, int], **kwargs):
        super().__init__()
        h, w, c = image_shape
        if architecture_id == "conv-small":
            self.net = ConvSmall(c, **kwargs)
        elif architecture_id == "resnet18-like":
            self.net = ResNet18Like(c, **kwargs)
        elif architecture_id == "linear":
            self.net = LinearExtractor(h * w * c, **kwargs)
        else:
            raise ValidationError(f"unknown architecture {architecture_id!r}; choose from {ARCHITECTURES}")
        self.architecture_id = architecture_id
        self.image_shape = tuple(image_shape)
        self.kwargs = kwargs
        self.feature_dim = self.net.feature_dim

    def forward(self, images):
        if tuple(images.shape[1:]) != self.image_shape:
            raise ValidationError(
                f"expected images of shape (B, {', '.join(map(str, self.image_shape))}), "
                f"got {tuple(images.shape)}")
        return self.net(images.permute(0, 3, 1, 2))


class LinearHead(nn.Linear):
    def __init__(self, feature_dim, n_outputs, purpose):
        super().__init__(feature_dim, n_outputs)
        self.purpose = purpose


@dataclass
class TrainState:
    extractor: FeatureExtractor
    heads: nn.ModuleDict
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    seed: int = 0
    frozen: tuple[str, ...] = ()

    def named_parameters(self) -> dict[str, nn.Parameter]:
        out = {f"extractor.{n}": p for n, p in self.extractor.named_parameters()}
        out.update({f"heads.{n}": p for n, p in self.heads.named_parameters()})
        return out

    def named_buffers(self) -> dict[str, torch.Tensor]:
        out = {f"extractor.{n}": b for n, b in self.extractor.named_buffers()}
        out.update({f"heads.{n}": b for n, b in self.heads.named_buffers()})
        return out

    def train(self, mode=True):
        self.extractor.train(mode)
        self.heads.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def to(self, dtype):
        self.extractor.to(dtype)
        self.heads.to(dtype)
        self.optimizer_state = {k: v.to(dtype) for k, v in self.optimizer_state.items()}
        return self

    @property
    def dtype(self):
        return next(self.extractor.parameters()).dtype

    def as_tensor(self, images) -> torch.Tensor:
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(images)
        return images.to(self.dtype)

    def forward(self, images) -> torch.Tensor:
        """Differentiable features in whatever mode the modules are in."""
        return self.extractor(self.as_tensor(images))


def new_train_state(architecture_id="conv-small", image_shape=(32, 32, 3), seed=0,
                    head_sizes: dict[str, int] | None = None, **extractor_kwargs) -> TrainState:
    """Fresh state; parameter initialization depends only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        extractor = FeatureExtractor(architecture_id, image_shape, **extractor_kwargs)
        heads = nn.ModuleDict({
            purpose: LinearHead(extractor.feature_dim, m, purpose)
            for purpose, m in (head_sizes or {}).items()
        })
    return TrainState(extractor, heads, seed=seed)


def norm_statistics(state: TrainState) -> dict[str, torch.Tensor]:
    """Copies of every normalization running statistic (mean, var, batch count)."""
    return {n: b.detach().clone() for n, b in state.named_buffers().items()}


def load_norm_statistics(state: TrainState, stats: dict[str, torch.Tensor]) -> None:
    buffers = state.named_buffers()
    if set(stats) != set(buffers):
        raise ValidationError("normalization statistics do not match the model's buffers")
    # rebind rather than copy in place: autograd may still hold the old tensors
    for n in buffers:
        root, rest = n.split(".", 1)
        owner, _, attr = rest.rpartition(".")
        module = (state.extractor if root == "extractor" else state.heads).get_submodule(owner)
        setattr(module, attr, stats[n].clone())


def estimate_norm_statistics(state: TrainState, images, batch_size: int = 64) -> dict[str, torch.Tensor]:
    """Running statistics re-estimated from ``images`` alone (cumulative average over batches).

    The model's own statistics are left untouched.
    """
    saved = norm_statistics(state)
    norms = [m for m in state.extractor.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    momenta = [m.momentum for m in norms]
    was_training = state.extractor.training
    x = state.as_tensor(images)
    try:
        for m in norms:
            m.reset_running_stats()
            m.momentum = None
        state.extractor.train()
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                state.extractor(x[i:i + batch_size])
        return norm_statistics(state)
    finally:
        for m, mom in zip(norms, momenta):
            m.momentum = mom
        state.extractor.train(was_training)
        load_norm_statistics(state, saved)


class DomainNorm:
    """Separate normalization running statistics per domain for one state.

    ``forward``/``extract`` swap the named domain's statistics in, run, and
    keep whatever the pass updated; ``use`` leaves a domain's statistics loaded.
    """

    def __init__(self, state: TrainState, **stats: dict[str, torch.Tensor]):
        self.state = state
        self.stats = stats

    def use(self, domain: str) -> None:
        load_norm_statistics(self.state, self.stats[domain])

    def forward(self, domain: str, images) -> torch.Tensor:
        self.use(domain)
        out = self.state.forward(images)
        self.stats[domain] = norm_statistics(self.state)
        return out

    def extract(self, domain: str, images) -> torch.Tensor:
        self.use(domain)
        return extract(self.state, images)


def extract(state: TrainState, images, batch_size: int = 512) -> torch.Tensor:
    """Inference-mode features (B, d); modules are left in eval mode."""
    state.eval()
    x = state.as_tensor(images)
    if x.ndim != 4:
        raise ValidationError(f"expected a (B, H, W, C) batch, got shape {tuple(x.shape)}")
    with torch.no_grad():
        parts = [state.extractor(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    feats = torch.cat(parts) if parts else torch.zeros(0, state.extractor.feature_dim, dtype=x.dtype)
    if not torch.isfinite(feats).all():
        raise NumericError("non-finite features", state.step)
    return feats


def loss_and_gradients(state: TrainState, loss_fn: Callable[[TrainState], torch.Tensor]
                       ) -> tuple[float, dict[str, torch.Tensor]]:
    """Evaluate ``loss_fn(state)`` and its gradient for every named parameter.

    Parameters the loss does not touch get zero gradients.
    """
    params = state.named_parameters()
    loss = loss_fn(state)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}", state.step)
    names = [n for n, p in params.items() if p.requires_grad]
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    else:
        grads = [None] * len(names)
    out = {}
    for n, g in zip(names, grads):
        if g is None:
            g = torch.zeros_like(params[n])
        elif not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {n}", state.step)
        out[n] = g.detach()
    return float(loss.detach()), out


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"  # or "constant"

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.schedule == "constant" or total_steps <= 1:
            return self.lr
        if self.schedule != "cosine":
            raise ValidationError(f"unknown schedule {self.schedule!r}")
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def apply_update(state: TrainState, gradients: dict[str, torch.Tensor],
                 config: OptimizerConfig, lr: float | None = None) -> TrainState:
    """SGD with heavy-ball momentum: v <- mu*v + (g + wd*theta); theta <- theta - lr*v.

    Parameters whose name starts with one of ``state.frozen`` are skipped.
    The state is updated in place and returned.
    """
    lr = config.lr if lr is None else lr
    params = state.named_parameters()
    unknown = set(gradients) - set(params)
    if unknown:
        raise ValidationError(f"gradients for unknown parameters: {sorted(unknown)}")
    with torch.no_grad():
        for name, g in gradients.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValidationError(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(p.shape)}")
            if state.frozen and name.startswith(state.frozen):
                continue
            d = g + config.weight_decay * p if config.weight_decay else g.clone()
            if config.momentum:
                buf = state.optimizer_state.get(name)
                buf = d if buf is None else buf.mul_(config.momentum).add_(d)
                state.optimizer_state[name] = buf
                d = buf
            p.sub_(lr * d)
    state.step += 1
    return state


def train_step(state, loss_fn, config: OptimizerConfig, lr=None):
    loss, grads = loss_and_gradients(state, loss_fn)
    apply_update(state, grads, config, lr)
    return loss


# ---------------------------------------------------------------------------
# checkpoints: safetensors container (JSON index of name, dtype, shape and
# byte offsets, then little-endian data)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    from safetensors.torch import save_file

    tensors = {f"param/{n}": p.detach().contiguous() for n, p in state.named_parameters().items()}
    tensors.update({f"buffer/{n}": b.contiguous() for n, b in state.named_buffers().items()})
    tensors.update({f"optim/{n}": v.contiguous() for n, v in state.optimizer_state.items()})
    meta = {
        "architecture_id": state.extractor.architecture_id,
        "feature_dim": str(state.extractor.feature_dim),
        "image_shape": json.dumps(list(state.extractor.image_shape)),
        "extractor_kwargs": json.dumps({k: list(v) if isinstance(v, tuple) else v
                                        for k, v in state.extractor.kwargs.items()}),
        "heads": json.dumps({k: h.out_features for k, h in state.heads.items()}),
        "step": str(state.step),
        "epoch": str(state.epoch),
        "seed": str(state.seed),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata=meta)


def load_checkpoint(path: str | Path) -> TrainState:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata()
        tensors = {k: fh.get_tensor(k) for k in fh.keys()}
    kwargs = {k: tuple(v) if isinstance(v, list) else v
              for k, v in json.loads(meta["extractor_kwargs"]).items()}
    state = new_train_state(meta["architecture_id"], tuple(json.loads(meta["image_shape"])),
                            seed=int(meta["seed"]), head_sizes=json.loads(meta["heads"]), **kwargs)
    dtype = tensors[next(k for k in tensors if k.startswith("param/"))].dtype
    state.to(dtype)
    with torch.no_grad():
        for n, p in state.named_parameters().items():
            p.copy_(tensors[f"param/{n}"])
        for n, b in state.named_buffers().items():
            b.copy_(tensors[f"buffer/{n}"])
    state.optimizer_state = {k[len("optim/"):]: v for k, v in tensors.items() if k.startswith("optim/")}
    state.step = int(meta["step"])
    state.epoch = int(meta["epoch"])
    return state
