"""Contrastive pseudo-label baseline.

Unlabelled target features are clustered with DBSCAN; source class
centroids, cluster centroids and the individual outlier features form one
prototype memory, and every feature is pulled toward its own prototype
against all others with a temperature-scaled softmax.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from xdfsl.backbone import (DomainNorm, OptimizerConfig, TrainState, apply_update, estimate_norm_statistics,
                            extract, loss_and_gradients, norm_statistics)
from xdfsl.datasets import DomainDataset, UnlabelledDataset
from xdfsl.errors import ValidationError

log = logging.getLogger(__name__)

BANKS = ("source", "cluster", "outlier")


# ---------------------------------------------------------------------------
# clustering


@dataclass(frozen=True)
class DbscanConfig:
    eps: float = 0.6
    min_samples: int = 4
    metric: str = "euclidean"  # or "cosine"
    auto_eps: bool = False
    eps_quantile: float = 0.5

    def __post_init__(self):
        if not self.eps > 0:
            raise ValidationError("eps must be positive")
        if self.min_samples < 2:
            raise ValidationError("min_samples must be at least 2")
        if self.metric not in ("euclidean", "cosine"):
            raise ValidationError(f"unknown metric {self.metric!r}")
        if not 0.0 < self.eps_quantile <= 1.0:
            raise ValidationError("eps_quantile must lie in (0, 1]")


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster ids 0..n_clusters-1; outlier j (in sample order) gets id -(j + 1)."""

    labels: np.ndarray
    n_clusters: int
    n_outliers: int

    @property
    def clustered(self) -> np.ndarray:
        return self.labels >= 0

    def ref(self, i: int) -> PrototypeRef:
        lab = int(self.labels[i])
        return PrototypeRef("cluster", lab) if lab >= 0 else PrototypeRef("outlier", -lab - 1)


def _distances_to(x: np.ndarray, rows: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1)
        norms[norms == 0] = 1.0
        xn = x / norms[:, None]
        return 1.0 - xn[rows] @ xn.T
    return np.sqrt(((x[rows, None, :] - x[None, :, :]) ** 2).sum(-1))


def _neighbor_graph(x: np.ndarray, eps: float, metric: str, chunk: int = 128) -> csr_matrix:
    n = len(x)
    indptr, indices = [0], []
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        d = _distances_to(x, rows, metric)
        for r in d:
            nb = np.flatnonzero(r <= eps)
            indices.append(nb)
            indptr.append(indptr[-1] + len(nb))
    idx = np.concatenate(indices) if indices else np.empty(0, dtype=np.int64)
    return csr_matrix((np.ones(len(idx), dtype=bool), idx, np.array(indptr)), shape=(n, n))


def kth_neighbor_eps(features: np.ndarray, k: int, quantile: float, metric="euclidean") -> float:
    """Quantile of each point's distance to its k-th nearest neighbour (self counted first)."""
    x = np.asarray(features, dtype=np.float64)
    k = min(k, len(x))
    kth = []
    for start in range(0, len(x), 128):
        d = _distances_to(x, np.arange(start, min(len(x), start + 128)), metric)
        kth.append(np.partition(d, k - 1, axis=1)[:, k - 1])
    return float(np.quantile(np.concatenate(kth), quantile))


def dbscan_cluster(features, config: DbscanConfig) -> ClusterAssignment:
    """DBSCAN with inclusive eps-balls that count the point itself.

    Clusters are numbered by their lowest-index core point. A border point in
    reach of several clusters joins the cluster of its lowest-index core
    neighbour.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise ValidationError("features must be a non-empty (n, d) array")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features must be finite")
    eps = config.eps
    if config.auto_eps:
        eps = max(kth_neighbor_eps(x, config.min_samples, config.eps_quantile, config.metric), 1e-12)
    graph = _neighbor_graph(x, eps, config.metric)
    degree = np.diff(graph.indptr)
    core = degree >= config.min_samples
    core_idx = np.flatnonzero(core)
    labels = np.full(len(x), -1, dtype=np.int64)
    if len(core_idx):
        _, comp = connected_components(graph[core_idx][:, core_idx], directed=False)
        # components come out ordered by their first core member, i.e. lowest index
        _, first = np.unique(comp, return_index=True)
        remap = np.empty(len(first), dtype=np.int64)
        remap[np.argsort(first)] = np.arange(len(first))
        labels[core_idx] = remap[comp]
    n_clusters = int(labels.max()) + 1 if len(core_idx) else 0
    for i in np.flatnonzero(~core):
        nb = graph.indices[graph.indptr[i]:graph.indptr[i + 1]]
        nb_core = nb[core[nb]]
        if len(nb_core):
            labels[i] = labels[nb_core.min()]
    outliers = np.flatnonzero(labels < 0)
    labels[outliers] = -(np.arange(len(outliers)) + 1)
    return ClusterAssignment(labels, n_clusters, len(outliers))


def kmeans_cluster(features, n_clusters: int, seed: int = 0) -> ClusterAssignment:
    """k-means alternative; every sample is clustered, ids ordered by first member."""
    from sklearn.cluster import KMeans

    x = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("features must be finite")
    raw = KMeans(n_clusters=n_clusters, n_init=10, random_state=seed).fit_predict(x)
    _, first = np.unique(raw, return_index=True)
    order = np.unique(raw)[np.argsort(first)]
    remap = {int(c): i for i, c in enumerate(order)}
    labels = np.array([remap[int(c)] for c in raw], dtype=np.int64)
    return ClusterAssignment(labels, len(order), 0)


def cluster_purity(assignment: ClusterAssignment, class_names: Sequence[str] | None) -> float:
    """Fraction of clustered samples sharing their cluster's majority class."""
    if class_names is None or assignment.n_clusters == 0:
        return float("nan")
    groups: dict[int, Counter] = {}
    for lab, name in zip(assignment.labels, class_names):
        if lab >= 0:
            groups.setdefault(int(lab), Counter())[name] += 1
    total = sum(sum(c.values()) for c in groups.values())
    return sum(max(c.values()) for c in groups.values()) / total


# ---------------------------------------------------------------------------
# prototype memory and loss


class PrototypeRef(NamedTuple):
    bank: str
    index: int


def _normalize(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1)


@dataclass
class HybridPrototypeMemory:
    source: torch.Tensor    # (n_s, d) class centroids
    clusters: torch.Tensor  # (n_c, d) cluster centroids
    outliers: torch.Tensor  # (n_o, d) outlier instance features
    temperature: float = 0.05
    momentum: float = 0.2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValidationError("momentum must lie in [0, 1]")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.source), len(self.clusters), len(self.outliers)

    def bank(self, name: str) -> torch.Tensor:
        if name not in BANKS:
            raise ValidationError(f"unknown bank {name!r}")
        return {"source": self.source, "cluster": self.clusters, "outlier": self.outliers}[name]

    def all(self) -> torch.Tensor:
        return torch.cat([self.source, self.clusters, self.outliers])

    def flat_index(self, ref: PrototypeRef) -> int:
        bank, index = ref
        sizes = dict(zip(BANKS, self.sizes))
        if bank not in sizes or not 0 <= index < sizes[bank]:
            raise ValidationError(f"prototype {tuple(ref)} does not exist in memory of sizes {self.sizes}")
        offset = {"source": 0, "cluster": sizes["source"], "outlier": sizes["source"] + sizes["cluster"]}
        return offset[bank] + index


def init_memory(train_features, train_labels, unlabelled_features, assignment: ClusterAssignment,
                temperature=0.05, momentum=0.2, n_classes: int | None = None) -> HybridPrototypeMemory:
    """Unit-normalized class means, cluster means and outlier features."""
    fs = torch.as_tensor(train_features)
    ys = torch.as_tensor(train_labels, dtype=torch.long)
    fu = torch.as_tensor(unlabelled_features, dtype=fs.dtype)
    if len(fu) != len(assignment.labels):
        raise ValidationError("assignment does not match the unlabelled features")
    n_classes = int(ys.max()) + 1 if n_classes is None else n_classes
    d = fs.shape[1]

    def means(feats, groups, n, what):
        out = torch.zeros(n, d, dtype=fs.dtype)
        for k in range(n):
            members = feats[groups == k]
            if len(members) == 0:
                raise ValidationError(f"{what} {k} has no features")
            out[k] = members.mean(0)
        return _normalize(out)

    lab = torch.as_tensor(assignment.labels)
    return HybridPrototypeMemory(
        source=means(fs, ys, n_classes, "class"),
        clusters=means(fu, lab, assignment.n_clusters, "cluster"),
        outliers=_normalize(fu[lab < 0]).reshape(-1, d),
        temperature=temperature,
        momentum=momentum,
    )


def prototype_logits(features: torch.Tensor, memory: HybridPrototypeMemory) -> torch.Tensor:
    bank = memory.all().to(features.dtype)
    if len(bank) == 0:
        raise ValidationError("prototype memory is empty")
    return features @ bank.T / memory.temperature


def prototype_probabilities(features: torch.Tensor, memory: HybridPrototypeMemory) -> torch.Tensor:
    return torch.softmax(prototype_logits(features, memory), dim=-1)


def unified_contrastive_loss(features: torch.Tensor, memory: HybridPrototypeMemory,
                             positive_refs, stabilize: bool = True) -> torch.Tensor:
    """-log softmax probability of each feature's own prototype over every stored vector.

    ``features`` is one d-vector with a single ref, or (B, d) with B refs; the
    batch form returns the mean.
    """
    single = features.ndim == 1
    f = features[None] if single else features
    refs = [positive_refs] if single else list(positive_refs)
    if len(refs) != len(f):
        raise ValidationError("need one positive prototype per feature")
    logits = prototype_logits(f, memory)
    target = torch.tensor([memory.flat_index(PrototypeRef(*r)) for r in refs])
    if stabilize:
        log_z = torch.logsumexp(logits, dim=1)
    else:
        log_z = torch.log(torch.exp(logits).sum(1))
    losses = log_z - logits.gather(1, target[:, None])[:, 0]
    return losses[0] if single else losses.mean()


def update_memory(memory: HybridPrototypeMemory, features, refs, momentum: float | None = None
                  ) -> HybridPrototypeMemory:
    """p <- normalize(m * p + (1 - m) * u) for each touched entry, u the mean incoming feature."""
    m = memory.momentum if momentum is None else momentum
    f = torch.as_tensor(features).detach()
    refs = [PrototypeRef(*r) for r in refs]
    if len(refs) != len(f):
        raise ValidationError("need one identity per feature")
    groups: dict[PrototypeRef, list[int]] = {}
    for i, r in enumerate(refs):
        memory.flat_index(r)
        groups.setdefault(r, []).append(i)
    banks = {name: memory.bank(name).clone() for name in BANKS}
    for (bank, index), rows in groups.items():
        u = f[rows].mean(0).to(banks[bank].dtype)
        banks[bank][index] = _normalize(m * banks[bank][index] + (1.0 - m) * u)
    return replace(memory, source=banks["source"], clusters=banks["cluster"], outliers=banks["outlier"])


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class BaselineConfig:
    rounds: int = 10
    inner_iterations: int = 100
    batch_size: int = 64
    source_fraction: float = 0.5
    temperature: float = 0.05
    momentum: float = 0.2
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    clustering: str = "dbscan"  # or "kmeans"
    kmeans_clusters: int = 16
    domain_norm: bool = True  # separate normalization statistics for source and target samples
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=0.003))

    def __post_init__(self):
        if self.inner_iterations < 1:
            raise ValidationError("inner_iterations must be at least 1")
        if self.rounds < 0:
            raise ValidationError("rounds must be non-negative")
        if self.clustering not in ("dbscan", "kmeans"):
            raise ValidationError(f"unknown clustering {self.clustering!r}")
        if not 0.0 <= self.source_fraction <= 1.0:
            raise ValidationError("source_fraction must lie in [0, 1]")


def assign_pseudo_labels(features: np.ndarray, config: BaselineConfig, seed: int = 0) -> ClusterAssignment:
    if config.clustering == "kmeans":
        return kmeans_cluster(features, min(config.kmeans_clusters, len(features)), seed)
    assignment = dbscan_cluster(features, config.dbscan)
    if assignment.n_clusters == 1 and assignment.n_outliers == 0 and not config.dbscan.auto_eps:
        warnings.warn("DBSCAN put every unlabelled sample in one cluster; consider auto_eps or a smaller eps",
                      RuntimeWarning, stacklevel=2)
    return assignment


def baseline_train(state: TrainState, train_set: DomainDataset, unlabelled_set: UnlabelledDataset,
                   config: BaselineConfig, rng: np.random.Generator | None = None, sink=None) -> TrainState:
    """Alternate pseudo-labelling of the unlabelled set with contrastive updates.

    Each round re-extracts features, re-clusters, rebuilds the memory from
    scratch, then runs ``inner_iterations`` steps on mixed batches of source
    and unlabelled samples, momentum-updating the touched prototypes.

    With ``domain_norm`` the source and unlabelled halves of a batch pass
    through the extractor separately, each normalized with its own batch and
    running statistics; the returned state carries the target statistics.
    """
    if config.rounds == 0:
        return state
    rng = rng if rng is not None else np.random.default_rng(state.seed)
    x_s = torch.from_numpy(train_set.images)
    y_s = train_set.labels
    x_u = torch.from_numpy(unlabelled_set.images)
    n_classes = len(train_set.class_vocabulary)
    n_src = min(len(x_s), max(1, round(config.batch_size * config.source_fraction)))
    n_unl = min(len(x_u), config.batch_size - n_src)
    total = config.rounds * config.inner_iterations
    norms = None
    if config.domain_norm:
        norms = DomainNorm(state, source=norm_statistics(state), target=estimate_norm_statistics(state, x_u))
    for rnd in range(config.rounds):
        if norms is None:
            fu, fs = _normalize(extract(state, x_u)), _normalize(extract(state, x_s))
        else:
            fu, fs = _normalize(norms.extract("target", x_u)), _normalize(norms.extract("source", x_s))
        assignment = assign_pseudo_labels(fu.numpy(), config, seed=state.seed + rnd)
        memory = init_memory(fs, y_s, fu, assignment, config.temperature, config.momentum, n_classes)
        refs_u = [assignment.ref(i) for i in range(len(x_u))]
        purity = cluster_purity(assignment, unlabelled_set.diagnostic_class_names())
        losses = []
        for it in range(config.inner_iterations):
            si = np.sort(rng.choice(len(x_s), n_src, replace=False))
            ui = np.sort(rng.choice(len(x_u), n_unl, replace=False))
            images = torch.cat([x_s[si], x_u[ui]])
            refs = [PrototypeRef("source", int(y_s[i])) for i in si] + [refs_u[i] for i in ui]
            batch_feats = {}

            def loss_fn(s):
                if norms is not None:
                    parts = [norms.forward(part, x) for part, x in
                             (("source", images[:n_src]), ("target", images[n_src:])) if len(x)]
                    f = _normalize(torch.cat(parts))
                else:
                    f = _normalize(s.forward(images))
                batch_feats["f"] = f
                return unified_contrastive_loss(f, memory, refs)

            state.train()
            loss, grads = loss_and_gradients(state, loss_fn)
            lr = config.optimizer.lr_at(rnd * config.inner_iterations + it, total)
            apply_update(state, grads, config.optimizer, lr)
            memory = update_memory(memory, batch_feats["f"].detach(), refs)
            losses.append(loss)
        state.epoch += 1
        record = {"stage": "baseline_round", "round": rnd + 1, "n_clusters": assignment.n_clusters,
                  "n_outliers": assignment.n_outliers, "mean_loss": float(np.mean(losses)),
                  "purity_diagnostic": purity, "steps": len(losses)}
        log.info("baseline round %d: %s", rnd + 1, record)
        if sink is not None:
            sink(record)
    if norms is not None:
        norms.use("target")
    return state
