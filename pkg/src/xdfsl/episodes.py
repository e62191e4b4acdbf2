"""N-way K-shot episode sampling with an indexable, seeded stream."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from xdfsl.datasets import DomainDataset
from xdfsl.errors import CapacityError, ValidationError


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1:
            raise ValidationError(f"invalid episode spec {self}")

    @property
    def label(self) -> str:
        return f"{self.n_way}w{self.k_shot}s"


@dataclass(frozen=True)
class EpisodeTask:
    """One episode. Examples are referenced by their ordinal in ``dataset``."""

    dataset: DomainDataset
    support_ids: np.ndarray
    support_labels: np.ndarray
    query_ids: np.ndarray
    query_labels: np.ndarray
    class_map: tuple[str, ...]

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    @property
    def support(self) -> list[tuple[np.ndarray, int]]:
        return [(self.dataset.examples[i].image, int(y))
                for i, y in zip(self.support_ids, self.support_labels)]

    @property
    def query(self) -> list[tuple[np.ndarray, int]]:
        return [(self.dataset.examples[i].image, int(y))
                for i, y in zip(self.query_ids, self.query_labels)]

    def support_images(self) -> np.ndarray:
        return self.dataset.images[self.support_ids]

    def query_images(self) -> np.ndarray:
        return self.dataset.images[self.query_ids]

    def to_record(self, index: int | None = None) -> dict:
        """(class_name, ordinal-within-class) pairs for support and query."""
        ordinal = _class_ordinals(self.dataset)
        def pairs(ids):
            return [[self.dataset.examples[i].class_name, ordinal[i]] for i in ids]
        rec = {"support": pairs(self.support_ids), "query": pairs(self.query_ids)}
        if index is not None:
            rec = {"index": index, **rec}
        return rec


def _class_ordinals(dataset: DomainDataset) -> list[int]:
    seen: dict[str, int] = {}
    out = []
    for ex in dataset.examples:
        out.append(seen.get(ex.class_name, 0))
        seen[ex.class_name] = out[-1] + 1
    return out


def check_capacity(dataset: DomainDataset, spec: EpisodeSpec) -> dict[str, np.ndarray]:
    by_class = dataset.indices_by_class()
    if len(by_class) < spec.n_way:
        raise CapacityError(
            f"dataset {dataset.domain_name!r} has {len(by_class)} classes, "
            f"{spec.n_way}-way episodes need {spec.n_way}")
    need = spec.k_shot + spec.n_query
    for name, ids in by_class.items():
        if len(ids) < need:
            raise CapacityError(
                f"class {name!r} has {len(ids)} examples, episodes need {need}")
    return by_class


def sample_episode(dataset: DomainDataset, spec: EpisodeSpec,
                   rng: np.random.Generator | None = None,
                   _by_class: dict[str, np.ndarray] | None = None) -> EpisodeTask:
    """Draw one episode, advancing ``rng`` (defaults to a generator seeded by ``spec.seed``)."""
    by_class = _by_class if _by_class is not None else check_capacity(dataset, spec)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    names = list(by_class)
    picked = rng.choice(len(names), size=spec.n_way, replace=False)
    k = spec.k_shot
    s_ids, q_ids = [], []
    for ci in picked:
        ids = rng.choice(by_class[names[ci]], size=k + spec.n_query, replace=False)
        s_ids.append(ids[:k])
        q_ids.append(ids[k:])
    way = np.arange(spec.n_way)
    return EpisodeTask(
        dataset=dataset,
        support_ids=np.concatenate(s_ids),
        support_labels=np.repeat(way, k),
        query_ids=np.concatenate(q_ids),
        query_labels=np.repeat(way, spec.n_query),
        class_map=tuple(names[ci] for ci in picked),
    )


class EpisodeStream(Sequence):
    """``count`` episodes where episode ``i`` depends only on ``(seed, i)``."""

    def __init__(self, dataset: DomainDataset, spec: EpisodeSpec, count: int, seed: int):
        if count < 0:
            raise ValidationError("count must be non-negative")
        self.dataset = dataset
        self.spec = spec
        self.count = count
        self.seed = seed
        if count:
            self._by_class  # fail fast on capacity

    @cached_property
    def _by_class(self):
        return check_capacity(self.dataset, self.spec)

    def __len__(self):
        return self.count

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self.count))]
        if i < 0:
            i += self.count
        if not 0 <= i < self.count:
            raise IndexError(i)
        return episode_at(self.dataset, self.spec, self.seed, i, self._by_class)

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, task in enumerate(self):
                fh.write(json.dumps(task.to_record(i)) + "\n")


def episode_at(dataset: DomainDataset, spec: EpisodeSpec, seed: int, index: int,
               _by_class=None) -> EpisodeTask:
    rng = np.random.default_rng([seed, index])
    return sample_episode(dataset, spec, rng, _by_class)


def sample_episode_stream(dataset: DomainDataset, spec: EpisodeSpec, count: int,
                          seed: int) -> EpisodeStream:
    return EpisodeStream(dataset, spec, count, seed)
