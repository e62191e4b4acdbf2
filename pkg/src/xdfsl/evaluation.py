"""Mean-centroid evaluation on target-domain episodes and result tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from xdfsl.backbone import TrainState, extract
from xdfsl.datasets import DomainDataset
from xdfsl.episodes import EpisodeSpec, sample_episode_stream
from xdfsl.errors import ValidationError
from xdfsl.protonet import classify_queries, compute_prototypes

CSV_HEADER = ["method", "domain", "n_way", "k_shot", "n_episodes", "mean_acc", "ci95"]


@dataclass(frozen=True)
class EvalReport:
    method_name: str
    domain_name: str
    n_way: int
    k_shot: int
    n_query: int
    n_episodes: int
    mean_accuracy: float  # percent
    ci95_halfwidth: float  # percent
    seed: int

    @property
    def spec_key(self) -> tuple[int, int, int]:
        return self.n_way, self.k_shot, self.n_query

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))


def summarize(accuracies: Sequence[float]) -> tuple[float, float]:
    """(mean, 1.96 * std / sqrt(n)), both in percent."""
    # sorted so the floating-point reduction does not depend on episode order
    acc = np.sort(np.asarray(accuracies, dtype=np.float64))
    if len(acc) == 0:
        raise ValidationError("no episodes to summarize")
    return 100.0 * float(acc.mean()), 100.0 * 1.96 * float(acc.std()) / math.sqrt(len(acc))


def episode_accuracies(features: torch.Tensor, test_set: DomainDataset, spec: EpisodeSpec,
                       n_episodes: int, seed: int, metric="sqeuclidean",
                       indices: Sequence[int] | None = None) -> np.ndarray:
    """Per-episode query accuracy given precomputed features for every test example."""
    stream = sample_episode_stream(test_set, spec, n_episodes, seed)
    out = []
    for i in (range(n_episodes) if indices is None else indices):
        task = stream[i]
        protos = compute_prototypes(features[task.support_ids], task.support_labels, spec.n_way)
        pred = classify_queries(features[task.query_ids], protos, task.query_labels, metric)
        out.append(pred.accuracy)
    return np.array(out)


def evaluate(state: TrainState | Callable, test_set: DomainDataset, spec: EpisodeSpec,
             n_episodes: int = 10000, seed: int = 0, method_name: str = "model",
             metric: str = "sqeuclidean") -> EvalReport:
    """Score a frozen extractor on ``n_episodes`` episodes of ``test_set``.

    ``state`` is a TrainState or any callable mapping an (N, H, W, C) array to
    (N, d) features. Inference is deterministic, so each test image is
    embedded once and episodes index into that table.
    """
    if isinstance(state, TrainState):
        features = extract(state, test_set.images).double()
    else:
        features = torch.as_tensor(np.asarray(state(test_set.images)), dtype=torch.float64)
    acc = episode_accuracies(features, test_set, spec, n_episodes, seed, metric)
    mean, ci = summarize(acc)
    return EvalReport(method_name, test_set.domain_name, spec.n_way, spec.k_shot, spec.n_query,
                      n_episodes, mean, ci, seed)


class ResultsTable:
    """Method x domain grid of reports for one episode spec, plus a row average."""

    def __init__(self, reports: Sequence[EvalReport], domains: Sequence[str] | None = None,
                 methods: Sequence[str] | None = None):
        if not reports:
            raise ValidationError("no reports")
        specs = {r.spec_key for r in reports}
        if len(specs) != 1:
            raise ValidationError(f"reports mix episode specs {sorted(specs)}")
        self.spec = specs.pop()
        protocols = {(r.n_episodes, r.seed) for r in reports}
        if len(protocols) != 1:
            raise ValidationError(f"reports were evaluated under different (n_episodes, seed): {sorted(protocols)}")
        self.methods = list(methods or dict.fromkeys(r.method_name for r in reports))
        self.domains = list(domains or dict.fromkeys(r.domain_name for r in reports))
        self.cells: dict[tuple[str, str], EvalReport] = {}
        for r in reports:
            key = (r.method_name, r.domain_name)
            if key in self.cells:
                raise ValidationError(f"duplicate report for {key}")
            self.cells[key] = r
        for m in self.methods:
            for d in self.domains:
                if (m, d) not in self.cells:
                    raise ValidationError(f"missing report for method {m!r}, domain {d!r}")

    def average(self, method: str) -> float:
        return sum(self.cells[(method, d)].mean_accuracy for d in self.domains) / len(self.domains)

    @property
    def rows(self) -> dict[str, dict[str, float]]:
        return {m: {**{d: self.cells[(m, d)].mean_accuracy for d in self.domains},
                    "average": self.average(m)} for m in self.methods}

    @property
    def title(self) -> str:
        n_way, k_shot, n_query = self.spec
        return f"{n_way}-way {k_shot}-shot ({n_query} queries/class)"

    def to_text(self) -> str:
        cols = [*self.domains, "average"]
        width = max(10, *(len(c) + 2 for c in cols))
        name_w = max(10, *(len(m) + 2 for m in self.methods))
        lines = [self.title, "".ljust(name_w) + "".join(c.rjust(width) for c in cols)]
        for m, row in self.rows.items():
            lines.append(m.ljust(name_w) + "".join(f"{row[c]:.2f}".rjust(width) for c in cols))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for m in self.methods:
            for d in self.domains:
                r = self.cells[(m, d)]
                w.writerow([m, d, r.n_way, r.k_shot, r.n_episodes,
                            f"{r.mean_accuracy:.2f}", f"{r.ci95_halfwidth:.2f}"])
            w.writerow([m, "average", self.spec[0], self.spec[1],
                        sum(self.cells[(m, d)].n_episodes for d in self.domains),
                        f"{self.average(m):.2f}", ""])
        return buf.getvalue()


def build_results_table(reports: Sequence[EvalReport], domains=None, methods=None) -> ResultsTable:
    return ResultsTable(reports, domains, methods)


def build_results_tables(reports: Sequence[EvalReport]) -> list[ResultsTable]:
    """One table per distinct episode spec, in order of first appearance."""
    groups: dict[tuple, list[EvalReport]] = {}
    for r in reports:
        groups.setdefault(r.spec_key, []).append(r)
    return [ResultsTable(g) for g in groups.values()]


def write_report(report: EvalReport, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"eval_{report.method_name}_{report.domain_name}_{report.n_way}w{report.k_shot}s.json"
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    return path


def read_reports(directory: str | Path) -> list[EvalReport]:
    return [EvalReport.from_json(p.read_text(encoding="utf-8"))
            for p in sorted(Path(directory).glob("eval_*.json"))]
