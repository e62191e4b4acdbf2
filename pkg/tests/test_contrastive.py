import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import contrastive_loss_scalar, dbscan_reference, gradcheck
from xdfsl.backbone import new_train_state
from xdfsl.contrastive import (BaselineConfig, ClusterAssignment, DbscanConfig, HybridPrototypeMemory,
                               PrototypeRef, assign_pseudo_labels, baseline_train, cluster_purity,
                               dbscan_cluster, init_memory, kmeans_cluster, prototype_probabilities,
                               unified_contrastive_loss, update_memory)
from xdfsl.datasets import DomainDataset, LabeledExample, UnlabelledDataset
from xdfsl.errors import ValidationError


def t(*rows):
    return torch.tensor(rows, dtype=torch.float64)


def memory(source=(), clusters=(), outliers=(), d=2, tau=1.0, m=0.2):
    bank = lambda rows: t(*rows).reshape(-1, d)
    return HybridPrototypeMemory(bank(source), bank(clusters), bank(outliers), tau, m)


class TestLoss:
    def test_singleton_memory(self):
        mem = memory(source=[[1.0, 0.0]])
        assert unified_contrastive_loss(t(1.0, 0.0), mem, ("source", 0)).item() == pytest.approx(0.0, abs=1e-12)

    def test_positive_aligned(self):
        mem = memory(source=[[1.0, 0.0]], clusters=[[0.0, 1.0]])
        loss = unified_contrastive_loss(t(1.0, 0.0), mem, ("source", 0)).item()
        assert loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
        assert loss == pytest.approx(0.3133, abs=1e-4)

    def test_positive_orthogonal(self):
        mem = memory(source=[[1.0, 0.0]], outliers=[[0.0, 1.0]])
        loss = unified_contrastive_loss(t(1.0, 0.0), mem, ("outlier", 0)).item()
        assert loss == pytest.approx(math.log(1 + math.e), abs=1e-12)

    def test_no_outliers_means_no_outlier_term(self):
        with_out = memory(source=[[1.0, 0.0]], clusters=[[0.0, 1.0]])
        assert with_out.sizes == (1, 1, 0)
        got = unified_contrastive_loss(t(0.6, 0.8), with_out, ("cluster", 0)).item()
        want = contrastive_loss_scalar([0.6, 0.8], [0.0, 1.0], [[1.0, 0.0]], 1.0)
        assert got == pytest.approx(want, abs=1e-12)

    def test_batch_is_mean(self):
        mem = memory(source=[[1.0, 0.0]], clusters=[[0.0, 1.0]], tau=0.5)
        f = t([1.0, 0.0], [0.0, 1.0])
        refs = [("source", 0), ("cluster", 0)]
        single = [unified_contrastive_loss(f[i], mem, refs[i]).item() for i in range(2)]
        assert unified_contrastive_loss(f, mem, refs).item() == pytest.approx(np.mean(single), abs=1e-12)

    def test_unresolvable_ref(self):
        mem = memory(source=[[1.0, 0.0]])
        for ref in [("cluster", 0), ("source", 1), ("source", -1), ("nope", 0)]:
            with pytest.raises(ValidationError):
                unified_contrastive_loss(t(1.0, 0.0), mem, ref)

    def test_empty_memory(self):
        with pytest.raises(ValidationError):
            unified_contrastive_loss(t(1.0, 0.0), memory(), ("source", 0))

    def test_stabilized_matches_naive(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mem = _random_memory(rng, tau=0.2)
            f = torch.nn.functional.normalize(torch.from_numpy(rng.normal(size=(4, 8))), dim=1)
            refs = [_random_ref(rng, mem) for _ in range(4)]
            a = unified_contrastive_loss(f, mem, refs, stabilize=True).item()
            b = unified_contrastive_loss(f, mem, refs, stabilize=False).item()
            assert abs(a - b) < 1e-6

    def test_large_logits_finite(self):
        mem = memory(source=[[1.0, 0.0]], clusters=[[-1.0, 0.0]], tau=1e-3)
        loss = unified_contrastive_loss(t(1.0, 0.0), mem, ("cluster", 0))
        assert torch.isfinite(loss) and loss.item() == pytest.approx(2000.0, rel=1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        mem = _random_memory(rng, tau=0.1)
        f = torch.from_numpy(rng.normal(size=(3, 8)))
        refs = [_random_ref(rng, mem) for _ in range(3)]
        assert gradcheck(lambda: unified_contrastive_loss(f, mem, refs), f) < 1e-4


def _random_memory(rng, d=8, tau=0.1):
    sizes = rng.integers(1, 5), rng.integers(0, 5), rng.integers(0, 5)
    banks = [torch.nn.functional.normalize(torch.from_numpy(rng.normal(size=(n, d))), dim=1) for n in sizes]
    return HybridPrototypeMemory(*banks, temperature=tau)


def _random_ref(rng, mem):
    choices = [(b, i) for b, n in zip(("source", "cluster", "outlier"), mem.sizes) for i in range(n)]
    return choices[rng.integers(len(choices))]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.02, 2.0))
def test_loss_nonnegative_and_probabilities_normalized(seed, tau):
    rng = np.random.default_rng(seed)
    mem = _random_memory(rng, tau=tau)
    f = torch.nn.functional.normalize(torch.from_numpy(rng.normal(size=(5, 8))), dim=1)
    refs = [_random_ref(rng, mem) for _ in range(5)]
    assert unified_contrastive_loss(f, mem, refs).item() >= 0.0
    p = prototype_probabilities(f, mem)
    assert p.shape[1] == sum(mem.sizes)
    assert torch.allclose(p.sum(1), torch.ones(5, dtype=p.dtype), atol=1e-6)


class TestUpdateMemory:
    def test_momentum_one_unchanged(self):
        mem = memory(source=[[1.0, 0.0]], clusters=[[0.0, 1.0]])
        out = update_memory(mem, t([0.6, 0.8]), [("source", 0)], momentum=1.0)
        assert torch.equal(out.source, mem.source) and torch.equal(out.clusters, mem.clusters)

    def test_momentum_zero_is_normalized_feature(self):
        mem = memory(source=[[1.0, 0.0]])
        out = update_memory(mem, t([3.0, 4.0]), [("source", 0)], momentum=0.0)
        assert torch.allclose(out.source[0], t(0.6, 0.8))

    def test_half_momentum(self):
        mem = memory(source=[[1.0, 0.0]], clusters=[[0.0, -1.0]])
        out = update_memory(mem, t([0.0, 1.0]), [("source", 0)], momentum=0.5)
        s = 1 / math.sqrt(2)
        assert torch.allclose(out.source[0], t(s, s))
        assert torch.equal(out.clusters, mem.clusters)  # untouched entry

    def test_incoming_mean_per_entry(self):
        mem = memory(outliers=[[1.0, 0.0]], source=[[0.0, 1.0]])
        out = update_memory(mem, t([0.0, 2.0], [2.0, 0.0]), [("outlier", 0), ("outlier", 0)], momentum=0.0)
        s = 1 / math.sqrt(2)
        assert torch.allclose(out.outliers[0], t(s, s))

    def test_input_not_mutated(self):
        mem = memory(source=[[1.0, 0.0]])
        before = mem.source.clone()
        update_memory(mem, t([0.0, 1.0]), [("source", 0)], momentum=0.5)
        assert torch.equal(mem.source, before)

    def test_unknown_identity(self):
        mem = memory(source=[[1.0, 0.0]])
        with pytest.raises(ValidationError):
            update_memory(mem, t([0.0, 1.0]), [("cluster", 3)])
        with pytest.raises(ValidationError):
            update_memory(mem, t([0.0, 1.0], [1.0, 0.0]), [("source", 0)])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.floats(0.0, 1.0))
def test_memory_stays_unit_norm(seed, n_updates, m):
    rng = np.random.default_rng(seed)
    mem = _random_memory(rng)
    for _ in range(n_updates):
        refs = [_random_ref(rng, mem) for _ in range(3)]
        f = torch.from_numpy(rng.normal(size=(3, 8)) * rng.uniform(0.1, 10))
        mem = update_memory(mem, f, refs, momentum=m)
    norms = mem.all().norm(dim=1)
    assert torch.all((norms - 1).abs() < 1e-6)


class TestInitMemory:
    def test_class_centroid(self):
        a = ClusterAssignment(np.array([0]), 1, 0)
        mem = init_memory(t([0.0, 2.0], [2.0, 0.0]), [0, 0], t([3.0, 0.0]), a)
        s = 1 / math.sqrt(2)
        assert torch.allclose(mem.source[0], t(s, s))
        assert torch.allclose(mem.clusters[0], t(1.0, 0.0))
        assert mem.sizes == (1, 1, 0)

    def test_outliers_kept_in_order(self):
        a = ClusterAssignment(np.array([-1, 0, -2, 0]), 1, 2)
        fu = t([2.0, 0.0], [0.0, 1.0], [0.0, -5.0], [0.0, 3.0])
        mem = init_memory(t([1.0, 0.0]), [0], fu, a)
        assert torch.allclose(mem.outliers, t([1.0, 0.0], [0.0, -1.0]))
        assert torch.allclose(mem.clusters, t([0.0, 1.0]))
        assert mem.flat_index(PrototypeRef("outlier", 1)) == 3

    def test_empty_class(self):
        a = ClusterAssignment(np.array([0]), 1, 0)
        with pytest.raises(ValidationError):
            init_memory(t([1.0, 0.0]), [0], t([1.0, 0.0]), a, n_classes=2)

    def test_empty_cluster(self):
        a = ClusterAssignment(np.array([0]), 2, 0)
        with pytest.raises(ValidationError):
            init_memory(t([1.0, 0.0]), [0], t([1.0, 0.0]), a)

    def test_assignment_size_mismatch(self):
        a = ClusterAssignment(np.array([0, 0]), 1, 0)
        with pytest.raises(ValidationError):
            init_memory(t([1.0, 0.0]), [0], t([1.0, 0.0]), a)


class TestDbscan:
    def test_identical_points(self):
        a = dbscan_cluster(np.ones((7, 3)), DbscanConfig(eps=0.1, min_samples=7))
        assert a.n_clusters == 1 and a.n_outliers == 0 and (a.labels == 0).all()

    def test_two_groups(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.uniform(0, 0.1, (10, 2)), rng.uniform(0, 0.1, (10, 2)) + 5.0])
        cfg = DbscanConfig(eps=0.5, min_samples=4)
        a = dbscan_cluster(x, cfg)
        assert a.n_clusters == 2 and a.n_outliers == 0
        assert np.array_equal(a.labels, dbscan_reference(x, 0.5, 4)[0])

    def test_isolated_point_is_outlier(self):
        x = np.concatenate([np.zeros((6, 2)), [[10.0, 10.0]]])
        a = dbscan_cluster(x, DbscanConfig(eps=0.5, min_samples=4))
        assert a.labels[-1] == -1 and a.n_outliers == 1 and a.n_clusters == 1

    def test_eps_inclusive_and_self_counted(self):
        x = np.array([[0.0], [1.0]])
        a = dbscan_cluster(x, DbscanConfig(eps=1.0, min_samples=2))
        assert a.n_clusters == 1
        b = dbscan_cluster(x, DbscanConfig(eps=0.999, min_samples=2))
        assert b.n_clusters == 0 and b.labels.tolist() == [-1, -2]

    def test_border_joins_lowest_index_core(self):
        # the last point (1.0) has 3 neighbours: border of both chains, core of neither
        x = np.array([[2.0], [2.5], [3.0], [3.5], [0.0], [-0.5], [-1.0], [-1.5], [1.0]])
        a = dbscan_cluster(x, DbscanConfig(eps=1.0, min_samples=4))
        assert a.n_clusters == 2 and a.n_outliers == 0
        assert a.labels[8] == a.labels[0] == 0 and a.labels[4] == 1
        assert np.array_equal(a.labels, dbscan_reference(x, 1.0, 4)[0])

    def test_non_finite(self):
        with pytest.raises(ValidationError):
            dbscan_cluster(np.array([[0.0], [np.nan]]), DbscanConfig())

    def test_bad_config(self):
        with pytest.raises(ValidationError):
            DbscanConfig(eps=0.0)
        with pytest.raises(ValidationError):
            DbscanConfig(min_samples=1)
        with pytest.raises(ValidationError):
            DbscanConfig(metric="manhattan")

    def test_auto_eps_finds_structure(self):
        rng = np.random.default_rng(1)
        centers = rng.normal(size=(4, 16)) * 3
        x = np.concatenate([c + 0.1 * rng.normal(size=(25, 16)) for c in centers])
        a = dbscan_cluster(x, DbscanConfig(eps=100.0, min_samples=4, auto_eps=True, eps_quantile=0.5))
        assert a.n_clusters == 4
        assert cluster_purity(a, [str(i // 25) for i in range(100)]) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 120), st.sampled_from(["euclidean", "cosine"]))
def test_dbscan_matches_reference(seed, n, metric):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    eps = 0.5 if metric == "euclidean" else 0.1
    min_samples = int(rng.integers(2, 6))
    a = dbscan_cluster(x, DbscanConfig(eps=eps, min_samples=min_samples, metric=metric))
    assert np.array_equal(a.labels, dbscan_reference(x, eps, min_samples, metric)[0])
    assert a.n_clusters + a.n_outliers <= n
    clustered = a.labels[a.labels >= 0]
    assert sorted(set(clustered.tolist())) == list(range(a.n_clusters))
    outlier_ids = a.labels[a.labels < 0]
    assert sorted((-outlier_ids).tolist()) == list(range(1, a.n_outliers + 1))


def test_kmeans_backend():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(size=(10, 2)) + 10 * k for k in range(3)])
    a = kmeans_cluster(x, 3, seed=0)
    assert a.n_clusters == 3 and a.n_outliers == 0
    assert a.labels[0] == 0 and a.labels.tolist() == [0] * 10 + [1] * 10 + [2] * 10


def test_purity():
    a = ClusterAssignment(np.array([0, 0, 0, 1, -1]), 2, 1)
    assert cluster_purity(a, ["a", "a", "b", "c", "z"]) == pytest.approx(3 / 4)
    assert math.isnan(cluster_purity(a, None))


def test_single_cluster_warns_without_auto_eps():
    x = np.zeros((8, 4))
    with pytest.warns(RuntimeWarning):
        assign_pseudo_labels(x, BaselineConfig(dbscan=DbscanConfig(eps=0.5)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assign_pseudo_labels(x, BaselineConfig(dbscan=DbscanConfig(eps=0.5, auto_eps=True)))


# --- training loop ----------------------------------------------------------

def toy_sets(n_per_class=2, seed=0):
    rng = np.random.default_rng(seed)
    ex = [LabeledExample(rng.random((16, 16, 3)).astype(np.float32), c, "real")
          for c in ("a", "b") for _ in range(n_per_class)]
    train = DomainDataset("real", ex, ["a", "b"])
    unl = UnlabelledDataset("sketch", [rng.random((16, 16, 3)).astype(np.float32) for _ in range(4)],
                            ["x", "x", "y", "y"])
    return train, unl


def params(state):
    return {k: v.detach().clone() for k, v in state.named_parameters().items()}


def test_zero_rounds_unchanged():
    train, unl = toy_sets()
    state = new_train_state("conv-small", (16, 16, 3), seed=0)
    before = params(state)
    records = []
    baseline_train(state, train, unl, BaselineConfig(rounds=0), sink=records.append)
    after = params(state)
    assert records == [] and all(torch.equal(before[k], after[k]) for k in before)


@pytest.mark.parametrize("domain_norm", [True, False])
def test_one_round_one_step(domain_norm):
    train, unl = toy_sets()
    state = new_train_state("conv-small", (16, 16, 3), seed=0)
    before = params(state)
    records = []
    cfg = BaselineConfig(rounds=1, inner_iterations=1, batch_size=8, domain_norm=domain_norm,
                         dbscan=DbscanConfig(eps=0.6, min_samples=2))
    baseline_train(state, train, unl, cfg, np.random.default_rng(0), sink=records.append)
    assert len(records) == 1
    rec = records[0]
    assert rec["round"] == 1 and rec["steps"] == 1
    assert rec["n_clusters"] >= 0 and rec["n_clusters"] * 2 + rec["n_outliers"] <= 4
    assert math.isfinite(rec["mean_loss"]) and rec["mean_loss"] >= 0
    after = params(state)
    assert any(not torch.equal(before[k], after[k]) for k in before)


def test_baseline_deterministic():
    train, unl = toy_sets()
    cfg = BaselineConfig(rounds=2, inner_iterations=2, batch_size=8, dbscan=DbscanConfig(min_samples=2))
    out = []
    for _ in range(2):
        state = new_train_state("conv-small", (16, 16, 3), seed=3)
        baseline_train(state, train, unl, cfg, np.random.default_rng(5))
        out.append(params(state))
    assert all(torch.equal(out[0][k], out[1][k]) for k in out[0])


def test_bad_baseline_config():
    with pytest.raises(ValidationError):
        BaselineConfig(inner_iterations=0)
    with pytest.raises(ValidationError):
        BaselineConfig(rounds=-1)
    with pytest.raises(ValidationError):
        BaselineConfig(clustering="spectral")
