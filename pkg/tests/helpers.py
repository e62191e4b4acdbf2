"""Independent oracles shared by the test modules."""

import numpy as np
import torch


def central_difference(fn, x: torch.Tensor, coords, h=1e-4):
    """Numerical d fn / d x at flat ``coords`` (x is perturbed in place and restored)."""
    flat = x.data.view(-1)
    out = []
    with torch.no_grad():
        for i in coords:
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            out.append((up - down) / (2 * h))
    return np.array(out)


def relative_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(fn, x: torch.Tensor, n_coords=20, seed=0, h=1e-4):
    """Max relative error between autograd and central differences on random coordinates."""
    x.requires_grad_(True)
    x.grad = None
    loss = fn()
    (grad,) = torch.autograd.grad(loss, x)
    rng = np.random.default_rng(seed)
    coords = rng.choice(x.numel(), size=min(n_coords, x.numel()), replace=False)
    numeric = central_difference(fn, x, coords, h)
    analytic = grad.reshape(-1)[coords].numpy()
    return float(relative_error(analytic, numeric).max())


def contrastive_loss_scalar(f, positive, others, tau):
    """Plain-float -log(exp(<f,z+>/t) / sum_z exp(<f,z>/t)); ``others`` excludes z+."""
    import math

    dot = lambda a, b: sum(x * y for x, y in zip(a, b))
    num = math.exp(dot(f, positive) / tau)
    den = num + sum(math.exp(dot(f, z) / tau) for z in others)
    return -math.log(num / den)


def dbscan_reference(x, eps, min_samples, metric="euclidean"):
    """O(n^2) DBSCAN: explicit pairwise loops, breadth-first growth over core points.

    Same conventions as the library: inclusive eps, self counted, clusters
    numbered by lowest-index core point, a border point joins the cluster of
    its lowest-index core neighbour, outlier j gets -(j + 1).
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)

    def dist(i, j):
        if metric == "cosine":
            a, b = x[i], x[j]
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            na, nb = (na or 1.0), (nb or 1.0)
            return 1.0 - float(a @ b) / (na * nb)
        return float(np.sqrt(((x[i] - x[j]) ** 2).sum()))

    nbrs = [[j for j in range(n) if dist(i, j) <= eps] for i in range(n)]
    core = [len(nb) >= min_samples for nb in nbrs]
    labels = [None] * n
    next_id = 0
    for i in range(n):
        if not core[i] or labels[i] is not None:
            continue
        labels[i] = next_id
        queue = [i]
        while queue:
            p = queue.pop()
            for q in nbrs[p]:
                if core[q] and labels[q] is None:
                    labels[q] = next_id
                    queue.append(q)
        next_id += 1
    for i in range(n):
        if not core[i]:
            core_nbrs = [j for j in nbrs[i] if core[j]]
            if core_nbrs:
                labels[i] = labels[min(core_nbrs)]
    k = 0
    for i in range(n):
        if labels[i] is None:
            k += 1
            labels[i] = -k
    return np.array(labels), next_id, k
