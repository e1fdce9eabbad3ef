"""Independent reference computations used by the unit and acceptance tests.

Everything here is written with plain loops over numpy arrays so it shares
no code path with the library under test.
"""
import itertools

import numpy as np
import torch


def leaky(x, slope):
    return x if x > 0 else slope * x


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def neighborhoods(A, self_loops):
    n = A.shape[0]
    out = []
    for u in range(n):
        nb = [v for v in range(n) if A[u, v] != 0 or (self_loops and u == v)]
        out.append(nb or [u])
    return out


def attention_dense(W, a, X, A, slope=0.2, self_loops=False):
    """alpha[u, v] by explicit softmax over each neighborhood."""
    Wh = X @ W.T
    d = Wh.shape[1]
    n = X.shape[0]
    alpha = np.zeros((n, n))
    for u, nb in enumerate(neighborhoods(A, self_loops)):
        e = np.array([leaky(float(a[:d] @ Wh[u] + a[d:] @ Wh[v]), slope) for v in nb])
        w = np.exp(e - e.max())
        w /= w.sum()
        for v, val in zip(nb, w):
            alpha[u, v] = val
    return alpha


def gat_dense(layers, X, A, slope=0.2, self_loops=True, act=elu):
    """Stacked attention aggregation, h_u <- act(sum_v alpha_uv W h_v)."""
    h = X
    for W, a in layers:
        alpha = attention_dense(W, a, h, A, slope, self_loops)
        h = act(alpha @ (h @ W.T))
    return h


def model_layers(model):
    return [(l.W.weight.detach().numpy(), l.a.weight.detach().numpy()[0]) for l in model.layers]


def random_graph(rng, n, p=0.5):
    A = np.triu((rng.random((n, n)) < p).astype(float), 1)
    return A + A.T


def finite_difference_check(fn, tensors, eps=1e-6):
    """Largest norm-relative error between autograd and central differences.

    ``fn`` maps the list of tensors to a scalar tensor.
    """
    tensors = [t.detach().clone().requires_grad_(True) for t in tensors]
    loss = fn(tensors)
    grads = torch.autograd.grad(loss, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        num = torch.zeros_like(t)
        flat = t.detach().view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = fn(tensors).item()
                flat[i] = orig - eps
                down = fn(tensors).item()
                flat[i] = orig
            num.view(-1)[i] = (up - down) / (2 * eps)
        denom = max(g.norm().item(), num.norm().item(), 1e-12)
        worst = max(worst, (g - num).norm().item() / denom)
    return worst


def pairwise_mean_distance(groups):
    """Class-by-class mean Euclidean distance by enumerating every pair."""
    k = len(groups)
    D = np.full((k, k), np.nan)
    for i, j in itertools.product(range(k), repeat=2):
        ds = []
        for p, x in enumerate(groups[i]):
            for q, y in enumerate(groups[j]):
                if i == j and p == q:
                    continue
                ds.append(float(np.sqrt(np.sum((np.asarray(x) - np.asarray(y)) ** 2))))
        if ds:
            D[i, j] = sum(ds) / len(ds)
    return D


def minmax_matrix(D):
    lo, hi = np.nanmin(D), np.nanmax(D)
    return (D - lo) / (hi - lo) if hi > lo else np.where(np.isnan(D), np.nan, 0.0)
