"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from topicmatch.corpus import BowVector
from topicmatch.nvtm import NvtmParams, elbo


def random_bows(rng, n, V, rate=0.5, min_total=1):
    out = []
    for _ in range(n):
        while True:
            x = rng.poisson(rate, V)
            if x.sum() >= min_total:
                break
        ids = tuple(int(i) for i in np.flatnonzero(x))
        out.append(BowVector(ids, tuple(int(x[i]) for i in ids), V))
    return out


def perturbed_params(V, H, K, seed=1, scale=0.1, batch_norm=True):
    """Freshly initialised parameters with every tensor nudged off its init value."""
    rng = np.random.default_rng(seed)
    p = NvtmParams.init(V, H, K, rng, batch_norm)
    for k in p.tensors:
        p.tensors[k] += rng.normal(0, scale, p.tensors[k].shape)
    return p


def flat_elbo_objective(params, X, prior, eps, kl_weight=1.0):
    """(f, x0): f maps a flat parameter vector to (-ELBO, flat gradient)."""
    names = sorted(params.tensors)
    shapes = [params.tensors[n].shape for n in names]
    sizes = [params.tensors[n].size for n in names]

    def load(x):
        o = 0
        for n, s, z in zip(names, shapes, sizes):
            params.tensors[n][...] = x[o:o + z].reshape(s)
            o += z

    def f(x):
        load(x)
        out, g = elbo(X, params, prior, eps, kl_weight, train=True, update_stats=False)
        return -out.total, np.concatenate([g[n].ravel() for n in names])

    x0 = np.concatenate([params.tensors[n].ravel() for n in names])
    return f, x0
