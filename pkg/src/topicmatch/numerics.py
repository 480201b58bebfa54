"""Dense layer primitives with analytic backward passes, Adam, and gradient checking.

Every array is float64.  Forward functions return ``(out, cache)`` and the
matching backward function consumes the cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"nonfinite values in {name}")


# --------------------------------------------------------------------------
# affine / tanh


def affine_forward(X, W, b):
    """Y = X @ W.T + b, with X [B x n], W [m x n], b [m]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ShapeError(f"affine: X {X.shape} incompatible with W {W.shape}")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"affine: b {b.shape} incompatible with W {W.shape}")
    return X @ W.T + b, (X, W)


def affine_backward(dout, cache):
    X, W = cache
    dX = dout @ W
    dW = dout.T @ X
    db = dout.sum(axis=0)
    return dX, dW, db


def tanh_forward(X):
    Y = np.tanh(X)
    return Y, Y


def tanh_backward(dY, cache):
    Y = cache
    return dY * (1.0 - Y * Y)


# --------------------------------------------------------------------------
# softmax / bag-of-words likelihood


def log_softmax(logits):
    """Row-wise log-softmax with max subtraction (vectors are one row)."""
    logits = np.asarray(logits, dtype=np.float64)
    shift = logits - logits.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def bow_nll(log_probs, bow) -> float:
    """-sum(count * log_prob[term]) for a single sparse bag."""
    log_probs = np.asarray(log_probs)
    if bow.dim != log_probs.shape[-1]:
        raise ShapeError(f"bow dim {bow.dim} vs log_probs {log_probs.shape}")
    if not bow.ids:
        return 0.0
    return -float(np.dot(np.asarray(bow.counts, dtype=np.float64), log_probs[list(bow.ids)]))


def softmax_bow_nll(logits, counts):
    """Per-row multinomial NLL of dense count rows under softmax(logits).

    Returns (nll [B], log_probs [B x V], dlogits [B x V]) where dlogits is the
    gradient of nll.sum().
    """
    if logits.shape != counts.shape:
        raise ShapeError(f"logits {logits.shape} vs counts {counts.shape}")
    lp = log_softmax(logits)
    nll = -(counts * lp).sum(axis=1)
    n = counts.sum(axis=1, keepdims=True)
    dlogits = n * np.exp(lp) - counts
    return nll, lp, dlogits


# --------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, dim, momentum=0.1, epsilon=1e-5):
        return cls(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim), momentum, epsilon)

    @property
    def dim(self):
        return self.gamma.shape[0]


def batch_norm_forward(X, state: BatchNormState, train: bool, update_stats: bool = True):
    """Normalise each column of X; train mode uses batch statistics.

    In train mode with ``update_stats`` the running statistics are blended
    with the batch statistics (unbiased variance) using ``momentum``.
    """
    if X.ndim != 2 or X.shape[1] != state.dim:
        raise ShapeError(f"batch_norm: X {X.shape} vs feature dim {state.dim}")
    if train:
        B = X.shape[0]
        if B < 2:
            raise ValueError("batch_norm in train mode needs batch size >= 2")
        mean = X.mean(axis=0)
        xc = X - mean
        var = (xc * xc).mean(axis=0)
        if update_stats:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mean
            state.running_var = (1 - m) * state.running_var + m * var * (B / (B - 1))
    else:
        xc = X - state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = xc * inv_std
    out = state.gamma * xhat + state.beta
    return out, (xhat, inv_std, state.gamma, train)


def batch_norm_backward(dout, cache):
    """Returns (dX, dgamma, dbeta)."""
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    B = dout.shape[0]
    dX = (inv_std / B) * (
        B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
    )
    return dX, dgamma, dbeta


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update applied in place; returns ``params``.

    Parameters are visited in sorted-name order so runs are reproducible.
    """
    names = sorted(params)
    for name in names:
        if name not in grads:
            raise KeyError(f"missing gradient for {name}")
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"grad {name} {g.shape} vs param {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"nonfinite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in names:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


# --------------------------------------------------------------------------
# gradient check


def grad_check(f, x, eps=1e-5, floor=1e-5, max_coords=None, rng=None, subset_threshold=10_000):
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(x) -> (value, grad)`` on a flat float64 vector.  The per-coordinate
    error is ``|a - n| / max(|a|, |n|, s)`` with ``s = floor * max(1, max|a|)``,
    so coordinates whose true gradient is zero are judged against the
    gradient's overall scale instead of their own roundoff.  Above
    ``subset_threshold`` coordinates a random subset (at least 64) is checked.
    """
    x = np.array(x, dtype=np.float64).ravel()
    _, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != x.shape:
        raise ShapeError(f"gradient {analytic.shape} vs point {x.shape}")
    idx = np.arange(x.size)
    if max_coords is None and x.size > subset_threshold:
        max_coords = max(64, subset_threshold // 10)
    if max_coords is not None and max_coords < x.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(x.size, size=max(64, max_coords), replace=False))
    scale = floor * max(1.0, float(np.abs(analytic).max(initial=0.0)))
    worst = 0.0
    for i in idx:
        old = x[i]
        x[i] = old + eps
        fp = f(x)[0]
        x[i] = old - eps
        fm = f(x)[0]
        x[i] = old
        num = (fp - fm) / (2 * eps)
        a = analytic[i]
        err = abs(a - num) / max(abs(a), abs(num), scale)
        worst = max(worst, err)
    return worst
