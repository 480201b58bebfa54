"""Neural variational topic model with a Laplace-approximated Dirichlet prior.

Encoder   z = tanh(BN(W1 x + b1)),  h = tanh(BN(W2 z + b2))
Posterior mu = BN(W3 h + b3),        log_var = clip(BN(W4 h + b4), -10, 10)
Sample    theta = mu + exp(log_var / 2) * eps
Decoder   log p(w | theta) = log_softmax(theta @ M)

The retrieval representation of a document is ``h`` computed with running
batch-norm statistics.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import BowVector, bow_matrix
from .numerics import (
    AdamState,
    BatchNormState,
    NonFiniteError,
    ShapeError,
    adam_step,
    affine_backward,
    affine_forward,
    batch_norm_backward,
    batch_norm_forward,
    log_softmax,
    softmax_bow_nll,
    tanh_backward,
    tanh_forward,
)

logger = logging.getLogger(__name__)

LOG_VAR_CLAMP = 10.0
BN_LAYERS = ("bn1", "bn2", "bn3", "bn4")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Named, independent random stream derived from one master seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])


# --------------------------------------------------------------------------
# prior


@dataclass(frozen=True)
class DirichletPrior:
    alpha: np.ndarray
    mu0: np.ndarray
    sigma0: np.ndarray  # variances

    @property
    def K(self):
        return self.alpha.shape[0]


def prior_laplace(alpha) -> DirichletPrior:
    """Logistic-normal moments matching Dirichlet(alpha) under the Laplace approximation."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    K = alpha.shape[0]
    if K < 2:
        raise ValueError("prior needs K >= 2")
    if not np.all(alpha > 0) or not np.all(np.isfinite(alpha)):
        raise ValueError("alpha entries must be positive and finite")
    log_a = np.log(alpha)
    mu0 = log_a - log_a.mean()
    inv = 1.0 / alpha
    sigma0 = inv * (1.0 - 2.0 / K) + inv.sum() / K**2
    return DirichletPrior(alpha, mu0, sigma0)


def symmetric_prior(K: int, alpha: float | None = None) -> DirichletPrior:
    return prior_laplace(np.full(K, 1.0 / K if alpha is None else alpha))


def gaussian_kl(mu, log_var, mu0, sigma0):
    """KL(N(mu, exp(log_var)) || N(mu0, sigma0)) per row, diagonal covariances."""
    var = np.exp(log_var)
    d = mu0 - mu
    return 0.5 * (var / sigma0 + d * d / sigma0 - 1.0 + np.log(sigma0) - log_var).sum(axis=-1)


# --------------------------------------------------------------------------
# configuration and parameters


@dataclass
class TrainConfig:
    hidden: int = 512
    topics: int = 100
    batch_size: int = 64
    epochs: int = 20
    lr: float = 5e-5
    alpha_symmetric: float | None = None  # None -> 1/K
    kl_schedule: list[float] | None = None  # None -> linear 0..1 over epochs
    lam: float = 1.0
    seed: int = 0
    batch_norm: bool = True
    bn_momentum: float = 0.1
    representation: str = "h"  # "h" or "mu"

    def validate(self) -> None:
        for name in ("hidden", "topics", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.topics < 2:
            raise ValueError("topics must be >= 2")
        if self.batch_norm and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 with batch normalisation")
        if self.lr < 0 or self.lam < 0:
            raise ValueError("lr and lam must be nonnegative")
        if self.representation not in ("h", "mu"):
            raise ValueError(f"unknown representation {self.representation!r}")
        sched = self.schedule()
        if any(not 0.0 <= w <= 1.0 for w in sched):
            raise ValueError("kl_schedule values must lie in [0, 1]")
        if any(b < a for a, b in zip(sched, sched[1:])):
            raise ValueError("kl_schedule must be nondecreasing")
        if len(sched) != self.epochs:
            raise ValueError(f"kl_schedule has {len(sched)} entries for {self.epochs} epochs")

    def schedule(self) -> list[float]:
        if self.kl_schedule is not None:
            return [float(w) for w in self.kl_schedule]
        if self.epochs == 1:
            return [1.0]
        return [min(1.0, e / (self.epochs - 1)) for e in range(self.epochs)]

    def prior(self) -> DirichletPrior:
        return symmetric_prior(self.topics, self.alpha_symmetric)


class NvtmParams:
    """Trainable tensors plus batch-norm states of one model.

    ``tensors`` holds everything Adam updates (weights, biases, batch-norm
    scale/shift); ``bn`` states share their gamma/beta arrays with it.
    """

    def __init__(self, V: int, H: int, K: int, tensors: dict, batch_norm: bool = True,
                 running: dict | None = None, bn_momentum: float = 0.1):
        self.V, self.H, self.K = V, H, K
        self.batch_norm = batch_norm
        self.tensors = tensors
        self._check_shapes()
        self.bn: dict[str, BatchNormState] = {}
        if batch_norm:
            for layer in BN_LAYERS:
                g = tensors[f"{layer}.gamma"]
                st = BatchNormState(g, tensors[f"{layer}.beta"], np.zeros_like(g),
                                    np.ones_like(g), momentum=bn_momentum)
                if running is not None:
                    st.running_mean = np.array(running[f"{layer}.running_mean"], dtype=np.float64)
                    st.running_var = np.array(running[f"{layer}.running_var"], dtype=np.float64)
                self.bn[layer] = st

    def _check_shapes(self):
        V, H, K = self.V, self.H, self.K
        expect = {
            "W1": (H, V), "b1": (H,), "W2": (K, H), "b2": (K,),
            "W3": (K, K), "b3": (K,), "W4": (K, K), "b4": (K,), "M": (K, V),
        }
        if self.batch_norm:
            for layer, d in zip(BN_LAYERS, (H, K, K, K)):
                expect[f"{layer}.gamma"] = (d,)
                expect[f"{layer}.beta"] = (d,)
        if set(expect) != set(self.tensors):
            raise ShapeError(f"tensor names {sorted(self.tensors)} != {sorted(expect)}")
        for name, shape in expect.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: {self.tensors[name].shape} != {shape}")

    @classmethod
    def init(cls, V, H, K, rng, batch_norm=True, bn_momentum=0.1) -> "NvtmParams":
        def uni(rows, cols):
            bound = 1.0 / math.sqrt(cols)
            return rng.uniform(-bound, bound, size=(rows, cols))

        t = {
            "W1": uni(H, V), "b1": np.zeros(H),
            "W2": uni(K, H), "b2": np.zeros(K),
            "W3": uni(K, K), "b3": np.zeros(K),
            "W4": uni(K, K), "b4": np.zeros(K),
            # theta @ M: fan-in is K
            "M": uni(V, K).T.copy(),
        }
        if batch_norm:
            for layer, d in zip(BN_LAYERS, (H, K, K, K)):
                t[f"{layer}.gamma"] = np.ones(d)
                t[f"{layer}.beta"] = np.zeros(d)
        return cls(V, H, K, t, batch_norm, bn_momentum=bn_momentum)

    def running(self) -> dict:
        out = {}
        for layer, st in self.bn.items():
            out[f"{layer}.running_mean"] = st.running_mean
            out[f"{layer}.running_var"] = st.running_var
        return out

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Model tensors in canonical (declared) order, running statistics last."""
        names = sorted(self.tensors)
        return [(n, self.tensors[n]) for n in names] + sorted(self.running().items())

    def copy(self) -> "NvtmParams":
        return NvtmParams(
            self.V, self.H, self.K,
            {k: v.copy() for k, v in self.tensors.items()},
            self.batch_norm,
            {k: v.copy() for k, v in self.running().items()},
            bn_momentum=next(iter(self.bn.values())).momentum if self.bn else 0.1,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_arrays():
            h.update(name.encode())
            h.update(repr(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def equal(self, other: "NvtmParams") -> bool:
        a, b = self.named_arrays(), other.named_arrays()
        return [n for n, _ in a] == [n for n, _ in b] and all(
            np.array_equal(x, y) for (_, x), (_, y) in zip(a, b)
        )


@dataclass
class ElboBreakdown:
    recon: float
    neg_kl: float
    total: float
    kl_weight_applied: float


# --------------------------------------------------------------------------
# forward / backward pieces


def _as_matrix(X, V):
    if isinstance(X, BowVector):
        X = [X]
    if isinstance(X, (list, tuple)):
        X = bow_matrix(X, V)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != V:
        raise ShapeError(f"input dim {X.shape[1]} vs model vocabulary {V}")
    return X


def _bn(params, layer, X, train, update_stats):
    if not params.batch_norm:
        return X, None
    return batch_norm_forward(X, params.bn[layer], train, update_stats)


def _bn_back(params, layer, d, cache, grads):
    if cache is None:
        return d
    dX, dg, db = batch_norm_backward(d, cache)
    grads[f"{layer}.gamma"] += dg
    grads[f"{layer}.beta"] += db
    return dX


def _encode_fwd(params, X, train, update_stats):
    t = params.tensors
    a1, c1 = affine_forward(X, t["W1"], t["b1"])
    n1, cb1 = _bn(params, "bn1", a1, train, update_stats)
    z, ct1 = tanh_forward(n1)
    a2, c2 = affine_forward(z, t["W2"], t["b2"])
    n2, cb2 = _bn(params, "bn2", a2, train, update_stats)
    h, ct2 = tanh_forward(n2)
    return h, (c1, cb1, ct1, c2, cb2, ct2)


def _encode_bwd(params, dh, cache, grads):
    c1, cb1, ct1, c2, cb2, ct2 = cache
    d = tanh_backward(dh, ct2)
    d = _bn_back(params, "bn2", d, cb2, grads)
    d, dW, db = affine_backward(d, c2)
    grads["W2"] += dW
    grads["b2"] += db
    d = tanh_backward(d, ct1)
    d = _bn_back(params, "bn1", d, cb1, grads)
    _, dW, db = affine_backward(d, c1)
    grads["W1"] += dW
    grads["b1"] += db


def _posterior_fwd(params, h, train, update_stats):
    t = params.tensors
    a3, c3 = affine_forward(h, t["W3"], t["b3"])
    mu, cb3 = _bn(params, "bn3", a3, train, update_stats)
    a4, c4 = affine_forward(h, t["W4"], t["b4"])
    raw, cb4 = _bn(params, "bn4", a4, train, update_stats)
    log_var = np.clip(raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
    inside = (raw >= -LOG_VAR_CLAMP) & (raw <= LOG_VAR_CLAMP)
    return mu, log_var, (c3, cb3, c4, cb4, inside)


def _posterior_bwd(params, dmu, dlog_var, cache, grads):
    c3, cb3, c4, cb4, inside = cache
    d3 = _bn_back(params, "bn3", dmu, cb3, grads)
    dh3, dW, db = affine_backward(d3, c3)
    grads["W3"] += dW
    grads["b3"] += db
    d4 = _bn_back(params, "bn4", dlog_var * inside, cb4, grads)
    dh4, dW, db = affine_backward(d4, c4)
    grads["W4"] += dW
    grads["b4"] += db
    return dh3 + dh4


def encode(X, params: NvtmParams, train: bool = False, update_stats: bool = False):
    """Topic representation h [B x K]; eval mode uses running statistics."""
    return _encode_fwd(params, _as_matrix(X, params.V), train, update_stats)[0]


def posterior(h, params: NvtmParams, train: bool = False, update_stats: bool = False):
    """(mu, log_var) of the approximate posterior; log_var is clamped to [-10, 10]."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.K:
        raise ShapeError(f"h {h.shape} vs K={params.K}")
    mu, log_var, _ = _posterior_fwd(params, h, train, update_stats)
    return mu, log_var


def sample_theta(mu, log_var, epsilon):
    mu, log_var, epsilon = map(np.asarray, (mu, log_var, epsilon))
    if not mu.shape == log_var.shape == epsilon.shape:
        raise ShapeError(f"mu {mu.shape}, log_var {log_var.shape}, eps {epsilon.shape}")
    return mu + np.exp(0.5 * log_var) * epsilon


def decode_log_probs(theta, M):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 1:
        theta = theta[None, :]
    if theta.shape[1] != M.shape[0]:
        raise ShapeError(f"theta {theta.shape} vs M {M.shape}")
    return log_softmax(theta @ M)


def _zero_grads(params):
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def _elbo_core(params, X, prior, eps, kl_weight, train, update_stats, grads, scale):
    """Forward (and, if ``grads`` is given, backward of -scale*total) of the batch-mean ELBO."""
    if prior.K != params.K:
        raise ShapeError(f"prior K={prior.K} vs model K={params.K}")
    B = X.shape[0]
    if eps.shape != (B, params.K):
        raise ShapeError(f"epsilon {eps.shape} vs batch {(B, params.K)}")
    h, enc_cache = _encode_fwd(params, X, train, update_stats)
    mu, log_var, post_cache = _posterior_fwd(params, h, train, update_stats)
    std = np.exp(0.5 * log_var)
    theta = mu + std * eps
    M = params.tensors["M"]
    logits = theta @ M
    for name, arr in (("h", h), ("mu", mu), ("log_var", log_var), ("theta", theta),
                      ("logits", logits)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"nonfinite values in {name}")
    nll, _, dlogits = softmax_bow_nll(logits, X)
    kl = gaussian_kl(mu, log_var, prior.mu0, prior.sigma0)
    recon = -float(nll.sum()) / B
    neg_kl = -float(kl.sum()) / B
    out = ElboBreakdown(recon, neg_kl, recon + kl_weight * neg_kl, float(kl_weight))
    if grads is None:
        return out
    # gradient of scale * (-total)
    c = scale / B
    dlogits = dlogits * c
    grads["M"] += theta.T @ dlogits
    dtheta = dlogits @ M.T
    var = std * std
    dmu = dtheta + (c * kl_weight) * (mu - prior.mu0) / prior.sigma0
    dlog_var = dtheta * eps * 0.5 * std + (c * kl_weight) * 0.5 * (var / prior.sigma0 - 1.0)
    dh = _posterior_bwd(params, dmu, dlog_var, post_cache, grads)
    _encode_bwd(params, dh, enc_cache, grads)
    return out


def elbo(X, params: NvtmParams, prior: DirichletPrior, epsilon, kl_weight: float = 1.0,
         train: bool = True, update_stats: bool = False, with_grad: bool = True):
    """Batch-mean evidence lower bound and gradients of its negative.

    Returns ``(ElboBreakdown, grads)``; ``grads`` maps tensor names to the
    gradient of ``-total`` (``None`` when ``with_grad`` is false).
    """
    if not 0.0 <= kl_weight <= 1.0:
        raise ValueError("kl_weight must lie in [0, 1]")
    X = _as_matrix(X, params.V)
    grads = _zero_grads(params) if with_grad else None
    out = _elbo_core(params, X, prior, np.asarray(epsilon, dtype=np.float64), kl_weight,
                     train, update_stats, grads, 1.0)
    return out, grads


def supervised_loss(Ha, Hc):
    """In-batch softmax cross-entropy over dot-product scores Ha @ Hc.T.

    Row i's positive is comment i.  Returns (mean loss, dHa, dHc).
    """
    B = Ha.shape[0]
    if Hc.shape != Ha.shape:
        raise ShapeError(f"article reps {Ha.shape} vs comment reps {Hc.shape}")
    S = Ha @ Hc.T
    lp = log_softmax(S)
    loss = -float(np.trace(lp)) / B
    dS = (np.exp(lp) - np.eye(B)) / B
    return loss, dS @ Hc, dS.T @ Ha


def _supervised_core(params, Xa, Xc, grads, scale):
    B = Xa.shape[0]
    if B < 2:
        raise ValueError("supervised batch needs >= 2 pairs for in-batch negatives")
    X = np.vstack([Xa, Xc])
    H, cache = _encode_fwd(params, X, True, False)
    loss, dHa, dHc = supervised_loss(H[:B], H[B:])
    if grads is not None:
        _encode_bwd(params, scale * np.vstack([dHa, dHc]), cache, grads)
    return loss


def embed(doc, params: NvtmParams, representation: str = "h"):
    """Deterministic topic representation [K] (or [B x K] for a batch)."""
    single = isinstance(doc, BowVector) or (isinstance(doc, np.ndarray) and doc.ndim == 1)
    X = _as_matrix(doc, params.V)
    h = encode(X, params)
    if representation == "mu":
        h = posterior(h, params)[0]
    elif representation != "h":
        raise ValueError(f"unknown representation {representation!r}")
    return h[0] if single else h


def embed_many(bows: Sequence[BowVector], params: NvtmParams, representation: str = "h",
               chunk: int = 1024) -> np.ndarray:
    out = np.zeros((len(bows), params.K))
    for s in range(0, len(bows), chunk):
        out[s:s + chunk] = embed(list(bows[s:s + chunk]), params, representation)
    return out


def evaluate_elbo(bows: Sequence[BowVector], params, prior, seed=0, kl_weight=1.0,
                  chunk=512) -> ElboBreakdown:
    """Eval-mode mean ELBO over documents with a fixed noise draw."""
    rng = substream(seed, "heldout")
    eps_all = rng.standard_normal((len(bows), params.K))
    rec = nkl = 0.0
    for s in range(0, len(bows), chunk):
        X = bow_matrix(bows[s:s + chunk], params.V)
        out, _ = elbo(X, params, prior, eps_all[s:s + chunk], kl_weight, train=False,
                      with_grad=False)
        n = X.shape[0]
        rec += out.recon * n
        nkl += out.neg_kl * n
    n = len(bows)
    return ElboBreakdown(rec / n, nkl / n, (rec + kl_weight * nkl) / n, kl_weight)


# --------------------------------------------------------------------------
# training


def epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    """Shuffled minibatch index arrays covering 0..n-1, ceil(n/batch_size) of them.

    A trailing singleton batch borrows its predecessor so batch statistics
    are defined.
    """
    order = rng.permutation(n)
    batches = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-1] = order[-2:]
    return batches


@dataclass
class TrainState:
    params: NvtmParams
    adam: AdamState
    epoch: int = 0  # epochs completed
    history: list[dict] = field(default_factory=list)


def _fit(state: TrainState, bows, config: TrainConfig, prior, pairs=None, lam=0.0,
         heldout=None, callback: Callable | None = None):
    config.validate()
    if not bows:
        raise ValueError("empty training corpus")
    if pairs is not None and len(pairs) < 2:
        raise ValueError("supervised batch needs >= 2 pairs for in-batch negatives")
    params = state.params
    sched = config.schedule()
    sup_bs = min(config.batch_size, len(pairs)) if pairs is not None else 0
    for epoch in range(state.epoch, config.epochs):
        w = sched[epoch]
        batches = epoch_batches(len(bows), config.batch_size,
                                substream(config.seed, "shuffle", epoch))
        noise = substream(config.seed, "noise", epoch)
        if pairs is not None:
            sup_rng = substream(config.seed, "supervised", epoch)
            sup_order = np.concatenate([sup_rng.permutation(len(pairs))
                                        for _ in range(-(-len(batches) * sup_bs // len(pairs)))])
        rec = nkl = sup_total = 0.0
        for step, idx in enumerate(batches):
            X = bow_matrix([bows[i] for i in idx], params.V)
            eps = noise.standard_normal((len(idx), params.K))
            grads = _zero_grads(params)
            out = _elbo_core(params, X, prior, eps, w, True, True, grads, 1.0)
            if pairs is not None:
                sel = sup_order[step * sup_bs:(step + 1) * sup_bs]
                Xa = bow_matrix([pairs[i][0] for i in sel], params.V)
                Xc = bow_matrix([pairs[i][1] for i in sel], params.V)
                sup_total += _supervised_core(params, Xa, Xc, grads, lam)
            adam_step(params.tensors, grads, state.adam)
            rec += out.recon
            nkl += out.neg_kl
        nb = len(batches)
        rec, nkl = rec / nb, nkl / nb
        record = {"epoch": epoch, "recon": rec, "kl": -nkl, "total": rec + w * nkl,
                  "kl_weight": w}
        if pairs is not None:
            record["supervised"] = sup_total / nb
        if heldout:
            record["heldout_elbo"] = evaluate_elbo(heldout, params, prior, config.seed).total
        state.history.append(record)
        state.epoch = epoch + 1
        logger.info("epoch %d %s", epoch, json.dumps(record))
        if callback is not None:
            callback(state)
    return state


def new_state(V: int, config: TrainConfig) -> TrainState:
    params = NvtmParams.init(V, config.hidden, config.topics, substream(config.seed, "init"),
                             config.batch_norm, config.bn_momentum)
    return TrainState(params, AdamState(lr=config.lr))


def train_unsupervised(bows: Sequence[BowVector], config: TrainConfig,
                       prior: DirichletPrior | None = None, *, state: TrainState | None = None,
                       heldout=None, callback=None):
    """Minibatch Adam on -ELBO with per-epoch KL annealing.

    Returns ``(params, history)``.  Passing a ``state`` resumes from its
    completed-epoch counter.
    """
    if not bows:
        raise ValueError("empty training corpus")
    prior = prior or config.prior()
    state = state or new_state(bows[0].dim, config)
    _fit(state, bows, config, prior, heldout=heldout, callback=callback)
    return state.params, state.history


def train_joint(pairs: Sequence[tuple[BowVector, BowVector]], unpaired: Sequence[BowVector],
                config: TrainConfig, prior: DirichletPrior | None = None, *,
                state: TrainState | None = None, heldout=None, callback=None):
    """Optimise -ELBO + lam * in-batch matching loss in a single Adam step per batch.

    The unsupervised term covers ``unpaired`` plus both sides of every pair;
    each step also draws a batch of pairs whose loss is scaled by ``config.lam``.
    Returns ``(params, history)``.
    """
    if not pairs:
        raise ValueError("empty paired set")
    if len(pairs) < 2:
        raise ValueError("supervised batch needs >= 2 pairs for in-batch negatives")
    bows = list(unpaired) + [b for p in pairs for b in p]
    prior = prior or config.prior()
    state = state or new_state(bows[0].dim, config)
    _fit(state, bows, config, prior, pairs=list(pairs), lam=config.lam, heldout=heldout,
         callback=callback)
    return state.params, state.history


# --------------------------------------------------------------------------
# checkpoint files

_MAGIC = b"TMCKPT\x00\x01"
FORMAT_VERSION = 1


def save_checkpoint(path, state: TrainState, config: TrainConfig, prior: DirichletPrior,
                    extra: dict | None = None) -> str:
    """Write a checkpoint; returns the model fingerprint.

    ``extra`` entries are stored in the header and returned by ``load_checkpoint``.
    """
    p = state.params
    arrays = p.named_arrays()
    a = state.adam
    for name in sorted(a.m):
        arrays.append((f"adam.m/{name}", a.m[name]))
        arrays.append((f"adam.v/{name}", a.v[name]))
    header = {
        "format_version": FORMAT_VERSION,
        "H": p.H, "K": p.K, "V": p.V,
        "alpha": prior.alpha.tolist(),
        "seed": config.seed,
        "epoch": state.epoch,
        "batch_norm": p.batch_norm,
        "config": asdict(config),
        "adam": {"t": a.t, "lr": a.lr, "beta1": a.beta1, "beta2": a.beta2,
                 "epsilon": a.epsilon},
        "history": state.history,
        "fingerprint": p.fingerprint(),
        "tensors": [[n, list(arr.shape)] for n, arr in arrays],
    }
    for k, v in (extra or {}).items():
        if k in header:
            raise ValueError(f"extra header key {k!r} collides with a reserved field")
        header[k] = v
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return header["fingerprint"]


def load_checkpoint(path):
    """Returns (TrainState, TrainConfig, DirichletPrior, header)."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode())
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        arrays = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated at tensor {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    cfg = TrainConfig(**header["config"])
    tensors = {k: v for k, v in arrays.items() if "running_" not in k and not k.startswith("adam.")}
    running = {k: v for k, v in arrays.items() if "running_" in k}
    params = NvtmParams(header["V"], header["H"], header["K"], tensors, header["batch_norm"],
                        running, bn_momentum=cfg.bn_momentum)
    if params.fingerprint() != header["fingerprint"]:
        raise ValueError(f"{path}: fingerprint mismatch (corrupt checkpoint)")
    ad = header["adam"]
    adam = AdamState(lr=ad["lr"], beta1=ad["beta1"], beta2=ad["beta2"], epsilon=ad["epsilon"],
                     t=ad["t"])
    for k, v in arrays.items():
        if k.startswith("adam.m/"):
            adam.m[k[7:]] = v.copy()
        elif k.startswith("adam.v/"):
            adam.v[k[7:]] = v.copy()
    state = TrainState(params, adam, header["epoch"], list(header.get("history", [])))
    return state, cfg, prior_laplace(np.array(header["alpha"])), header
