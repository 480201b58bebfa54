"""Exact dot-product retrieval over comment embeddings, plus the tf-idf baseline."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import BowVector
from .nvtm import NvtmParams, embed_many


class StaleIndexError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredComment:
    id: str
    score: float
    rank: int


def score(h_a, h_c) -> float:
    """Inner product of two topic representations."""
    h_a = np.asarray(h_a, dtype=np.float64)
    h_c = np.asarray(h_c, dtype=np.float64)
    if h_a.shape != h_c.shape or h_a.ndim != 1:
        raise ValueError(f"dimension mismatch: {h_a.shape} vs {h_c.shape}")
    return float(np.dot(h_a, h_c))


def _id_ranks(ids: Sequence[str]) -> np.ndarray:
    order = sorted(range(len(ids)), key=ids.__getitem__)
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(len(ids))
    return ranks


def rank_scores(scores: np.ndarray, id_rank: np.ndarray, k: int) -> np.ndarray:
    """Row indices of the k best scores, descending, ties by ascending id.

    Exact: every index whose score equals the k-th largest value competes
    on id order.
    """
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((id_rank[cand], -scores[cand]))
    return cand[order[:k]]


def _scored(ids, scores, rows):
    return [ScoredComment(ids[r], float(scores[r]), i + 1) for i, r in enumerate(rows)]


class CommentIndex:
    """Comment embeddings [N x K] stored contiguously, keyed by comment id."""

    def __init__(self, ids: Sequence[str], embeddings: np.ndarray, model_fingerprint: str):
        ids = list(ids)
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValueError(f"duplicate comment id {dup!r}")
        embeddings = np.ascontiguousarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[0] != len(ids):
            raise ValueError(f"embeddings {embeddings.shape} vs {len(ids)} ids")
        self.ids = ids
        self.embeddings = embeddings
        self.model_fingerprint = model_fingerprint
        self._id_rank = _id_ranks(ids)
        self._row = {c: i for i, c in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def K(self):
        return self.embeddings.shape[1]

    def row(self, comment_id: str) -> np.ndarray:
        return self.embeddings[self._row[comment_id]]

    def check(self, params: NvtmParams) -> None:
        if params.fingerprint() != self.model_fingerprint:
            raise StaleIndexError("stale index")

    def scores(self, h_a) -> np.ndarray:
        h_a = np.asarray(h_a, dtype=np.float64)
        if h_a.shape != (self.K,):
            raise ValueError(f"query dim {h_a.shape} vs index K={self.K}")
        return self.embeddings @ h_a

    def save(self, path) -> None:
        header = json.dumps(
            {"N": len(self.ids), "K": self.embeddings.shape[1],
             "model_fingerprint": self.model_fingerprint},
            sort_keys=True,
        ).encode()
        with open(path, "wb") as fh:
            fh.write(b"TMINDEX1")
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for cid in self.ids:
                raw = cid.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(self.embeddings.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "CommentIndex":
        with open(path, "rb") as fh:
            if fh.read(8) != b"TMINDEX1":
                raise ValueError(f"{path}: not an index file")
            (n,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(n))
            ids = []
            for _ in range(header["N"]):
                (m,) = struct.unpack("<I", fh.read(4))
                ids.append(fh.read(m).decode("utf-8"))
            N, K = header["N"], header["K"]
            buf = fh.read(8 * N * K)
            if len(buf) != 8 * N * K:
                raise ValueError(f"{path}: truncated embedding matrix")
            emb = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(N, K)
        return cls(ids, emb, header["model_fingerprint"])


def build_index(ids: Sequence[str], bows: Sequence[BowVector], params: NvtmParams,
                representation: str = "h") -> CommentIndex:
    if len(ids) != len(bows):
        raise ValueError(f"{len(ids)} ids for {len(bows)} bags")
    emb = embed_many(bows, params, representation) if bows else np.zeros((0, params.K))
    return CommentIndex(ids, emb, params.fingerprint())


def top_k(index: CommentIndex, h_a, k: int) -> list[ScoredComment]:
    """Exact maximum-inner-product top-k (brute force)."""
    if len(index) == 0:
        raise ValueError("empty index")
    s = index.scores(h_a)
    return _scored(index.ids, s, rank_scores(s, index._id_rank, k))


# --------------------------------------------------------------------------
# tf-idf baseline


class TfidfIndex:
    """Raw tf x log(N / (1 + df)) weights, L2-normalised rows."""

    def __init__(self, ids: Sequence[str], bows: Sequence[BowVector]):
        if not bows:
            raise ValueError("empty index")
        if len(ids) != len(bows) or len(set(ids)) != len(ids):
            raise ValueError("ids must be unique and match the bags")
        self.ids = list(ids)
        self.dim = bows[0].dim
        n = len(bows)
        indptr = np.zeros(n + 1, dtype=np.int64)
        cols, vals = [], []
        for r, b in enumerate(bows):
            cols.extend(b.ids)
            vals.extend(b.counts)
            indptr[r + 1] = indptr[r] + len(b.ids)
        tf = sp.csr_matrix((np.asarray(vals, dtype=np.float64), np.asarray(cols, dtype=np.int64),
                            indptr), shape=(n, self.dim))
        df = np.bincount(np.asarray(cols, dtype=np.int64), minlength=self.dim)
        self.df = df
        self.idf = np.log(n / (1.0 + df))
        W = tf.multiply(self.idf[None, :]).tocsr()
        self.norms = np.sqrt(np.asarray(W.multiply(W).sum(axis=1)).ravel())
        inv = np.divide(1.0, self.norms, out=np.zeros_like(self.norms), where=self.norms > 0)
        self.unit = sp.diags(inv) @ W
        self._id_rank = _id_ranks(self.ids)
        self._row = {c: i for i, c in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def weights(self, bow: BowVector) -> dict[int, float]:
        return {t: c * float(self.idf[t]) for t, c in zip(bow.ids, bow.counts)}

    def scores(self, query: BowVector, rows=None) -> np.ndarray:
        """Cosine similarity of ``query`` to every (or the selected) stored comment."""
        if query.dim != self.dim:
            raise ValueError(f"query dim {query.dim} vs index dim {self.dim}")
        q = np.zeros(self.dim)
        if query.ids:
            ids = list(query.ids)
            q[ids] = np.asarray(query.counts, dtype=np.float64) * self.idf[ids]
        qn = math.sqrt(float(q @ q))
        mat = self.unit if rows is None else self.unit[rows]
        if qn == 0.0:
            return np.zeros(mat.shape[0])
        # clip rounding so self-similarity is exactly bounded by 1
        return np.minimum(mat @ (q / qn), 1.0)


def tfidf_rank(query: BowVector, index: TfidfIndex, k: int) -> list[ScoredComment]:
    s = index.scores(query)
    return _scored(index.ids, s, rank_scores(s, index._id_rank, k))
