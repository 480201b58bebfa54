"""Candidate-set ranking evaluation and n-gram overlap metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .retrieval import TfidfIndex, _id_ranks, rank_scores

CORRECT, PLAUSIBLE, POPULAR, RANDOM = "Correct", "Plausible", "Popular", "Random"
CATEGORIES = (CORRECT, PLAUSIBLE, POPULAR, RANDOM)


@dataclass
class CandidateSet:
    article_id: str
    correct: list[str]
    plausible: list[str]
    popular: list[str]
    random: list[str]

    @property
    def all(self) -> list[str]:
        return self.correct + self.plausible + self.popular + self.random

    @property
    def labels(self) -> dict[str, str]:
        out = {}
        for cat, ids in zip(CATEGORIES, (self.correct, self.plausible, self.popular, self.random)):
            for i in ids:
                out[i] = cat
        return out

    def validate(self, size: int = 200) -> None:
        ids = self.all
        if len(ids) != size or len(set(ids)) != size:
            raise ValueError(f"candidate set for {self.article_id}: {len(set(ids))} unique of "
                             f"{len(ids)}, expected {size}")


def build_candidate_set(article_id: str, article_bow, correct: Sequence[str], pool_ids: Sequence[str],
                        tfidf_index: TfidfIndex, popularity: Mapping[str, int], rng,
                        size: int = 200, n_plausible: int = 50, n_popular: int = 50,
                        popular_order: Sequence[str] | None = None) -> CandidateSet:
    """Correct + top tf-idf comments + most frequent comments + random fill.

    ``pool_ids`` is the (deduplicated) training comment pool and must be the
    id set of ``tfidf_index``.  ``rng`` is a numpy Generator or an int seed.
    ``popular_order`` may pass the precomputed popularity ranking of the pool.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    correct = list(correct)
    chosen = set(correct)
    if len(chosen) != len(correct):
        raise ValueError("duplicate correct ids")
    if len(correct) + n_plausible + n_popular > size:
        raise ValueError("candidate set too small for its fixed categories")
    pool_set = set(pool_ids)
    available = len(pool_set - chosen)
    if available < size - len(correct):
        raise ValueError(f"pool exhausted: {available} comments for {size - len(correct)} slots")

    plausible: list[str] = []
    if n_plausible:
        s = tfidf_index.scores(article_bow)
        k = min(len(tfidf_index), n_plausible + len(correct))
        for r in rank_scores(s, tfidf_index._id_rank, k):
            cid = tfidf_index.ids[r]
            if cid not in chosen and len(plausible) < n_plausible:
                plausible.append(cid)
        chosen.update(plausible)

    if popular_order is None:
        popular_order = sorted(pool_ids, key=lambda c: (-popularity.get(c, 0), c))
    popular = []
    for cid in popular_order:
        if len(popular) == n_popular:
            break
        if cid not in chosen:
            popular.append(cid)
    chosen.update(popular)

    rest = sorted(pool_set - chosen)
    need = size - len(chosen)
    if need > len(rest):
        raise ValueError("pool exhausted")
    random = [rest[i] for i in rng.choice(len(rest), size=need, replace=False)]
    cs = CandidateSet(article_id, correct, plausible, popular, random)
    cs.validate(size)
    return cs


# --------------------------------------------------------------------------
# ranking metrics


@dataclass
class RankingMetrics:
    recall_at: dict[int, float]
    mr: float
    mrr: float
    n: int = 0

    def as_dict(self) -> dict:
        out = {f"recall@{k}": v for k, v in sorted(self.recall_at.items())}
        out.update({"mr": self.mr, "mrr": self.mrr})
        return out


@dataclass
class ErrorHistogram:
    counts: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CATEGORIES})

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def rank_metrics(rankings: Sequence[Sequence[str]], correct: Sequence[Sequence[str]],
                 ks=(1, 5, 10), mr_mode: str = "mean", candidates=None) -> RankingMetrics:
    """Recall@k, mean rank and mean reciprocal rank of the correct comments.

    Recall@k and MRR use each article's best-ranked correct comment.  MR is
    the mean over articles of the mean rank of all correct comments
    (``mr_mode="best"`` uses the best rank instead).
    """
    if len(rankings) != len(correct):
        raise ValueError("one correct-id list per ranking required")
    if not rankings:
        raise ValueError("no rankings")
    if mr_mode not in ("mean", "best"):
        raise ValueError(f"unknown mr_mode {mr_mode!r}")
    best, mean_rank = [], []
    for i, (ranking, gold) in enumerate(zip(rankings, correct)):
        pos = {cid: r for r, cid in enumerate(ranking, 1)}
        if len(pos) != len(ranking):
            raise ValueError(f"ranking {i} repeats an id")
        if candidates is not None and set(pos) != set(candidates[i]):
            raise ValueError(f"ranking {i} is not a permutation of its candidates")
        if not gold:
            raise ValueError(f"ranking {i} has no correct comments")
        try:
            ranks = [pos[g] for g in gold]
        except KeyError as exc:
            raise ValueError(f"correct id {exc} missing from ranking {i}") from exc
        best.append(min(ranks))
        mean_rank.append(sum(ranks) / len(ranks))
    best = np.asarray(best, dtype=np.float64)
    recall = {k: float(np.mean(best <= k)) for k in ks}
    mr = float(np.mean(best if mr_mode == "best" else mean_rank))
    return RankingMetrics(recall, mr, float(np.mean(1.0 / best)), len(rankings))


def rank_candidates(candidate_ids: Sequence[str], scores) -> list[str]:
    """Order candidates by descending score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(candidate_ids),):
        raise ValueError(f"{scores.shape} scores for {len(candidate_ids)} candidates")
    rows = rank_scores(scores, _id_ranks(candidate_ids), len(candidate_ids))
    return [candidate_ids[r] for r in rows]


Scorer = Callable[[str, Sequence[str]], np.ndarray]


def evaluate_retrieval(scorer: Scorer, candidate_sets: Sequence[CandidateSet], ks=(1, 5, 10),
                       mr_mode: str = "mean"):
    """Rank every candidate set with ``scorer(article_id, candidate_ids)``.

    Returns (RankingMetrics, ErrorHistogram of top-1 categories).
    """
    rankings, gold, hist = [], [], ErrorHistogram()
    for cs in candidate_sets:
        ids = cs.all
        ranking = rank_candidates(ids, scorer(cs.article_id, ids))
        rankings.append(ranking)
        gold.append(cs.correct)
        hist.counts[cs.labels[ranking[0]]] += 1
    return rank_metrics(rankings, gold, ks, mr_mode, [cs.all for cs in candidate_sets]), hist


# --------------------------------------------------------------------------
# BLEU


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _bleu_stats(candidate, references, max_n):
    """Clipped n-gram matches, candidate n-gram totals and closest reference length."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            for g, c in _ngrams(ref, n).items():
                if c > max_ref[g]:
                    max_ref[g] = c
        matches.append(sum(min(c, max_ref[g]) for g, c in cand.items()))
        # denominators floored at 1, as in the usual BLEU implementations
        totals.append(max(1, len(candidate) - n + 1))
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    return matches, totals, c, r


def _bleu_from_stats(matches, totals, c, r):
    if c == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n, (m, t) in enumerate(zip(matches, totals)):
        if n == 0:
            log_p += math.log(m / t)
        else:
            # add-one smoothing for n >= 2
            log_p += math.log((m + 1) / (t + 1))
    log_p /= len(matches)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def bleu(candidate: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Sentence BLEU-4 with brevity penalty and add-one smoothing for n >= 2."""
    if not references:
        raise ValueError("references must be nonempty")
    return _bleu_from_stats(*_bleu_stats(list(candidate), [list(r) for r in references], max_n))


def corpus_bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
                max_n: int = 4) -> float:
    """Corpus BLEU: n-gram statistics and lengths summed before combining."""
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate required")
    M = [0] * max_n
    T = [0] * max_n
    C = R = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("references must be nonempty")
        m, t, c, r = _bleu_stats(list(cand), [list(x) for x in refs], max_n)
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        C += c
        R += r
    return _bleu_from_stats(M, T, C, R)


# --------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], references: Sequence[Sequence[str]],
            beta2: float = 1.2) -> float:
    """LCS F-measure ((1 + b2) P R / (R + b2 P)), maximised over references."""
    if not references:
        raise ValueError("references must be nonempty")
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        if not ref:
            continue
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        best = max(best, (1 + beta2) * p * r / (r + beta2 * p))
    return best


# --------------------------------------------------------------------------
# CIDEr


def _tfidf_ngram_vectors(tokens, n, idf, default_idf):
    counts = _ngrams(tokens, n)
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (c / total) * idf.get(g, default_idf) for g, c in counts.items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    if len(u) > len(v):
        u, v = v, u
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


def cider(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
          max_n: int = 4, scale: float = 10.0):
    """CIDEr: mean over n of average tf-idf n-gram cosine to each reference, x10.

    Document frequency counts instances whose references contain the n-gram;
    idf = log(I / max(1, df)).  Returns (corpus score, per-instance scores).
    """
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate required")
    I = len(candidates)
    if I < 2:
        raise ValueError("CIDEr needs at least 2 evaluation instances")
    logI = math.log(I)
    idfs = []
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for refs in references:
            df.update({g for ref in refs for g in _ngrams(ref, n)})
        idfs.append({g: logI - math.log(max(1, d)) for g, d in df.items()})
    per = []
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("references must be nonempty")
        total = 0.0
        for n in range(1, max_n + 1):
            idf = idfs[n - 1]
            vc = _tfidf_ngram_vectors(cand, n, idf, logI)
            total += sum(_cosine(vc, _tfidf_ngram_vectors(r, n, idf, logI)) for r in refs) / len(refs)
        per.append(scale * total / max_n)
    return float(np.mean(per)), per


# --------------------------------------------------------------------------
# generative evaluation


@dataclass
class OverlapMetrics:
    bleu: float
    rouge_l: float
    cider: float


def evaluate_generative(outputs: Sequence[Sequence[str]],
                        references: Sequence[Sequence[Sequence[str]]]) -> OverlapMetrics:
    """Corpus BLEU, mean ROUGE-L and CIDEr of one output per article."""
    if len(outputs) != len(references):
        raise ValueError("one reference list per output required")
    if not outputs:
        raise ValueError("no outputs")
    b = corpus_bleu(outputs, references)
    r = float(np.mean([rouge_l(o, refs) for o, refs in zip(outputs, references)]))
    c = cider(outputs, references)[0] if len(outputs) >= 2 else 0.0
    return OverlapMetrics(b, r, c)
