"""Documents, vocabulary, bag-of-words vectors and the synthetic topical corpus."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ARTICLE = "article"
COMMENT = "comment"

_WORD_RE = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on Unicode word boundaries; punctuation is dropped."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    id: str
    kind: str
    title: tuple[str, ...] = ()
    body: tuple[str, ...] = ()
    paired_with: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (ARTICLE, COMMENT):
            raise ValueError(f"unknown document kind {self.kind!r}")
        if self.kind == COMMENT and self.paired_with:
            raise ValueError(f"comment {self.id} carries pairings")
        if self.kind == COMMENT and self.title:
            raise ValueError(f"comment {self.id} has a title")

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.title + self.body

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "title": " ".join(self.title),
            "body": " ".join(self.body),
            "paired_with": list(self.paired_with),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Document":
        def _toks(value):
            if isinstance(value, str):
                return tuple(tokenize(value))
            return tuple(str(t) for t in value)

        return cls(
            id=str(rec["id"]),
            kind=rec["kind"],
            title=_toks(rec.get("title", "")),
            body=_toks(rec.get("body", "")),
            paired_with=tuple(rec.get("paired_with", ()) or ()),
        )


def check_unique_ids(docs: Iterable[Document]) -> None:
    seen = set()
    for d in docs:
        if d.id in seen:
            raise ValueError(f"duplicate document id {d.id!r}")
        seen.add(d.id)


def save_corpus(path, docs: Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            fh.write(json.dumps(d.to_record(), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def load_corpus(path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                docs.append(Document.from_record(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
    check_unique_ids(docs)
    return docs


class Vocabulary:
    """Pruned token vocabulary with contiguous ids ordered by frequency."""

    def __init__(self, tokens: Sequence[str], doc_freq: Sequence[int]):
        if len(tokens) != len(doc_freq):
            raise ValueError("tokens and doc_freq differ in length")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")
        self.doc_freq = [int(x) for x in doc_freq]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self):
        return self.size

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return (
            isinstance(other, Vocabulary)
            and self.id_to_token == other.id_to_token
            and self.doc_freq == other.doc_freq
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, (tok, df) in enumerate(zip(self.id_to_token, self.doc_freq)):
                fh.write(f"{tok}\t{i}\t{df}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, dfs = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, idx, df = line.split("\t")
                if int(idx) != len(tokens):
                    raise ValueError(f"{path}: ids not contiguous at line {lineno + 1}")
                tokens.append(tok)
                dfs.append(int(df))
        return cls(tokens, dfs)


def build_vocabulary(docs: Iterable[Document], cap: int = 30000) -> Vocabulary:
    """Keep the `cap` most frequent tokens (ties broken lexicographically)."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    freq: Counter = Counter()
    dfreq: Counter = Counter()
    n_docs = 0
    for d in docs:
        n_docs += 1
        toks = d.tokens
        freq.update(toks)
        dfreq.update(set(toks))
    if n_docs == 0 or not freq:
        raise ValueError("empty corpus")
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    tokens = [t for t, _ in ranked]
    return Vocabulary(tokens, [dfreq[t] for t in tokens])


@dataclass(frozen=True)
class BowVector:
    """Sparse term counts; `ids` strictly increasing, `counts` >= 1."""

    ids: tuple[int, ...]
    counts: tuple[int, ...]
    dim: int

    @property
    def entries(self) -> list[tuple[int, int]]:
        return list(zip(self.ids, self.counts))

    @property
    def total(self) -> int:
        return sum(self.counts)

    def dense(self) -> np.ndarray:
        x = np.zeros(self.dim)
        x[list(self.ids)] = self.counts
        return x


def to_bow(doc: Document | Sequence[str], vocab: Vocabulary) -> BowVector:
    if vocab.size == 0:
        raise ValueError("empty vocabulary")
    tokens = doc.tokens if isinstance(doc, Document) else doc
    lookup = vocab.token_to_id
    counts = Counter(lookup[t] for t in tokens if t in lookup)
    ids = tuple(sorted(counts))
    return BowVector(ids, tuple(counts[i] for i in ids), vocab.size)


def bow_matrix(bows: Sequence[BowVector], dim: int | None = None) -> np.ndarray:
    """Stack bags into a dense float64 count matrix [len(bows) x dim]."""
    if dim is None:
        if not bows:
            raise ValueError("need dim for an empty batch")
        dim = bows[0].dim
    X = np.zeros((len(bows), dim))
    for r, b in enumerate(bows):
        if b.dim != dim:
            raise ValueError(f"bag dim {b.dim} does not match {dim}")
        if b.ids:
            X[r, list(b.ids)] = b.counts
    return X


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    n_topics_true: int = 10
    vocab_article: int = 500
    vocab_comment: int = 500
    n_pairs: int = 2000
    n_unpaired: int = 2000
    doc_length_range: tuple[int, int] = (30, 60)
    topic_concentration: float = 0.1
    seed: int = 0
    # fraction of tokens in unpaired articles drawn from the comment-side
    # partition of the same topic; the only article/comment co-occurrence signal
    cross_talk: float = 0.5
    comments_per_article: int = 1
    title_length: int = 6
    topic_word_noise: float = 0.1
    n_generic: int = 20
    generic_fraction: float = 0.2

    def validate(self) -> None:
        for name in ("n_topics_true", "vocab_article", "vocab_comment", "comments_per_article"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_pairs < 1:
            raise ValueError("empty paired corpus")
        if self.n_unpaired < 0 or self.n_generic < 0 or self.title_length < 0:
            raise ValueError("counts must be nonnegative")
        lo, hi = self.doc_length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad doc_length_range {self.doc_length_range}")
        if self.topic_concentration <= 0:
            raise ValueError("topic_concentration must be positive")
        for name in ("cross_talk", "topic_word_noise", "generic_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if min(self.vocab_article, self.vocab_comment) < self.n_topics_true:
            raise ValueError("degenerate topic vocabularies")


@dataclass
class SyntheticCorpus:
    paired: list[Document]
    unpaired: list[Document]
    truth: dict[str, list[float]] = field(default_factory=dict)


def _topic_word_dists(rng, n_topics, n_words, noise):
    # each topic owns a contiguous block of the partition, plus a uniform floor
    blocks = np.array_split(np.arange(n_words), n_topics)
    phi = np.full((n_topics, n_words), noise / n_words)
    for t, block in enumerate(blocks):
        w = rng.dirichlet(np.ones(len(block)))
        phi[t, block] += (1.0 - noise) * w
    return phi / phi.sum(axis=1, keepdims=True)


def _sample_tokens(rng, theta, phis, weights, length, names):
    """Draw `length` tokens: topic ~ theta, side ~ weights, word ~ phis[side][topic]."""
    topics = rng.choice(len(theta), size=length, p=theta)
    sides = rng.choice(len(phis), size=length, p=weights)
    words = np.empty(length, dtype=np.int64)
    for s in np.unique(sides):
        for z in np.unique(topics[sides == s]):
            sel = (sides == s) & (topics == z)
            words[sel] = rng.choice(phis[s].shape[1], size=int(sel.sum()), p=phis[s][z])
    return tuple(names[s][w] for s, w in zip(sides, words))


def generate_synthetic_corpus(cfg: SynthConfig) -> SyntheticCorpus:
    """Sample paired and unpaired documents from a shared-topic generative story.

    Paired articles and comments use disjoint vocabularies, so any article and
    any comment have zero lexical overlap.  Only unpaired articles mix in
    comment-side words of their topics (``cross_talk``).
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0x5E7])
    K = cfg.n_topics_true
    art_names = [f"a{i:05d}" for i in range(cfg.vocab_article)]
    com_names = [f"c{i:05d}" for i in range(cfg.vocab_comment)]
    names = (art_names, com_names)
    phi_a = _topic_word_dists(rng, K, cfg.vocab_article, cfg.topic_word_noise)
    phi_c = _topic_word_dists(rng, K, cfg.vocab_comment, cfg.topic_word_noise)
    lo, hi = cfg.doc_length_range
    alpha = np.full(K, cfg.topic_concentration)

    n_unp_art = cfg.n_unpaired // 2
    n_generic_copies = int(round(cfg.generic_fraction * (cfg.n_unpaired - n_unp_art)))
    n_unp_com = cfg.n_unpaired - n_unp_art
    n_articles = cfg.n_pairs + n_unp_art
    n_comments = cfg.n_pairs * cfg.comments_per_article + n_unp_com
    # ids carry no information about role or order: ties broken by id act as
    # random tie-breaks downstream
    art_ids = [f"A{i:06d}" for i in rng.permutation(n_articles)]
    com_ids = [f"C{i:06d}" for i in rng.permutation(n_comments)]
    ai = iter(art_ids)
    ci = iter(com_ids)

    truth: dict[str, list[float]] = {}
    paired: list[Document] = []
    for _ in range(cfg.n_pairs):
        theta = rng.dirichlet(alpha)
        title = _sample_tokens(rng, theta, (phi_a,), [1.0], cfg.title_length, names)
        body = _sample_tokens(rng, theta, (phi_a,), [1.0], int(rng.integers(lo, hi + 1)), names)
        cids = [next(ci) for _ in range(cfg.comments_per_article)]
        aid = next(ai)
        paired.append(Document(aid, ARTICLE, title, body, tuple(cids)))
        truth[aid] = theta.tolist()
        for cid in cids:
            toks = _sample_tokens(
                rng, theta, (None, phi_c), [0.0, 1.0], int(rng.integers(lo, hi + 1)), names
            )
            paired.append(Document(cid, COMMENT, (), toks))
            truth[cid] = theta.tolist()

    unpaired: list[Document] = []
    mix = [1.0 - cfg.cross_talk, cfg.cross_talk]
    for _ in range(n_unp_art):
        theta = rng.dirichlet(alpha)
        title = _sample_tokens(rng, theta, (phi_a, phi_c), mix, cfg.title_length, names)
        body = _sample_tokens(
            rng, theta, (phi_a, phi_c), mix, int(rng.integers(lo, hi + 1)), names
        )
        aid = next(ai)
        unpaired.append(Document(aid, ARTICLE, title, body))
        truth[aid] = theta.tolist()

    # short topic-free comments repeated verbatim: the "popular" distractors
    generic = [
        tuple(com_names[j] for j in rng.choice(cfg.vocab_comment, size=int(rng.integers(2, 5))))
        for _ in range(cfg.n_generic)
    ]
    zipf = 1.0 / np.arange(1, cfg.n_generic + 1) if cfg.n_generic else None
    for j in range(n_unp_com):
        cid = next(ci)
        if j < n_generic_copies and cfg.n_generic:
            g = rng.choice(cfg.n_generic, p=zipf / zipf.sum())
            unpaired.append(Document(cid, COMMENT, (), generic[g]))
            truth[cid] = [1.0 / K] * K
            continue
        theta = rng.dirichlet(alpha)
        toks = _sample_tokens(
            rng, theta, (None, phi_c), [0.0, 1.0], int(rng.integers(lo, hi + 1)), names
        )
        unpaired.append(Document(cid, COMMENT, (), toks))
        truth[cid] = theta.tolist()
    return SyntheticCorpus(paired, unpaired, truth)


def split_pairs(paired: Sequence[Document], n_test: int):
    """Split a paired collection into (train docs, test docs) by article, keeping order.

    The last `n_test` articles and their comments form the test side.
    """
    by_id = {d.id: d for d in paired}
    articles = [d for d in paired if d.kind == ARTICLE]
    if n_test >= len(articles):
        raise ValueError(f"n_test={n_test} leaves no training pairs ({len(articles)} articles)")
    test_articles = {a.id for a in articles[len(articles) - n_test:]} if n_test else set()
    test_ids = set(test_articles)
    for a in articles:
        if a.id in test_ids:
            test_ids.update(a.paired_with)
    missing = [c for a in articles for c in a.paired_with if c not in by_id]
    if missing:
        raise ValueError(f"paired comments missing from corpus: {missing[:3]}")
    train = [d for d in paired if d.id not in test_ids]
    test = [d for d in paired if d.id in test_ids]
    return train, test


def save_truth(path, truth: dict[str, list[float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(truth):
            fh.write(json.dumps({"id": k, "mixture": truth[k]}) + "\n")


def corpus_stats(docs: Sequence[Document]) -> dict:
    arts = [d for d in docs if d.kind == ARTICLE]
    coms = [d for d in docs if d.kind == COMMENT]

    def _mean(xs):
        return float(np.mean(xs)) if xs else 0.0

    return {
        "articles": len(arts),
        "comments": len(coms),
        "mean_title_length": _mean([len(d.title) for d in arts]),
        "mean_body_length": _mean([len(d.body) for d in arts]),
        "mean_comment_length": _mean([len(d.body) for d in coms]),
    }


def text_key(doc: Document) -> tuple[str, ...]:
    """Exact-text identity used for popularity counts and deduplication."""
    return doc.tokens


__all__ = [
    "ARTICLE",
    "COMMENT",
    "BowVector",
    "Document",
    "SynthConfig",
    "SyntheticCorpus",
    "Vocabulary",
    "bow_matrix",
    "build_vocabulary",
    "corpus_stats",
    "generate_synthetic_corpus",
    "load_corpus",
    "save_corpus",
    "save_truth",
    "split_pairs",
    "text_key",
    "to_bow",
    "tokenize",
]
