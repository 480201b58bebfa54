"""File-based pipeline steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import corpus as C
from . import evaluation as E
from .config import ConfigError, RunConfig
from .nvtm import (
    TrainState,
    embed_many,
    load_checkpoint,
    new_state,
    save_checkpoint,
    substream,
    train_joint,
    train_unsupervised,
)
from .retrieval import CommentIndex, StaleIndexError, TfidfIndex, build_index, top_k, tfidf_rank

logger = logging.getLogger(__name__)

PAIRED, UNPAIRED, TRUTH = "paired.jsonl", "unpaired.jsonl", "truth.jsonl"
VOCAB, HISTORY, INDEX, REPORT = "vocab.tsv", "history.jsonl", "index.bin", "report.json"


def checkpoint_name(mode: str) -> str:
    return "model.ckpt" if mode == "unsupervised" else f"model-{mode}.ckpt"


def vocab_digest(vocab: C.Vocabulary) -> str:
    h = hashlib.sha256()
    for tok in vocab.id_to_token:
        h.update(tok.encode("utf-8") + b"\n")
    return h.hexdigest()


# --------------------------------------------------------------------------
# synth / vocab


def run_synth(cfg: RunConfig, out_dir=None) -> dict:
    out = Path(out_dir or cfg.paths.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = C.generate_synthetic_corpus(cfg.synth)
    C.save_corpus(out / PAIRED, data.paired)
    C.save_corpus(out / UNPAIRED, data.unpaired)
    C.save_truth(out / TRUTH, data.truth)
    return {"paired": C.corpus_stats(data.paired), "unpaired": C.corpus_stats(data.unpaired)}


@dataclass
class Dataset:
    """Corpus files split into training/test sides for one run configuration."""

    cfg: RunConfig
    train_paired: list
    test_paired: list
    unpaired: list

    @classmethod
    def load(cls, cfg: RunConfig, paired_required: bool = True) -> "Dataset":
        p_path, u_path = cfg.paths.data(PAIRED), cfg.paths.data(UNPAIRED)
        paired = C.load_corpus(p_path) if p_path.exists() else []
        if paired_required and not paired:
            raise ConfigError(f"missing paired corpus {p_path}")
        unpaired = C.load_corpus(u_path) if u_path.exists() else []
        C.check_unique_ids(paired + unpaired)
        if paired:
            train, test = C.split_pairs(paired, cfg.eval.n_test)
        else:
            train, test = [], []
        return cls(cfg, train, test, unpaired)

    @property
    def training_docs(self):
        return self.train_paired + self.unpaired

    @cached_property
    def by_id(self):
        return {d.id: d for d in self.train_paired + self.test_paired + self.unpaired}

    @property
    def test_articles(self):
        return [d for d in self.test_paired if d.kind == C.ARTICLE]

    @cached_property
    def pool(self):
        """Deduplicated training comments: (ids, popularity counts keyed by kept id).

        The first occurrence (corpus order) of each exact text is kept.
        """
        counts: Counter = Counter()
        first: dict = {}
        for d in self.training_docs:
            if d.kind != C.COMMENT:
                continue
            key = C.text_key(d)
            counts[key] += 1
            first.setdefault(key, d.id)
        ids = list(first.values())
        pop = {first[k]: n for k, n in counts.items()}
        return ids, pop


def run_vocab(cfg: RunConfig, out=None) -> C.Vocabulary:
    ds = Dataset.load(cfg, paired_required=False)
    if not ds.training_docs:
        raise ConfigError("empty corpus")
    vocab = C.build_vocabulary(ds.training_docs, cfg.vocab_cap)
    path = Path(out or cfg.paths.out(VOCAB))
    path.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(path)
    return vocab


def load_vocab(cfg: RunConfig) -> C.Vocabulary:
    path = cfg.paths.out(VOCAB)
    if not path.exists():
        raise ConfigError(f"missing vocabulary {path}; run `vocab` first")
    return C.Vocabulary.load(path)


def _check_vocab_matches(cfg: RunConfig, vocab: C.Vocabulary, docs) -> None:
    # rebuilding is cheap next to training and catches any regenerated corpus
    if C.build_vocabulary(docs, cfg.vocab_cap) != vocab:
        raise ConfigError("corpus/vocab mismatch")


# --------------------------------------------------------------------------
# training


def run_train(cfg: RunConfig, mode: str = "unsupervised", out=None, resume: bool = False):
    if mode not in ("unsupervised", "joint"):
        raise ConfigError(f"unknown mode {mode!r}")
    ds = Dataset.load(cfg, paired_required=(mode == "joint"))
    if not ds.training_docs:
        raise ConfigError("empty corpus")
    vocab = load_vocab(cfg)
    _check_vocab_matches(cfg, vocab, ds.training_docs)
    digest = vocab_digest(vocab)
    ckpt = Path(out or cfg.paths.out(checkpoint_name(mode)))
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train
    prior = tcfg.prior()

    if resume and ckpt.exists():
        state, saved_cfg, prior, header = load_checkpoint(ckpt)
        if header.get("vocab_digest") != digest or state.params.V != vocab.size:
            raise ConfigError("corpus/vocab mismatch")
        if header.get("mode") != mode:
            raise ConfigError(f"checkpoint was trained in mode {header.get('mode')!r}")
        logger.info("resuming from epoch %d (step %d)", state.epoch, state.adam.t)
    else:
        state = new_state(vocab.size, tcfg)

    heldout = [C.to_bow(d, vocab) for d in ds.test_paired] or None
    extra = {"mode": mode, "vocab_digest": digest}

    def _save(st: TrainState):
        save_checkpoint(ckpt, st, tcfg, prior, extra)

    if mode == "unsupervised":
        bows = [C.to_bow(d, vocab) for d in ds.training_docs]
        train_unsupervised(bows, tcfg, prior, state=state, heldout=heldout, callback=_save)
    else:
        pairs, sup_ids = supervised_pairs(ds, cfg.n_supervised)
        pair_bows = [(C.to_bow(ds.by_id[a], vocab), C.to_bow(ds.by_id[c], vocab))
                     for a, c in pairs]
        rest = [C.to_bow(d, vocab) for d in ds.training_docs if d.id not in sup_ids]
        train_joint(pair_bows, rest, tcfg, prior, state=state, heldout=heldout, callback=_save)
    _save(state)
    hist_path = ckpt.with_name(ckpt.stem + "." + HISTORY) if out else cfg.paths.out(
        HISTORY if mode == "unsupervised" else f"{mode}.{HISTORY}")
    with open(hist_path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in state.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return state, ckpt


def supervised_pairs(ds: Dataset, n: int):
    """First ``n`` training articles paired with each of their comments."""
    arts = [d for d in ds.train_paired if d.kind == C.ARTICLE][:n]
    if not arts:
        raise ConfigError("empty paired corpus")
    pairs = [(a.id, c) for a in arts for c in a.paired_with]
    used = {a.id for a in arts} | {c for _, c in pairs}
    return pairs, used


# --------------------------------------------------------------------------
# index / retrieve / eval


def run_index(cfg: RunConfig, checkpoint=None, out=None) -> CommentIndex:
    ckpt = Path(checkpoint or cfg.paths.out(checkpoint_name("unsupervised")))
    state, tcfg, _, header = _load_model(cfg, ckpt)
    ds = Dataset.load(cfg, paired_required=False)
    vocab = load_vocab(cfg)
    ids, _ = ds.pool
    index = build_index(ids, [C.to_bow(ds.by_id[i], vocab) for i in ids], state.params,
                        tcfg.representation)
    path = Path(out or cfg.paths.out(INDEX))
    path.parent.mkdir(parents=True, exist_ok=True)
    index.save(path)
    return index


def _load_model(cfg: RunConfig, ckpt: Path):
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}; run `train` first")
    state, tcfg, prior, header = load_checkpoint(ckpt)
    vocab = load_vocab(cfg)
    if header.get("vocab_digest") not in (None, vocab_digest(vocab)):
        raise ConfigError("corpus/vocab mismatch")
    return state, tcfg, prior, header


def _load_index(cfg: RunConfig, index_path, params) -> CommentIndex:
    path = Path(index_path or cfg.paths.out(INDEX))
    if not path.exists():
        raise ConfigError(f"missing index {path}; run `index` first")
    index = CommentIndex.load(path)
    index.check(params)
    return index


class Scorers:
    """Lazily built nvtm / tf-idf scoring functions over a dataset."""

    def __init__(self, cfg: RunConfig, ds: Dataset, vocab, checkpoint=None, index_path=None):
        self.cfg, self.ds, self.vocab = cfg, ds, vocab
        self.checkpoint = Path(checkpoint or cfg.paths.out(checkpoint_name("unsupervised")))
        self.index_path = index_path
        self._bows = {}

    def bow(self, doc_id):
        b = self._bows.get(doc_id)
        if b is None:
            b = self._bows[doc_id] = C.to_bow(self.ds.by_id[doc_id], self.vocab)
        return b

    @cached_property
    def model(self):
        state, tcfg, _, _ = _load_model(self.cfg, self.checkpoint)
        return state.params, tcfg.representation

    @cached_property
    def index(self) -> CommentIndex:
        return _load_index(self.cfg, self.index_path, self.model[0])

    @cached_property
    def tfidf(self) -> TfidfIndex:
        ids, _ = self.ds.pool
        return TfidfIndex(ids, [self.bow(i) for i in ids])

    def embeddings(self, ids):
        params, rep = self.model
        return embed_many([self.bow(i) for i in ids], params, rep)

    def nvtm_scorer(self, candidate_sets):
        """Scorer over every id appearing in the candidate sets or test articles."""
        ids = sorted({i for cs in candidate_sets for i in cs.all}
                     | {cs.article_id for cs in candidate_sets})
        emb = self.embeddings(ids)
        row = {i: r for r, i in enumerate(ids)}

        def scorer(article_id, cand):
            return emb[[row[c] for c in cand]] @ emb[row[article_id]]

        return scorer

    def tfidf_scorer(self, candidate_sets):
        # idf comes from the training pool, not the candidate subset
        idf = self.tfidf.idf

        def scorer(article_id, cand):
            return cosine_rows(self.bow(article_id), [self.bow(c) for c in cand], idf)

        return scorer

    def retrieve(self, scorer: str, article_id: str, k: int):
        if scorer == "nvtm":
            params, rep = self.model
            h = embed_many([self.bow(article_id)], params, rep)[0]
            return top_k(self.index, h, k)
        if scorer == "tfidf":
            return tfidf_rank(self.bow(article_id), self.tfidf, k)
        raise ConfigError(f"unknown scorer {scorer!r}")


def cosine_rows(query, bows, idf) -> np.ndarray:
    """tf-idf cosine of one query bag against a list of bags under fixed idf."""
    def vec(b):
        return {t: c * idf[t] for t, c in zip(b.ids, b.counts)}

    q = vec(query)
    qn = np.sqrt(sum(v * v for v in q.values()))
    out = np.zeros(len(bows))
    if qn == 0:
        return out
    for i, b in enumerate(bows):
        d = vec(b)
        dn = np.sqrt(sum(v * v for v in d.values()))
        if dn:
            out[i] = min(1.0, sum(q.get(t, 0.0) * v for t, v in d.items()) / (qn * dn))
    return out


def build_candidate_sets(cfg: RunConfig, ds: Dataset, scorers: Scorers):
    ids, pop = ds.pool
    ecfg = cfg.eval
    order = sorted(ids, key=lambda c: (-pop.get(c, 0), c))
    sets = []
    for n, art in enumerate(ds.test_articles):
        rng = substream(cfg.eval_seed, "eval", n)
        sets.append(E.build_candidate_set(
            art.id, scorers.bow(art.id), list(art.paired_with), ids, scorers.tfidf, pop, rng,
            ecfg.candidate_size, ecfg.n_plausible, ecfg.n_popular, popular_order=order))
    return sets


def run_eval(cfg: RunConfig, scorer_names=None, checkpoint=None, index_path=None,
             out=None) -> dict:
    ds = Dataset.load(cfg)
    vocab = load_vocab(cfg)
    sc = Scorers(cfg, ds, vocab, checkpoint, index_path)
    names = list(scorer_names or cfg.eval.scorers)
    sets = build_candidate_sets(cfg, ds, sc)
    refs = [[list(ds.by_id[c].tokens) for c in a.paired_with[:cfg.eval.n_references]]
            for a in ds.test_articles]
    records = []
    for name in names:
        if name == "nvtm":
            fn = sc.nvtm_scorer(sets)
        elif name == "tfidf":
            fn = sc.tfidf_scorer(sets)
        else:
            raise ConfigError(f"unknown scorer {name!r}")
        metrics, hist = E.evaluate_retrieval(fn, sets, cfg.eval.ks, cfg.eval.mr_mode)
        outputs = [list(ds.by_id[sc.retrieve(name, a.id, 1)[0].id].tokens)
                   for a in ds.test_articles]
        gen = E.evaluate_generative(outputs, refs)
        rec = {"model_name": name, **metrics.as_dict(), "bleu": gen.bleu,
               "rouge_l": gen.rouge_l, "cider": gen.cider, "error_histogram": hist.counts,
               "n_articles": metrics.n}
        records.append(rec)
    report = {"records": records}
    path = Path(out or cfg.paths.out(REPORT))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


__all__ = ["Dataset", "Scorers", "StaleIndexError", "run_eval", "run_index", "run_synth",
           "run_train", "run_vocab"]
