import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topicmatch.corpus import BowVector
from topicmatch.evaluation import (
    CATEGORIES,
    CORRECT,
    bleu,
    build_candidate_set,
    cider,
    corpus_bleu,
    evaluate_generative,
    evaluate_retrieval,
    lcs_length,
    rank_candidates,
    rank_metrics,
    rouge_l,
)
from topicmatch.retrieval import TfidfIndex

GOLDEN = json.loads((Path(__file__).parent / "golden" / "overlap_metrics.json").read_text())

# --- candidate sets -----------------------------------------------------


def bow(d, V=20):
    ids = tuple(sorted(d))
    return BowVector(ids, tuple(d[i] for i in ids), V)


@pytest.fixture(scope="module")
def pool():
    rng = np.random.default_rng(0)
    ids = [f"C{i:04d}" for i in range(400)]
    bows = [bow({int(t): 1 for t in rng.choice(20, 3, replace=False)}) for _ in ids]
    popularity = {c: int(rng.integers(1, 30)) for c in ids}
    return ids, TfidfIndex(ids, bows), popularity


def make_set(pool, correct, seed=7, **kw):
    ids, index, pop = pool
    return build_candidate_set("A1", bow({0: 1, 1: 2}), correct, ids, index, pop, seed, **kw)


def test_candidate_set_sizes_with_five_correct(pool):
    correct = [f"T{i}" for i in range(5)]
    cs = make_set(pool, correct)
    assert (len(cs.correct), len(cs.plausible), len(cs.popular), len(cs.random)) == (5, 50, 50, 95)
    cs.validate(200)
    groups = [set(cs.correct), set(cs.plausible), set(cs.popular), set(cs.random)]
    assert sum(len(g) for g in groups) == len(set().union(*groups)) == 200


def test_candidate_set_plausible_are_top_tfidf_excluding_correct(pool):
    ids, index, _ = pool
    q = bow({0: 1, 1: 2})
    s = index.scores(q)
    order = sorted(range(len(ids)), key=lambda i: (-s[i], ids[i]))
    top = [ids[i] for i in order]
    correct = top[:3]
    cs = make_set(pool, correct)
    assert cs.plausible == top[3:53]
    assert not set(cs.plausible) & set(correct)


def test_candidate_set_popular_by_count(pool):
    ids, _, pop = pool
    cs = make_set(pool, ["T0"], n_plausible=0)
    want = sorted(ids, key=lambda c: (-pop[c], c))[:50]
    assert cs.popular == want


def test_candidate_set_deterministic_per_seed(pool):
    assert make_set(pool, ["T0"], seed=3) == make_set(pool, ["T0"], seed=3)
    assert make_set(pool, ["T0"], seed=3).random != make_set(pool, ["T0"], seed=4).random


def test_candidate_set_pool_exhausted(pool):
    ids, index, pop = pool
    with pytest.raises(ValueError, match="pool exhausted"):
        build_candidate_set("A", bow({0: 1}), ["T"], ids[:150], TfidfIndex(ids[:150],
                            [bow({0: 1})] * 150), pop, 0)


# --- ranking metrics ----------------------------------------------------


def test_rank_metrics_mrr_example():
    m = rank_metrics([["g", "x", "y", "z"], ["p", "q", "r", "g2", "s"]], [["g"], ["g2"]])
    assert m.mrr == pytest.approx(0.625)
    assert m.recall_at[1] == 0.5 and m.recall_at[5] == 1.0


def test_rank_metrics_single_correct_at_two():
    m = rank_metrics([["x", "g", "y"]], [["g"]])
    assert (m.recall_at[1], m.recall_at[5], m.mrr, m.mr) == (0.0, 1.0, 0.5, 2.0)


def test_rank_metrics_mr_modes():
    rankings = [["a", "g1", "b", "g2"]]
    assert rank_metrics(rankings, [["g1", "g2"]]).mr == 3.0
    assert rank_metrics(rankings, [["g1", "g2"]], mr_mode="best").mr == 2.0
    assert rank_metrics(rankings, [["g1", "g2"]]).mrr == 0.5


def test_rank_metrics_errors():
    with pytest.raises(ValueError):
        rank_metrics([["a", "a"]], [["a"]])
    with pytest.raises(ValueError):
        rank_metrics([["a"]], [["b"]])
    with pytest.raises(ValueError):
        rank_metrics([["a"]], [[]])
    with pytest.raises(ValueError):
        rank_metrics([], [])


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.integers(1, 30), st.integers(1, 5))
def test_rank_metric_ordering_invariants(seed, n_articles, n_correct):
    rng = np.random.default_rng(seed)
    rankings, gold = [], []
    for _ in range(n_articles):
        ids = [f"c{i}" for i in rng.permutation(20)]
        rankings.append(ids)
        gold.append(list(rng.choice(ids, n_correct, replace=False)))
    m = rank_metrics(rankings, gold)
    assert m.recall_at[1] <= m.recall_at[5] <= m.recall_at[10]
    assert m.recall_at[1] <= m.mrr <= 1.0
    assert 1.0 <= m.mr <= 20


def test_random_scorer_matches_analytic_expectation():
    N, trials = 200, 1000
    rng = np.random.default_rng(42)
    ids = [f"c{i:03d}" for i in range(N)]
    rankings = [list(rng.permutation(ids)) for _ in range(trials)]
    m = rank_metrics(rankings, [["c000"]] * trials)
    for k in (1, 5, 10):
        p = k / N
        assert abs(m.recall_at[k] - p) <= 3 * math.sqrt(p * (1 - p) / trials)
    inv = 1.0 / np.arange(1, N + 1)
    assert abs(m.mrr - inv.mean()) <= 3 * inv.std() / math.sqrt(trials)
    ranks = np.arange(1, N + 1)
    assert abs(m.mr - ranks.mean()) <= 3 * ranks.std() / math.sqrt(trials)


def test_rank_candidates_ties_by_id():
    assert rank_candidates(["b", "c", "a"], [1.0, 2.0, 1.0]) == ["c", "a", "b"]
    assert rank_candidates(["b", "c", "a"], [0.0, 0.0, 0.0]) == ["a", "b", "c"]


def test_evaluate_retrieval_oracle_and_constant(pool):
    sets = [make_set(pool, [f"T{j}_{i}" for j in range(2)], seed=i) for i in range(5)]

    def oracle(article_id, cand):
        return np.array([1.0 if c.startswith("T") else 0.0 for c in cand])

    m, hist = evaluate_retrieval(oracle, sets)
    assert m.recall_at[1] == 1.0 and m.mrr == 1.0
    assert hist.counts == {c: (5 if c == CORRECT else 0) for c in CATEGORIES}

    def constant(article_id, cand):
        return np.zeros(len(cand))

    m, hist = evaluate_retrieval(constant, sets)
    for cs in sets:
        assert rank_candidates(cs.all, np.zeros(200))[0] == min(cs.all)
    assert hist.total == 5


# --- BLEU / ROUGE-L / CIDEr ---------------------------------------------


@pytest.mark.parametrize("case", GOLDEN["sentence"], ids=lambda c: " ".join(c["candidate"])[:20])
def test_bleu_rouge_against_golden(case):
    assert bleu(case["candidate"], case["references"]) == pytest.approx(case["bleu"], abs=1e-6)
    assert rouge_l(case["candidate"], case["references"]) == pytest.approx(case["rouge_l"],
                                                                           abs=1e-6)


@pytest.mark.parametrize("corpus", GOLDEN["corpora"], ids=lambda c: f"I={len(c['candidates'])}")
def test_cider_and_corpus_bleu_against_golden(corpus):
    score, per = cider(corpus["candidates"], corpus["references"])
    assert score == pytest.approx(corpus["cider"], abs=1e-4)
    np.testing.assert_allclose(per, corpus["cider_per_instance"], atol=1e-4)
    if "cider_coco" in corpus:
        assert score == pytest.approx(corpus["cider_coco"], abs=1e-4)
    got = corpus_bleu(corpus["candidates"], corpus["references"])
    assert got == pytest.approx(corpus["corpus_bleu"], abs=1e-6)


def test_golden_file_has_enough_cases():
    assert len(GOLDEN["sentence"]) >= 20
    assert sum(len(c["candidates"]) for c in GOLDEN["corpora"]) >= 20


S = "the quick brown fox jumps over the lazy dog".split()


def test_perfect_and_disjoint_are_exact():
    assert bleu(S, [S]) == 1.0
    assert rouge_l(S, [S]) == 1.0
    assert bleu(S, [["a", "b"]]) == 0.0
    assert rouge_l(S, [["a", "b"]]) == 0.0
    sents = [S, ["a", "b", "c", "d"], ["e", "f", "g", "h", "e"]]
    refs = [[x] for x in sents]
    assert cider(sents, refs)[0] == pytest.approx(10.0, abs=1e-12)
    assert cider([["x"], ["y"], ["z"]], refs)[0] == 0.0


def test_cider_short_sentences_lack_high_orders():
    # a 3-token sentence has no 4-grams, so that order contributes 0 even on a verbatim match
    sents = [S, ["e", "f", "g"]]
    _, per = cider(sents, [[x] for x in sents])
    assert per[0] == pytest.approx(10.0, abs=1e-12)
    assert per[1] == pytest.approx(7.5, abs=1e-12)


def test_rouge_l_lcs_example():
    assert lcs_length("abcd", "acd") == 3
    # P = 3/3, R = 3/4
    p, r, b2 = 1.0, 0.75, 1.2
    assert rouge_l(list("acd"), [list("abcd")]) == pytest.approx((1 + b2) * p * r / (r + b2 * p))


def test_empty_outputs_score_zero():
    assert bleu([], [S]) == 0.0
    assert rouge_l([], [S]) == 0.0
    assert cider([[], []], [[S], [S[:3]]])[0] == 0.0


def test_verbatim_reference_generation():
    refs = [[S[:5]], [S[4:]], [S[2:7]]]
    outs = [r[0] for r in refs]
    m = evaluate_generative(outs, refs)
    assert m.bleu == 1.0 and m.rouge_l == 1.0


@settings(max_examples=40)
@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=8),
       st.lists(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=8), min_size=1,
                max_size=4),
       st.randoms(use_true_random=False))
def test_metrics_invariant_to_reference_order(cand, refs, rnd):
    shuffled = refs[:]
    rnd.shuffle(shuffled)
    assert bleu(cand, refs) == bleu(cand, shuffled)
    assert rouge_l(cand, refs) == rouge_l(cand, shuffled)
    other = [["a", "b"], ["f"]]
    a = cider([cand, ["a"]], [refs, other])[1][0]
    b = cider([cand, ["a"]], [shuffled, other])[1][0]
    assert a == pytest.approx(b, abs=1e-12)


@given(st.lists(st.sampled_from("abc"), max_size=8),
       st.lists(st.lists(st.sampled_from("abcd"), min_size=1, max_size=8), min_size=1,
                max_size=3))
def test_metric_ranges(cand, refs):
    assert 0.0 <= bleu(cand, refs) <= 1.0
    assert 0.0 <= rouge_l(cand, refs) <= 1.0 + 1e-12


def test_cider_needs_two_instances():
    with pytest.raises(ValueError):
        cider([S], [[S]])
