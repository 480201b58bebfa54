"""End-to-end acceptance checks on the desk-scale configuration.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import flat_elbo_objective, perturbed_params, random_bows
from topicmatch import evaluation as E
from topicmatch import pipeline as P
from topicmatch.config import load_config
from topicmatch.corpus import bow_matrix
from topicmatch.numerics import grad_check
from topicmatch.nvtm import (
    embed_many,
    gaussian_kl,
    load_checkpoint,
    prior_laplace,
    save_checkpoint,
    symmetric_prior,
)
from topicmatch.retrieval import CommentIndex, top_k

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "acceptance.yaml"
SEEDS = (0, 1, 2)


def acceptance_config(root: Path, seed: int):
    cfg = load_config(CONFIG, seed=seed)
    cfg.paths.data_dir = str(root / "data")
    cfg.paths.out_dir = str(root / "run")
    return cfg


def run_pipeline(cfg, joint=False):
    t = time.perf_counter()
    P.run_synth(cfg)
    P.run_vocab(cfg)
    state, ckpt = P.run_train(cfg, "unsupervised")
    train_time = time.perf_counter() - t
    P.run_index(cfg)
    report = P.run_eval(cfg)
    out = {"cfg": cfg, "state": state, "ckpt": ckpt, "report": report, "train_time": train_time}
    if joint:
        jstate, jckpt = P.run_train(cfg, "joint")
        jindex = cfg.paths.out("index-joint.bin")
        P.run_index(cfg, jckpt, jindex)
        out["joint_report"] = P.run_eval(cfg, ["nvtm"], jckpt, jindex,
                                         cfg.paths.out("report-joint.json"))
        out["joint_state"] = jstate
    return out


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return {s: run_pipeline(acceptance_config(tmp_path_factory.mktemp(f"seed{s}"), s),
                            joint=(s == 0))
            for s in SEEDS}


def record(report, name):
    return next(r for r in report["records"] if r["model_name"] == name)


# --------------------------------------------------------------------------


@pytest.mark.criterion(1, "full-ELBO gradient check (V=50, H=16, K=8, B=4)")
def test_c1_elbo_gradient_check(detail):
    rng = np.random.default_rng(2024)
    V, H, K, B = 50, 16, 8, 4
    params = perturbed_params(V, H, K, seed=7)
    X = bow_matrix(random_bows(rng, B, V))
    eps = rng.standard_normal((B, K))
    t = time.perf_counter()
    f, x0 = flat_elbo_objective(params, X, symmetric_prior(K), eps, kl_weight=1.0)
    err = grad_check(f, x0)
    elapsed = time.perf_counter() - t
    detail(f"max rel err {err:.2e} over {x0.size} coords in {elapsed:.1f}s")
    assert err < 1e-4
    assert elapsed < 10


@pytest.mark.criterion(2, "KL nonnegative, zero at the prior, Laplace values")
def test_c2_kl_and_prior(detail):
    rng = np.random.default_rng(0)
    worst = math.inf
    for K in (2, 4, 10, 50):
        prior = symmetric_prior(K)
        for _ in range(1000 // 4):
            mu = rng.normal(0, 2, K)
            lv = rng.uniform(-10, 10, K)
            worst = min(worst, float(gaussian_kl(mu, lv, prior.mu0, prior.sigma0)))
        assert abs(gaussian_kl(prior.mu0, np.log(prior.sigma0), prior.mu0, prior.sigma0)) < 1e-9
    assert worst >= -1e-9
    p2 = prior_laplace([1.0, 1.0])
    p4 = symmetric_prior(4)
    np.testing.assert_allclose(p2.sigma0, [0.5, 0.5], rtol=0, atol=1e-12)
    np.testing.assert_allclose(p2.mu0, [0.0, 0.0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(p4.sigma0, [3.0] * 4, rtol=0, atol=1e-12)
    detail(f"min KL {worst:.3g} over 1000 draws")


@pytest.mark.criterion(3, "held-out ELBO improves from epoch 2 to the final epoch")
def test_c3_training_sanity(runs, detail):
    run = runs[0]
    hist = run["state"].history
    assert len(hist) == 20
    second, final = hist[1]["heldout_elbo"], hist[-1]["heldout_elbo"]
    detail(f"held-out ELBO {second:.2f} -> {final:.2f}; train {run['train_time']:.0f}s")
    assert final > second
    assert run["train_time"] < 600


@pytest.mark.criterion(4, "NVTM beats TF-IDF on 200-candidate sets (>= 2 of 3 seeds)")
def test_c4_nvtm_vs_tfidf(runs, detail):
    passes, notes = 0, []
    for s in SEEDS:
        rep = runs[s]["report"]
        n, t = record(rep, "nvtm"), record(rep, "tfidf")
        ok = (n["recall@1"] >= 2 * t["recall@1"] and n["recall@5"] >= 0.5
              and t["recall@5"] <= 0.15 and n["n_articles"] == 200)
        passes += ok
        notes.append(f"seed {s}: nvtm R@1 {n['recall@1']:.3f} R@5 {n['recall@5']:.3f}, "
                     f"tfidf R@1 {t['recall@1']:.3f} R@5 {t['recall@5']:.3f}")
    detail(" | ".join(notes))
    assert passes >= 2


@pytest.mark.criterion(5, "joint training adds >= 0.05 Recall@1 over unsupervised")
def test_c5_joint_gain(runs, detail):
    run = runs[0]
    base = record(run["report"], "nvtm")["recall@1"]
    joint = record(run["joint_report"], "nvtm")["recall@1"]
    detail(f"R@1 {base:.3f} -> {joint:.3f} (+{joint - base:.3f}), 500 pairs")
    assert joint - base >= 0.05


@pytest.mark.criterion(6, "BLEU / ROUGE-L / CIDEr match independent golden values")
def test_c6_overlap_metrics_golden(detail):
    import json

    golden = json.loads((Path(__file__).parent / "golden" / "overlap_metrics.json").read_text())
    worst = {"bleu": 0.0, "rouge_l": 0.0, "cider": 0.0}
    for c in golden["sentence"]:
        worst["bleu"] = max(worst["bleu"], abs(E.bleu(c["candidate"], c["references"]) - c["bleu"]))
        worst["rouge_l"] = max(worst["rouge_l"],
                               abs(E.rouge_l(c["candidate"], c["references"]) - c["rouge_l"]))
    n_cider = 0
    for corpus in golden["corpora"]:
        _, per = E.cider(corpus["candidates"], corpus["references"])
        n_cider += len(per)
        worst["cider"] = max(worst["cider"], max(abs(a - b) for a, b in
                                                 zip(per, corpus["cider_per_instance"])))
    assert len(golden["sentence"]) >= 20 and n_cider >= 20
    assert worst["bleu"] < 1e-6 and worst["rouge_l"] < 1e-6 and worst["cider"] < 1e-4
    s = "a man rides a brown horse".split()
    t = "two dogs play".split() + ["in", "snow"]
    assert E.bleu(s, [s]) == 1.0 and E.rouge_l(s, [s]) == 1.0
    assert E.cider([s, t], [[s], [t]])[0] == pytest.approx(10.0, abs=1e-12)
    assert E.bleu(s, [t]) == 0.0 and E.rouge_l(s, [t]) == 0.0
    assert E.cider([s, t], [[t], [s]])[0] == 0.0
    detail(f"{len(golden['sentence'])} sentence cases, {n_cider} CIDEr instances, worst "
           + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


@pytest.mark.criterion(7, "ranking-metric ordering and random-scorer expectations")
def test_c7_metric_invariants(runs, detail):
    for s in SEEDS:
        for rep in [runs[s]["report"]] + ([runs[s]["joint_report"]] if s == 0 else []):
            for r in rep["records"]:
                assert r["recall@1"] <= r["recall@5"] <= r["recall@10"]
                assert r["recall@1"] <= r["mrr"] <= 1.0
    cfg = runs[0]["cfg"]
    ds = P.Dataset.load(cfg)
    sets = P.build_candidate_sets(cfg, ds, P.Scorers(cfg, ds, P.load_vocab(cfg)))
    rng = np.random.default_rng(123)

    def random_scorer(article_id, cand):
        return rng.random(len(cand))

    trials = 5
    m, _ = E.evaluate_retrieval(random_scorer, sets * trials)
    n = len(sets) * trials
    # analytic expectation of best-rank metrics for c correct among N candidates
    N = 200
    ranks = np.arange(1, N + 1)
    devs = []
    for k, got in m.recall_at.items():
        ps = [1 - math.comb(N - len(cs.correct), k) / math.comb(N, k) for cs in sets]
        mean = float(np.mean(ps))
        sd = math.sqrt(np.mean([p * (1 - p) for p in ps]) / n)
        devs.append(abs(got - mean) / sd)
        assert abs(got - mean) <= 3 * sd
    pmf = [np.array([math.comb(N - r, len(cs.correct) - 1) for r in ranks], dtype=float)
           for cs in sets]
    pmf = [p / p.sum() for p in pmf]
    e_rr = float(np.mean([(p / ranks).sum() for p in pmf]))
    v_rr = float(np.mean([(p / ranks**2).sum() - (p / ranks).sum() ** 2 for p in pmf]))
    assert abs(m.mrr - e_rr) <= 3 * math.sqrt(v_rr / n)
    detail(f"{n} random rankings, worst recall deviation {max(devs):.2f} sd, "
           f"MRR {m.mrr:.4f} vs {e_rr:.4f}")


@pytest.mark.criterion(8, "top_k agrees with a full-sort oracle, ties included")
def test_c8_top_k_oracle(detail):
    rng = np.random.default_rng(8)
    ties = 0
    for _ in range(100):
        N, K = 200, 8
        ids = [f"C{j:05d}" for j in rng.permutation(10 * N)[:N]]
        emb = rng.integers(-1, 2, size=(N, K)).astype(float)
        q = rng.integers(-1, 2, size=K).astype(float)
        s = emb @ q
        ties += len(s) - len(set(s.tolist()))
        got = [r.id for r in top_k(CommentIndex(ids, emb, "x"), q, 10)]
        want = [ids[i] for i in sorted(range(N), key=lambda i: (-s[i], ids[i]))[:10]]
        assert got == want
    detail(f"100 instances, {ties} tied scores")


@pytest.mark.criterion(9, "rerun gives byte-identical report; checkpoint round-trip bitwise")
def test_c9_determinism(runs, tmp_path, detail):
    first = runs[0]
    cfg = acceptance_config(tmp_path, 0)
    again = run_pipeline(cfg)
    a = Path(first["cfg"].paths.out(P.REPORT)).read_bytes()
    b = Path(cfg.paths.out(P.REPORT)).read_bytes()
    assert a == b
    assert first["state"].params.fingerprint() == again["state"].params.fingerprint()

    state, tcfg, prior, header = load_checkpoint(first["ckpt"])
    assert state.params.equal(first["state"].params)
    ds = P.Dataset.load(cfg)
    vocab = P.load_vocab(cfg)
    from topicmatch.corpus import to_bow

    bows = [to_bow(d, vocab) for d in ds.test_paired]
    assert (embed_many(bows, state.params).tobytes()
            == embed_many(bows, first["state"].params).tobytes())
    resaved = tmp_path / "resaved.ckpt"
    save_checkpoint(resaved, state, tcfg, prior, {k: header[k] for k in ("mode", "vocab_digest")})
    assert resaved.read_bytes() == Path(first["ckpt"]).read_bytes()
    detail(f"report byte-equal ({len(a)} bytes); checkpoint resave byte-identical")


@pytest.mark.criterion(10, "every candidate set has 200 unique ids in disjoint categories")
def test_c10_candidate_sets(runs, detail):
    total = 0
    for s in SEEDS:
        cfg = runs[s]["cfg"]
        ds = P.Dataset.load(cfg)
        sets = P.build_candidate_sets(cfg, ds, P.Scorers(cfg, ds, P.load_vocab(cfg)))
        assert len(sets) == 200
        for cs in sets:
            groups = [cs.correct, cs.plausible, cs.popular, cs.random]
            flat = [i for g in groups for i in g]
            assert len(flat) == len(set(flat)) == 200
            assert all(len(g) == len(set(g)) for g in groups)
            assert cs.correct == list(ds.by_id[cs.article_id].paired_with)
            total += 1
    detail(f"{total} candidate sets checked")


def test_paired_cosine_exceeds_random_pairs(runs):
    from topicmatch.corpus import to_bow

    cfg = runs[0]["cfg"]
    ds = P.Dataset.load(cfg)
    vocab = P.load_vocab(cfg)
    params = runs[0]["state"].params
    arts = ds.test_articles
    A = embed_many([to_bow(a, vocab) for a in arts], params)
    C = embed_many([to_bow(ds.by_id[a.paired_with[0]], vocab) for a in arts], params)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    C /= np.linalg.norm(C, axis=1, keepdims=True)
    paired = float(np.mean(np.sum(A * C, axis=1)))
    mixed = float(np.mean(A @ C.T))
    assert paired > mixed
