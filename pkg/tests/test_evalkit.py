import math
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dimsel.embstore import EmbeddingMatrix, Qrels, normalize
from dimsel.errors import DegenerateCorrelationError, DimselError
from dimsel.evalkit import (
    SweepResult,
    consistency_analysis,
    k_grid,
    mean_ndcg,
    ndcg_at,
    pairwise_jaccard,
    pearson,
    seed_summary,
    sweep,
    topk_sets,
)
from dimsel.selection import ScoringMethod

labels = st.lists(st.integers(0, 3), min_size=1, max_size=15)


class TestNDCG:
    def test_relevant_first(self):
        assert ndcg_at(["a", "b"], {"a": 1}, 10) == 1.0

    def test_relevant_second(self):
        assert ndcg_at(["b", "a"], {"a": 1}, 10) == pytest.approx(0.6309297535714575, rel=1e-15)
        assert ndcg_at(["b", "a"], {"a": 1}, 10) == pytest.approx(1 / math.log2(3), rel=1e-15)

    def test_relevant_missed(self):
        ranking = [f"x{i}" for i in range(10)] + ["a"]
        assert ndcg_at(ranking, {"a": 2}, 10) == 0.0

    def test_no_relevant_is_excluded(self):
        assert ndcg_at(["a"], {"a": 0}, 10) is None
        m = mean_ndcg({"q1": ["a"], "q2": ["b"]}, Qrels({"q1": {"a": 1}, "q2": {"b": 0}}))
        assert m.mean == 1.0 and m.n_skipped == 1 and m.n_evaluated == 1

    @settings(max_examples=300, deadline=None)
    @given(labels)
    def test_range_and_ideal(self, ys):
        docs = [f"d{i}" for i in range(len(ys))]
        judg = dict(zip(docs, ys))
        v = ndcg_at(docs, judg)
        if not any(ys):
            assert v is None
            return
        assert 0.0 <= v <= 1.0
        ideal = sorted(docs, key=lambda d: -judg[d])
        assert ndcg_at(ideal, judg) == 1.0

    @settings(max_examples=300, deadline=None)
    @given(labels, st.data())
    def test_swap_up_never_hurts(self, ys, data):
        docs = [f"d{i}" for i in range(len(ys))]
        judg = dict(zip(docs, ys))
        rel = [i for i, y in enumerate(ys) if y > 0]
        non = [i for i, y in enumerate(ys) if y == 0]
        if not rel or not non:
            return
        i = data.draw(st.sampled_from(rel))
        above = [j for j in non if j < i]
        if not above:
            return
        j = data.draw(st.sampled_from(above))
        swapped = list(docs)
        swapped[i], swapped[j] = swapped[j], swapped[i]
        assert ndcg_at(swapped, judg) >= ndcg_at(docs, judg)


def half_up_grid(dim):
    out = []
    for pct in range(2, 101, 2):
        k = max(1, int((Decimal(pct) / 100 * dim).quantize(Decimal(1), rounding=ROUND_HALF_UP)))
        if k not in out:
            out.append(k)
    return out


class TestGrid:
    @pytest.mark.parametrize("dim", [1, 3, 10, 25, 64, 256, 768, 1000, 4096])
    def test_matches_decimal_half_up(self, dim):
        assert [k for _, k in k_grid(dim)] == half_up_grid(dim)

    def test_frozen_small(self):
        assert k_grid(25)[:3] == [(0.04, 1), (0.08, 2), (0.12, 3)]
        assert k_grid(16)[-2:] == [(0.96, 15), (1.0, 16)]
        assert len(k_grid(256)) == 50 and k_grid(256)[-1] == (1.0, 256)

    def test_peak_rules(self):
        r = SweepResult("m", 100, [(0.3, 30, 0.5), (0.5, 50, 0.7), (1.0, 100, 0.7)])
        assert SweepResult("m", 100, [(0.3, 30, 0.5), (0.5, 50, 0.8), (1.0, 100, 0.7)]).peak_fraction == 0.5
        assert (r.peak, r.peak_k, r.peak_fraction, r.at_fixed) == (0.7, 100, 1.0, 0.5)
        assert all(r.peak >= v for _, _, v in r.curve)
        assert r.to_csv().splitlines()[0] == "fraction,k,ndcg@10"


def small_retrieval(seed=0, n_docs=300, n_q=20, d=16):
    rng = np.random.default_rng(seed)
    corpus = normalize(EmbeddingMatrix([f"d{i}" for i in range(n_docs)], rng.standard_normal((n_docs, d))))
    q = corpus.data[:n_q] + 0.8 * rng.standard_normal((n_q, d)) / np.sqrt(d)
    queries = normalize(EmbeddingMatrix([f"q{i}" for i in range(n_q)], q))
    qrels = Qrels({f"q{i}": {f"d{i}": 1 + i % 2} for i in range(n_q)} | {"orphan": {"d0": 1}})
    return queries, corpus, qrels


class TestSweep:
    def test_full_is_flat_and_peaks_at_100(self):
        r = sweep(ScoringMethod("full"), *small_retrieval())
        assert len({v for _, _, v in r.curve}) == 1
        assert r.peak_fraction == 1.0 and r.peak_k == 16

    def test_cutoff_at_100_equals_full(self):
        data = small_retrieval(1)
        full = sweep(ScoringMethod("full"), *data)
        cut = sweep(ScoringMethod("cutoff"), *data)
        assert cut.curve[-1][2] == full.peak

    def test_agrees_with_mean_ndcg(self):
        from dimsel.selection import score_batch

        queries, corpus, qrels = small_retrieval(2)
        r = sweep(ScoringMethod("norm"), queries, corpus, qrels, grid=[(0.5, 8)])
        run = score_batch(ScoringMethod("norm", k=8), queries, corpus, depth=10)
        assert r.peak == pytest.approx(mean_ndcg(run, qrels).mean, abs=1e-12)

    def test_skips_unjudged(self):
        queries, corpus, qrels = small_retrieval(3)
        extra = EmbeddingMatrix(queries.ids + ("lonely",), np.vstack([queries.data, queries.data[:1]]))
        r = sweep(ScoringMethod("full"), extra, corpus, qrels)
        assert r.n_queries == 20 and r.n_skipped == 1

    def test_seed_summary(self):
        a = SweepResult("a", 10, [(0.5, 5, 0.2), (1.0, 10, 0.4)])
        b = SweepResult("b", 10, [(0.5, 5, 0.4), (1.0, 10, 0.4)])
        rows = seed_summary([a, b])
        assert rows[0] == (0.5, 5, pytest.approx(0.3), pytest.approx(0.1))
        assert rows[1][3] == 0.0


class TestConsistency:
    def test_affine_relation_gives_unit_pearson(self):
        rng = np.random.default_rng(0)
        imp = rng.standard_normal((30, 20))
        sets = topk_sets(imp, 6).astype(float)
        inter = sets @ sets.T
        jac = inter / (sets.sum(1)[:, None] + sets.sum(1)[None, :] - inter)
        # the Jaccard kernel is PSD, so it factors into vectors whose cosine equals it
        w, v = np.linalg.eigh(jac)
        emb = v * np.sqrt(np.clip(w, 0, None))
        res = consistency_analysis(imp, emb, k=6)
        assert res.pearson >= 0.999
        assert res.self_jaccard == 1.0 and res.n_pairs == 30 * 29 // 2

    def test_constant_outputs_are_degenerate(self):
        imp = np.tile(np.arange(8.0), (5, 1))
        emb = np.random.default_rng(0).standard_normal((5, 8))
        with pytest.raises(DegenerateCorrelationError, match="degenerate correlation"):
            consistency_analysis(imp, emb, k=3)

    def test_disjoint_one_hot(self):
        sets = topk_sets(np.eye(2), 1)
        assert np.count_nonzero(sets[0] & sets[1]) == 0

    def test_needs_two_queries(self):
        with pytest.raises(DimselError):
            consistency_analysis(np.ones((1, 4)), np.ones((1, 4)), k=2)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(3, 30))
    def test_pearson_range_and_affine(self, seed, n):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(n)
        if np.ptp(x) == 0:
            return
        assert -1.0 <= pearson(x, rng.standard_normal(n)) <= 1.0
        assert pearson(x, 2.5 * x + 1) == pytest.approx(1.0, abs=1e-12)
        assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)


class TestPairwiseJaccard:
    def test_shared_vector(self):
        imp = np.tile(np.random.default_rng(0).standard_normal(10), (6, 1))
        assert pairwise_jaccard(imp, 4, n_pairs=100) == 1.0

    def test_full_budget(self):
        imp = np.random.default_rng(1).standard_normal((6, 10))
        assert pairwise_jaccard(imp, 10, n_pairs=100) == 1.0

    def test_deterministic_and_close_to_exhaustive(self):
        imp = np.random.default_rng(2).standard_normal((40, 12))
        a = pairwise_jaccard(imp, 5, n_pairs=20000, seed=3)
        assert a == pairwise_jaccard(imp, 5, n_pairs=20000, seed=3)
        sets = topk_sets(imp, 5)
        i, j = np.triu_indices(40, 1)
        exact = np.mean(np.count_nonzero(sets[i] & sets[j], 1) / np.count_nonzero(sets[i] | sets[j], 1))
        assert a == pytest.approx(exact, abs=0.01)

    def test_errors(self):
        with pytest.raises(DimselError):
            pairwise_jaccard(np.ones((1, 3)), 1)
        with pytest.raises(DimselError):
            pairwise_jaccard(np.ones((3, 3)), 1, n_pairs=0)
