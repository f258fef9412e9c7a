import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from querycoop.attention import mask_attention
from querycoop.autodiff import Tensor, default_dtype
from querycoop.decoder import ObjectQuery, PositionalEmbedding, RefRange
from querycoop.fusion import (
    SIMILARITY_MAX,
    SIMILARITY_MIN,
    ObjectQueryGraph,
    QueryAggregator,
    aggregate,
    match,
    refine,
    refine_query,
    select_top,
    similarity,
)
from tests.oracles import pairwise_graphs

RANGE = RefRange((-35.2, 35.2), (-10.0, 10.0), (-3.0, 1.0))


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestRefine:
    def test_zero_embedding_is_identity(self):
        pe = PositionalEmbedding(RANGE, 8, rng=0)
        pe.proj.zero_()
        q = np.random.default_rng(0).normal(size=(4, 8))
        out = refine(Tensor(q), np.zeros((4, 3)), pe)
        np.testing.assert_array_equal(out.data, q.astype(np.float32))

    def test_recomputation_is_bit_exact(self):
        pe = PositionalEmbedding(RANGE, 8, rng=1)
        q = ObjectQuery(np.random.default_rng(1).normal(size=8), np.zeros(3), owner_agent=1)
        r = refine_query(q, [3.0, -2.0, -1.0], pe)
        again = Tensor(q.feature[None]) + pe(Tensor(np.array([[3.0, -2.0, -1.0]])))
        assert r.refined_feature.tobytes() == again.data[0].tobytes()
        np.testing.assert_array_equal(r.base.reference_point, [3.0, -2.0, -1.0])

    def test_co_located_equal_features(self):
        pe = PositionalEmbedding(RANGE, 8, rng=2)
        f = np.ones((2, 8))
        out = refine(Tensor(f), np.array([[1.0, 2.0, -1.0], [1.0, 2.0, -1.0]]), pe)
        np.testing.assert_array_equal(out.data[0], out.data[1])


class TestSimilarity:
    def test_identical(self):
        v = np.array([[1.0, 2.0, -3.0]])
        assert similarity(v, v)[0, 0] == pytest.approx(_sig(1.0))
        assert SIMILARITY_MAX == pytest.approx(0.7311, abs=1e-4)

    def test_antipodal_not_matched(self):
        v = np.array([[1.0, 2.0, -3.0], [-1.0, -2.0, 3.0]])
        sim, graphs = match(v, np.array([0, 1]), mu=0.3)
        assert sim.values[0, 1] == pytest.approx(_sig(-1.0))
        assert SIMILARITY_MIN == pytest.approx(0.2689, abs=1e-4)
        assert len(graphs[0]) == 0 and len(graphs[1]) == 0

    def test_zero_norm(self):
        s = similarity(np.array([[0.0, 0.0], [1.0, 0.0]]))
        assert s[0, 1] == 0.5 and s[0, 0] == 0.5

    def test_symmetric_and_bounded(self):
        v = np.random.default_rng(0).normal(size=(12, 16))
        s = similarity(v)
        np.testing.assert_allclose(s, s.T, atol=1e-6)
        assert (s > SIMILARITY_MIN - 1e-12).all() and (s < SIMILARITY_MAX + 1e-12).all()


class TestMatch:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_pairwise_loop(self, seed):
        rng = np.random.default_rng(seed)
        refined = rng.normal(size=(10, 6))
        owners = np.array([0] * 5 + [1] * 5)
        mu = rng.uniform(0.4, 0.65)
        _, graphs = match(refined, owners, mu)
        assert [g.members.tolist() for g in graphs] == pairwise_graphs(refined, owners, mu)

    def test_every_query_is_a_center(self):
        refined = np.random.default_rng(0).normal(size=(9, 4))
        _, graphs = match(refined, np.repeat([0, 1, 2], 3), 0.3)
        assert [g.center for g in graphs] == list(range(9))

    def test_own_agent_excluded(self):
        refined = np.ones((4, 3))
        _, graphs = match(refined, np.array([0, 0, 1, 1]), 0.3)
        assert graphs[0].members.tolist() == [2, 3]
        assert graphs[2].members.tolist() == [0, 1]

    def test_threshold_above_max_empties(self):
        refined = np.random.default_rng(1).normal(size=(8, 4))
        refined[4:] = refined[:4]
        sim, graphs = match(refined, np.repeat([0, 1], 4), 0.7312)
        assert not sim.mask.any()

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.27, 0.73), st.floats(0.0, 0.2), st.integers(0, 1000))
    def test_monotone_threshold(self, mu, delta, seed):
        refined = np.random.default_rng(seed).normal(size=(8, 5))
        owners = np.repeat([0, 1], 4)
        lo, _ = match(refined, owners, mu)
        hi, _ = match(refined, owners, mu + delta)
        assert not (hi.mask & ~lo.mask).any()


class TestMaskAttention:
    def test_singleton_returns_value(self):
        rng = np.random.default_rng(0)
        q = Tensor(rng.normal(size=(1, 4)))
        k = Tensor(rng.normal(size=(3, 4)))
        v = Tensor(rng.normal(size=(3, 4)))
        out = mask_attention(q, k, v, np.array([[False, True, False]]))
        np.testing.assert_allclose(out.data[0], v.data[1], atol=1e-6)

    def test_three_candidates_by_hand(self):
        with default_dtype(np.float64):
            q = Tensor([[1.0, 0.0]])
            k = Tensor([[2.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [5.0, 5.0]])
            v = Tensor([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [9.0, 9.0]])
            out = mask_attention(q, k, v, np.array([[True, True, True, False]]))
        logits = np.array([2.0, 0.0, -1.0]) / math.sqrt(2)
        w = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(out.data[0], w @ np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]), atol=1e-12)

    def test_all_masked_gives_zeros(self):
        q = Tensor(np.ones((2, 4)))
        out = mask_attention(q, q, q, np.zeros((2, 2), bool), n_heads=2)
        assert not out.data.any()


class TestAggregate:
    def _pool(self, seed=0, n=6, dim=8):
        rng = np.random.default_rng(seed)
        raw = Tensor(rng.normal(size=(n, dim)))
        refined = Tensor(rng.normal(size=(n, dim)))
        return raw, refined

    def test_fully_masked_returns_center(self):
        raw, refined = self._pool()
        agg = QueryAggregator(8, 2, rng=0)
        out = agg(raw, refined, np.zeros((6, 6), bool))
        assert out.data.tobytes() == raw.data.tobytes()
        single = aggregate(ObjectQueryGraph(2, np.array([], np.int64)), raw, refined, agg)
        assert single.data.tobytes() == raw.data[2:3].tobytes()

    def test_masked_candidate_has_no_influence(self):
        raw, refined = self._pool(1)
        agg = QueryAggregator(8, 2, rng=1)
        mask = np.zeros((6, 6), bool)
        mask[0, [3, 4]] = True
        a = agg(raw, refined, mask).data[0]
        raw.data[5] += 10.0
        refined.data[5] -= 3.0
        b = agg(raw, refined, mask).data[0]
        assert a.tobytes() == b.tobytes()

    def test_graph_matches_batched(self):
        raw, refined = self._pool(2)
        agg = QueryAggregator(8, 2, rng=2)
        mask = np.zeros((6, 6), bool)
        mask[1, [0, 5]] = True
        batched = agg(raw, refined, mask).data[1]
        single = aggregate(ObjectQueryGraph(1, np.array([0, 5])), raw, refined, agg).data[0]
        np.testing.assert_allclose(single, batched, atol=1e-6)


class TestSelectTop:
    def test_sorting(self):
        sel = select_top(np.array([0.9, 0.1, 0.5]), np.zeros(3, int), np.arange(3), 2)
        assert sel.tolist() == [0, 2]

    def test_ties_by_agent_then_index(self):
        conf = np.array([0.5, 0.5, 0.5, 0.5])
        owners = np.array([1, 0, 1, 0])
        index = np.array([0, 1, 1, 0])
        assert select_top(conf, owners, index, 4).tolist() == [3, 1, 0, 2]

    def test_fewer_inputs_than_requested(self):
        assert len(select_top(np.array([0.2, 0.3]), np.zeros(2, int), np.arange(2), 5)) == 2
