import numpy as np
import pytest

from kgrag.dde import DdeConfig, compute_dde
from kgrag.embed import EmbeddingStore, HashEncoder, build_store
from kgrag.kg import Triple, build_graph
from kgrag.mlp import init_params
from kgrag.scorer import (
    assemble_features,
    graphsage_encode,
    init_sage_layers,
    score_and_select,
    score_candidates,
    select_top_k,
)


def small_world():
    kg = build_graph([("A", "r1", "B"), ("B", "r2", "C"), ("A", "r2", "C")])
    store = build_store(HashEncoder(dim=4), list(kg.entity_texts) + list(kg.relation_texts))
    topics = {kg.entity_id("A")}
    encodings = compute_dde(kg.triples, topics, DdeConfig(rounds=1))
    query = np.arange(4, dtype=np.float64)
    return kg, store, topics, encodings, query


class TestAssembleFeatures:
    def test_dimension_arithmetic(self):
        kg, store, topics, encodings, query = small_world()
        features = assemble_features(query, kg.triples, kg, store, encodings)
        assert features.shape == (3, 4 * 4 + 2 * 3)

    def test_shared_head_shares_segment(self):
        kg, store, topics, encodings, query = small_world()
        features = assemble_features(query, kg.triples, kg, store, encodings)
        d = store.dim
        a_rows = [i for i, t in enumerate(kg.triples) if t.head == kg.entity_id("A")]
        assert len(a_rows) == 2
        np.testing.assert_array_equal(
            features[a_rows[0], d : 2 * d], features[a_rows[1], d : 2 * d]
        )

    def test_permuted_candidates_permute_rows(self):
        kg, store, topics, encodings, query = small_world()
        base = assemble_features(query, kg.triples, kg, store, encodings)
        perm = [2, 0, 1]
        permuted = assemble_features(
            query, [kg.triples[i] for i in perm], kg, store, encodings
        )
        np.testing.assert_array_equal(permuted, base[perm])

    def test_missing_embedding_names_triple(self):
        kg, _, topics, encodings, query = small_world()
        tiny = EmbeddingStore(["A", "B", "r1"], np.ones((3, 4), dtype=np.float32))
        with pytest.raises(KeyError, match="r2"):
            assemble_features(query, kg.triples, kg, tiny, encodings)

    def test_missing_encoding_names_triple(self):
        kg, store, topics, encodings, query = small_world()
        broken = {k: v for k, v in encodings.items() if k != kg.entity_id("C")}
        with pytest.raises(KeyError, match="C"):
            assemble_features(query, kg.triples, kg, store, broken)

    def test_ppr_appends_two_dims(self):
        kg, store, topics, encodings, query = small_world()
        ppr = {e: 0.5 for e in range(kg.entity_count)}
        features = assemble_features(query, kg.triples, kg, store, encodings, ppr=ppr)
        assert features.shape == (3, 4 * 4 + 2 * 3 + 2)
        np.testing.assert_array_equal(features[:, -2:], 0.5)

    def test_entity_override_replaces_head_tail(self):
        kg, store, topics, _, query = small_world()
        override = {e: np.full(4, float(e)) for e in range(kg.entity_count)}
        features = assemble_features(
            query, kg.triples, kg, store, None, entity_override=override
        )
        d = store.dim
        for row, triple in zip(features, kg.triples):
            np.testing.assert_array_equal(row[d : 2 * d], override[triple.head])
            np.testing.assert_array_equal(row[3 * d : 4 * d], override[triple.tail])


class TestTopK:
    def test_tie_broken_by_handle(self):
        triples = [Triple(0, 0, 1), Triple(1, 0, 2), Triple(2, 0, 3)]
        scores = np.array([0.9, 0.5, 0.5])
        top = select_top_k(triples, scores, k=2)
        assert top[0] == (triples[0], 0.9)
        assert top[1] == (triples[1], 0.5)

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(0)
        scores = rng.random(10_000)
        triples = [Triple(i, 0, i + 1) for i in range(10_000)]
        top = select_top_k(triples, scores, k=100)
        oracle = sorted(range(10_000), key=lambda i: (-scores[i], i))[:100]
        assert [t for t, _ in top] == [triples[i] for i in oracle]

    def test_duplicated_scores_deterministic(self):
        rng = np.random.default_rng(1)
        scores = rng.integers(0, 5, size=1000).astype(float) / 5.0
        triples = [Triple(i, 0, i + 1) for i in range(1000)]
        first = select_top_k(triples, scores, k=50)
        second = select_top_k(triples, scores, k=50)
        assert first == second
        handles = [t.head for t, _ in first]
        # Within equal scores, handles ascend.
        for (t1, s1), (t2, s2) in zip(first, first[1:]):
            assert s1 > s2 or (s1 == s2 and t1.head < t2.head)

    def test_k_zero_and_k_beyond(self):
        triples = [Triple(0, 0, 1), Triple(1, 0, 2)]
        scores = np.array([0.1, 0.9])
        assert select_top_k(triples, scores, k=0) == []
        everything = select_top_k(triples, scores, k=10)
        assert [t for t, _ in everything] == [triples[1], triples[0]]

    def test_negative_k_rejected(self):
        with pytest.raises(ValueError):
            select_top_k([], np.zeros(0), k=-1)

    def test_input_order_invariance_with_handles(self):
        rng = np.random.default_rng(2)
        triples = [Triple(i, 0, i + 1) for i in range(50)]
        handles = np.arange(50)
        scores = rng.integers(0, 3, size=50).astype(float)
        base = select_top_k(triples, scores, 10, handles)
        perm = rng.permutation(50)
        permuted = select_top_k(
            [triples[i] for i in perm], scores[perm], 10, handles[perm]
        )
        assert base == permuted


class TestScoring:
    def test_concurrent_scoring_bit_identical(self):
        rng = np.random.default_rng(3)
        params = init_params(12, (8,), seed=0)
        features = rng.standard_normal((20_000, 12))
        sequential = score_candidates(params, features, workers=1)
        concurrent = score_candidates(params, features, workers=4)
        assert sequential.tobytes() == concurrent.tobytes()

    def test_score_and_select_result_shape(self):
        rng = np.random.default_rng(4)
        params = init_params(6, (4,), seed=1)
        triples = [Triple(i, 0, i + 1) for i in range(30)]
        features = rng.standard_normal((30, 6))
        result = score_and_select(params, "q1", triples, features, k=7)
        assert result.sample_id == "q1"
        assert len(result.ranked) == 7
        scores = [s for _, s in result.ranked]
        assert scores == sorted(scores, reverse=True)

    def test_topk_sets_nest_as_k_grows(self):
        rng = np.random.default_rng(5)
        params = init_params(6, (4,), seed=2)
        triples = [Triple(i, 0, i + 1) for i in range(200)]
        features = rng.standard_normal((200, 6))
        previous: set = set()
        for k in (5, 10, 20, 50, 100):
            result = score_and_select(params, "q", triples, features, k=k)
            current = set(result.triples)
            assert previous <= current
            previous = current


class TestGraphSage:
    def test_isolated_entity_uses_zero_aggregate(self):
        layers = init_sage_layers(entity_dim=3, relation_dim=3, layers=1, seed=0)
        entity_embs = {0: np.array([1.0, 2.0, 3.0])}
        out = graphsage_encode([], entity_embs, {}, layers, layers=1)
        (w, b) = layers[0][0]
        expected = np.concatenate([entity_embs[0], np.zeros(3 + 3)]) @ w + b
        np.testing.assert_allclose(out[0], expected, atol=1e-12)

    def test_single_in_edge_aggregate_is_exact(self):
        # Aggregate of one in-edge is [z_neighbour | z_relation] itself.
        entity_embs = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0])}
        relation_embs = {0: np.array([2.0, 3.0])}
        identity_layer = [(np.eye(6), np.zeros(6))]
        out = graphsage_encode(
            [Triple(0, 0, 1)], entity_embs, relation_embs, [identity_layer], layers=1
        )
        np.testing.assert_array_equal(out[1], [0.0, 1.0, 1.0, 0.0, 2.0, 3.0])

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(6)
        kg = build_graph(
            [
                (f"e{rng.integers(10)}", f"r{rng.integers(3)}", f"e{rng.integers(10)}")
                for _ in range(25)
            ]
        )
        d = 5
        entity_embs = {e: rng.standard_normal(d) for e in range(kg.entity_count)}
        relation_embs = {r: rng.standard_normal(d) for r in range(kg.relation_count)}
        layers = init_sage_layers(d, d, layers=1, seed=3)
        out = graphsage_encode(kg.triples, entity_embs, relation_embs, layers, layers=1)
        (w, b) = layers[0][0]
        for e in range(kg.entity_count):
            incoming = [t for t in kg.triples if t.tail == e]
            if incoming:
                agg = np.mean(
                    [np.concatenate([entity_embs[t.head], relation_embs[t.relation]])
                     for t in incoming],
                    axis=0,
                )
            else:
                agg = np.zeros(2 * d)
            expected = np.concatenate([entity_embs[e], agg]) @ w + b
            np.testing.assert_allclose(out[e], expected, atol=1e-9)

    def test_shape_mismatch_raises(self):
        entity_embs = {0: np.ones(3), 1: np.ones(3)}
        bad_layer = [(np.eye(4), np.zeros(4))]  # expects dim 4, gets 3+3+3
        with pytest.raises(ValueError, match="input dim"):
            graphsage_encode(
                [Triple(0, 0, 1)], entity_embs, {0: np.ones(3)}, [bad_layer], layers=1
            )

    def test_layer_count_validated(self):
        with pytest.raises(ValueError):
            graphsage_encode([], {0: np.ones(2)}, {}, [], layers=0)
