import numpy as np
import pytest

from kgrag.embed import (
    EmbeddingStore,
    HashEncoder,
    HttpEncoder,
    build_store,
    cosine_baseline_scores,
    embed_texts,
    store_load,
    store_save,
)
from kgrag.errors import EncoderError, StoreFormatError
from kgrag.kg import build_graph


class TestStoreFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        store = EmbeddingStore(["a", "b", "c"], rng.standard_normal((3, 4)).astype(np.float32))
        path = tmp_path / "s.embs"
        store_save(store, path)
        loaded = store_load(path)
        assert loaded.ids == store.ids
        assert loaded.matrix.tobytes() == store.matrix.tobytes()

    def test_unicode_keys(self, tmp_path):
        store = EmbeddingStore(["café", "ммм"], np.ones((2, 2), dtype=np.float32))
        path = tmp_path / "s.embs"
        store_save(store, path)
        assert store_load(path).ids == ["café", "ммм"]

    def test_empty_store_round_trip(self, tmp_path):
        store = EmbeddingStore([], np.zeros((0, 5), dtype=np.float32))
        path = tmp_path / "s.embs"
        store_save(store, path)
        loaded = store_load(path)
        assert loaded.dim == 5
        assert len(loaded) == 0

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "s.embs"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(StoreFormatError, match="magic"):
            store_load(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "s.embs"
        path.write_bytes(b"EMBS\x02" + bytes(8))
        with pytest.raises(StoreFormatError, match="version"):
            store_load(path)

    def test_truncated_payload(self, tmp_path):
        store = EmbeddingStore(["a"], np.ones((1, 4), dtype=np.float32))
        path = tmp_path / "s.embs"
        store_save(store, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(StoreFormatError):
            store_load(path)

    def test_lookup_missing_key(self):
        store = EmbeddingStore(["a"], np.ones((1, 2), dtype=np.float32))
        with pytest.raises(KeyError, match="zz"):
            store.lookup("zz")


class TestHashEncoder:
    def test_deterministic(self):
        a = HashEncoder(dim=16).encode(["hello world", "rel_03"])
        b = HashEncoder(dim=16).encode(["hello world", "rel_03"])
        np.testing.assert_array_equal(a, b)

    def test_shared_tokens_correlate(self):
        enc = HashEncoder(dim=64)
        q, r, other = enc.encode(
            ["which entity via rel_03", "rel_03", "rel_07"]
        ).astype(np.float64)
        sim_match = q @ r / (np.linalg.norm(q) * np.linalg.norm(r))
        sim_other = q @ other / (np.linalg.norm(q) * np.linalg.norm(other))
        assert sim_match > sim_other + 0.1

    def test_empty_text_is_zero_vector(self):
        vec = HashEncoder(dim=8).encode([""])
        np.testing.assert_array_equal(vec, np.zeros((1, 8), dtype=np.float32))


class TestHttpEncoder:
    def test_single_text(self, mock_service):
        mock_service.routes["/embed"] = lambda body: {
            "embeddings": [[1.0, 2.0, 3.0] for _ in body["texts"]]
        }
        vectors = embed_texts(mock_service.url, ["hello"])
        np.testing.assert_array_equal(vectors, [[1.0, 2.0, 3.0]])

    def test_batching_preserves_order(self, mock_service):
        def route(body):
            return {"embeddings": [[float(len(t))] for t in body["texts"]]}

        mock_service.routes["/embed"] = route
        texts = ["x" * (i % 7 + 1) for i in range(300)]
        vectors = HttpEncoder(mock_service.url, batch_size=128).encode(texts)
        assert len(mock_service.requests) == 3
        np.testing.assert_array_equal(vectors[:, 0], [len(t) for t in texts])

    def test_empty_string_still_gets_vector(self, mock_service):
        mock_service.routes["/embed"] = lambda body: {
            "embeddings": [[0.5] for _ in body["texts"]]
        }
        vectors = embed_texts(mock_service.url, [""])
        assert vectors.shape == (1, 1)

    def test_retries_then_succeeds(self, mock_service):
        mock_service.routes["/embed"] = lambda body: {"embeddings": [[1.0]]}
        mock_service.fail_next(2, status=503)
        encoder = HttpEncoder(mock_service.url, retries=3, backoff=0.0)
        vectors = encoder.encode(["a"])
        assert vectors.shape == (1, 1)
        assert len(mock_service.requests) == 3

    def test_retriable_error_carries_attempts(self, mock_service):
        mock_service.routes["/embed"] = lambda body: {"embeddings": [[1.0]]}
        mock_service.fail_next(5, status=500)
        encoder = HttpEncoder(mock_service.url, retries=2, backoff=0.0)
        with pytest.raises(EncoderError) as info:
            encoder.encode(["a"])
        assert info.value.attempts == 2

    def test_dim_mismatch_across_batches_is_fatal(self, mock_service):
        def route(body):
            width = 3 if body["texts"][0] == "first" else 4
            return {"embeddings": [[0.0] * width for _ in body["texts"]]}

        mock_service.routes["/embed"] = route
        encoder = HttpEncoder(mock_service.url, batch_size=1)
        with pytest.raises(EncoderError, match="dims"):
            encoder.encode(["first", "second"])

    def test_empty_texts_rejected(self, mock_service):
        with pytest.raises(ValueError):
            embed_texts(mock_service.url, [])


class TestCosineBaseline:
    def make_kg_store(self):
        kg = build_graph([("A", "r", "B"), ("B", "r", "C"), ("A", "q", "C")])
        texts = list(kg.entity_texts) + list(kg.relation_texts)
        store = build_store(HashEncoder(dim=32), texts)
        return kg, store

    def test_identical_direction_scores_one(self):
        kg, store = self.make_kg_store()
        triple = kg.triples[0]
        h, r, t = kg.surface(triple)
        mean = (
            store.lookup(h).astype(np.float64)
            + store.lookup(r)
            + store.lookup(t)
        ) / 3
        scores = cosine_baseline_scores(store, mean, [triple], kg)
        assert scores[triple] == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_scores_zero(self):
        kg = build_graph([("A", "r", "B")])
        store = EmbeddingStore(
            ["A", "B", "r"],
            np.array([[1, 0], [1, 0], [1, 0]], dtype=np.float32),
        )
        scores = cosine_baseline_scores(store, np.array([0.0, 1.0]), [kg.triples[0]], kg)
        assert scores[kg.triples[0]] == pytest.approx(0.0, abs=1e-12)

    def test_zero_norm_scores_zero(self):
        kg = build_graph([("A", "r", "B")])
        store = EmbeddingStore(["A", "B", "r"], np.zeros((3, 2), dtype=np.float32))
        scores = cosine_baseline_scores(store, np.array([1.0, 0.0]), [kg.triples[0]], kg)
        assert scores[kg.triples[0]] == 0.0

    def test_ranking_matches_brute_force(self):
        rng = np.random.default_rng(4)
        rows = [(f"e{rng.integers(8)}", f"r{rng.integers(3)}", f"e{rng.integers(8)}") for _ in range(10)]
        kg = build_graph(rows)
        texts = list(kg.entity_texts) + list(kg.relation_texts)
        store = EmbeddingStore(texts, rng.standard_normal((len(texts), 6)).astype(np.float32))
        query = rng.standard_normal(6)
        scores = cosine_baseline_scores(store, query, kg.triples, kg)
        expected = {}
        for triple in kg.triples:
            h, r, t = kg.surface(triple)
            mean = np.mean(
                [store.lookup(k).astype(np.float64) for k in (h, r, t)], axis=0
            )
            expected[triple] = float(
                np.dot(query, mean) / (np.linalg.norm(query) * np.linalg.norm(mean))
            )
        ranked = sorted(scores, key=scores.get)
        ranked_expected = sorted(expected, key=expected.get)
        assert ranked == ranked_expected
        for triple in kg.triples:
            assert scores[triple] == pytest.approx(expected[triple], abs=1e-9)

    def test_invariant_to_query_rescaling(self):
        kg, store = self.make_kg_store()
        query = np.array(HashEncoder(dim=32).encode(["which entity"])[0], dtype=np.float64)
        base = cosine_baseline_scores(store, query, kg.triples, kg)
        scaled = cosine_baseline_scores(store, 7.5 * query, kg.triples, kg)
        for triple in kg.triples:
            assert base[triple] == pytest.approx(scaled[triple], abs=1e-12)

    def test_missing_embedding_names_key(self):
        kg = build_graph([("A", "r", "B")])
        store = EmbeddingStore(["A", "r"], np.ones((2, 2), dtype=np.float32))
        with pytest.raises(KeyError, match="B"):
            cosine_baseline_scores(store, np.ones(2), [kg.triples[0]], kg)
