import numpy as np
import pytest

from kgrag.errors import ParseError
from kgrag.kg import KnowledgeGraph, Triple, build_graph
from kgrag.supervision import (
    import_relevance_labels,
    save_labels,
    shortest_path_labels,
    shortest_path_triples,
)

from conftest import random_graph


def enumerate_shortest_path_triples(kg: KnowledgeGraph, source: int, target: int):
    """Oracle: exhaustively enumerate all minimum-length undirected paths,
    treating each triple as its own traversable edge."""
    if source == target:
        return set()
    # Undirected incidence: entity -> list of (triple, other endpoint)
    incidence = {}
    for t in kg.triples:
        incidence.setdefault(t.head, []).append((t, t.tail))
        if t.tail != t.head:
            incidence.setdefault(t.tail, []).append((t, t.head))

    best = {"length": None}
    on_paths: set[Triple] = set()

    def dfs(node, visited, edges):
        if best["length"] is not None and len(edges) > best["length"]:
            return
        if node == target:
            if best["length"] is None or len(edges) < best["length"]:
                best["length"] = len(edges)
                on_paths.clear()
            if len(edges) == best["length"]:
                on_paths.update(edges)
            return
        for triple, other in incidence.get(node, []):
            if other in visited:
                continue
            dfs(other, visited | {other}, edges + [triple])

    dfs(source, {source}, [])
    return on_paths


class TestShortestPathLabels:
    def test_chain(self, chain_kg):
        a, c = chain_kg.entity_id("A"), chain_kg.entity_id("C")
        assert shortest_path_triples(chain_kg, {a}, {c}) == set(chain_kg.triples)

    def test_topic_equals_answer(self, chain_kg):
        a = chain_kg.entity_id("A")
        assert shortest_path_triples(chain_kg, {a}, {a}) == set()

    def test_diamond_keeps_all_tied_paths(self):
        kg = build_graph(
            [("A", "r", "B"), ("B", "r", "D"), ("A", "r", "C"), ("C", "r", "D")]
        )
        labels = shortest_path_triples(kg, {kg.entity_id("A")}, {kg.entity_id("D")})
        assert labels == set(kg.triples)

    def test_empty_sets(self, chain_kg):
        assert shortest_path_triples(chain_kg, set(), {0}) == set()
        assert shortest_path_triples(chain_kg, {0}, set()) == set()

    def test_unreachable_pair_contributes_nothing(self):
        kg = build_graph([("A", "r", "B"), ("X", "r", "Y")])
        assert shortest_path_triples(kg, {kg.entity_id("A")}, {kg.entity_id("Y")}) == set()

    def test_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(17)
        for _ in range(40):
            kg = random_graph(rng, n_nodes=int(rng.integers(3, 9)), n_edges=12)
            source = int(rng.integers(kg.entity_count))
            target = int(rng.integers(kg.entity_count))
            expected = enumerate_shortest_path_triples(kg, source, target)
            assert shortest_path_triples(kg, {source}, {target}) == expected

    def test_multi_topic_is_union(self):
        kg = build_graph([("A", "r", "X"), ("B", "r", "X")])
        labels = shortest_path_triples(
            kg, {kg.entity_id("A"), kg.entity_id("B")}, {kg.entity_id("X")}
        )
        assert labels == set(kg.triples)

    def test_symmetric_under_topic_permutation(self):
        rng = np.random.default_rng(3)
        kg = random_graph(rng, n_nodes=10, n_edges=25)
        topics = [2, 5]
        answers = {8}
        assert shortest_path_triples(kg, topics, answers) == shortest_path_triples(
            kg, list(reversed(topics)), answers
        )

    def test_invariant_to_triple_file_ordering(self):
        rows = [("A", "r", "B"), ("B", "r", "C"), ("C", "r", "D"), ("A", "q", "C")]
        kg1 = build_graph(rows)
        kg2 = build_graph(list(reversed(rows)))
        labels1 = {
            kg1.surface(t)
            for t in shortest_path_triples(kg1, {kg1.entity_id("A")}, {kg1.entity_id("D")})
        }
        labels2 = {
            kg2.surface(t)
            for t in shortest_path_triples(kg2, {kg2.entity_id("A")}, {kg2.entity_id("D")})
        }
        assert labels1 == labels2

    def test_label_set_wraps_sample_id(self, chain_kg):
        a, c = chain_kg.entity_id("A"), chain_kg.entity_id("C")
        label = shortest_path_labels(chain_kg, "q7", {a}, {c})
        assert label.sample_id == "q7"
        assert label.positive_triples == frozenset(chain_kg.triples)


class TestImportRelevanceLabels:
    def test_resolvable_triples(self, tmp_path, chain_kg):
        path = tmp_path / "labels.jsonl"
        path.write_text(
            '{"id": "q1", "triples": [["A", "r1", "B"], ["B", "r2", "C"]]}\n'
        )
        resolved = import_relevance_labels(path, chain_kg)
        assert resolved == {"q1": set(chain_kg.triples)}

    def test_unresolvable_dropped_and_counted(self, tmp_path, chain_kg, caplog):
        path = tmp_path / "labels.jsonl"
        path.write_text(
            '{"id": "q1", "triples": [["A", "r1", "B"], ["A", "r1", "Nope"]]}\n'
        )
        with caplog.at_level("WARNING"):
            resolved = import_relevance_labels(path, chain_kg)
        assert resolved["q1"] == {chain_kg.triples[0]}
        assert "dropped 1" in caplog.text

    def test_nonexistent_edge_between_known_entities_dropped(self, tmp_path, chain_kg):
        path = tmp_path / "labels.jsonl"
        path.write_text('{"id": "q1", "triples": [["C", "r1", "A"]]}\n')
        assert import_relevance_labels(path, chain_kg) == {"q1": set()}

    def test_empty_triples(self, tmp_path, chain_kg):
        path = tmp_path / "labels.jsonl"
        path.write_text('{"id": "q1", "triples": []}\n')
        assert import_relevance_labels(path, chain_kg) == {"q1": set()}

    def test_malformed_record_names_id(self, tmp_path, chain_kg):
        path = tmp_path / "labels.jsonl"
        path.write_text('{"id": "bad1", "triples": [["A", "r1"]]}\n')
        with pytest.raises(ParseError, match="bad1"):
            import_relevance_labels(path, chain_kg)

    def test_save_then_import_round_trip(self, tmp_path, chain_kg):
        a, c = chain_kg.entity_id("A"), chain_kg.entity_id("C")
        labels = [shortest_path_labels(chain_kg, "q1", {a}, {c})]
        path = tmp_path / "weak.jsonl"
        save_labels(path, labels, chain_kg)
        resolved = import_relevance_labels(path, chain_kg)
        assert resolved == {"q1": set(chain_kg.triples)}