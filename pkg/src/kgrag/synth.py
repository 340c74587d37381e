"""Deterministic synthetic KG and question generator.

The graph is layered: every edge points from layer i to layer i+1, so a
pair (u in layer s, v in layer s+h) sits at undirected distance exactly h
whenever any connecting chain exists, and the tied shortest paths are
exactly the ascending chains between them. Questions are sampled from the
pairs connected by exactly one chain, making that chain the unique
shortest-path evidence that weak supervision must recover.

Relation surfaces appear verbatim in the question text, giving token-hash
embeddings a learnable semantic signal; the same relation vocabulary is
reused across unrelated edges so relation matching alone cannot identify
the evidence.
"""
from __future__ import annotations

import collections
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError
from .kg import save_triples

Edge = tuple[int, int, int]  # head, relation, tail


@dataclass(frozen=True)
class SyntheticKgSpec:
    entity_count: int = 200
    relation_count: int = 24
    layer_count: int = 4
    total_edges: int = 550
    train_questions: int = 600
    test_questions: int = 100
    template_mix: dict[int, float] = field(
        default_factory=lambda: {1: 0.25, 2: 0.45, 3: 0.30}
    )
    signature_limit: int = 3
    seed: int = 7

    def __post_init__(self):
        if self.entity_count < 2 * self.layer_count or self.relation_count < 1:
            raise ValueError("spec too small to host planted paths")
        if abs(sum(self.template_mix.values()) - 1.0) > 1e-9:
            raise ValueError("template_mix must sum to 1")
        if min(self.template_mix) < 1:
            raise ValueError("hop counts must be >= 1")
        if max(self.template_mix) > self.layer_count - 1:
            raise GenerationError(
                f"{max(self.template_mix)}-hop patterns need more layers than "
                f"the {self.layer_count}-layer graph provides"
            )


@dataclass(frozen=True)
class _Question:
    qid: str
    hops: int
    topic: int
    answer: int
    path: tuple[Edge, ...]


def _hop_counts(total: int, mix: dict[int, float]) -> dict[int, int]:
    """Largest-remainder apportionment of `total` questions over hop counts."""
    hops = sorted(mix)
    exact = [total * mix[h] for h in hops]
    counts = [int(x) for x in exact]
    remainder = total - sum(counts)
    by_frac = sorted(
        range(len(hops)), key=lambda i: (exact[i] - counts[i], -hops[i]), reverse=True
    )
    for i in by_frac[:remainder]:
        counts[i] += 1
    return dict(zip(hops, counts))


def _question_text(relation_texts: list[str]) -> str:
    """Questions name the relation signature only; topic entities are given
    separately, mirroring datasets with pre-linked topics."""
    if len(relation_texts) == 1:
        return f"Which entity is reached via {relation_texts[0]}?"
    chain = ", then ".join(relation_texts)
    return f"Which entity is reached via {chain}?"


class SyntheticGenerator:
    def __init__(self, spec: SyntheticKgSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.entity_texts = [f"ent_{i:03d}" for i in range(spec.entity_count)]
        self.relation_texts = [f"rel_{i:02d}" for i in range(spec.relation_count)]
        self.layers = self._split_layers()
        self.edges: list[Edge] = []
        self._adjacency: list[np.ndarray] = []
        self._edge_relation: dict[tuple[int, int], int] = {}

    def _split_layers(self) -> list[np.ndarray]:
        base = self.spec.entity_count // self.spec.layer_count
        remainder = self.spec.entity_count % self.spec.layer_count
        sizes = [base + (1 if i < remainder else 0) for i in range(self.spec.layer_count)]
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        return [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

    def _edge_budget(self) -> list[int]:
        """Even split over layer pairs; the density keeps chain collisions
        rare so unique-path pairs stay plentiful."""
        pairs = self.spec.layer_count - 1
        base = self.spec.total_edges // pairs
        budget = [base] * pairs
        budget[0] += self.spec.total_edges - sum(budget)
        return budget

    def _relation_bands(self) -> list[np.ndarray]:
        """Relations are typed per layer pair (domain/range constraints), so
        a relation identifies its position along any chain using it."""
        pairs = self.spec.layer_count - 1
        base = self.spec.relation_count // pairs
        remainder = self.spec.relation_count % pairs
        sizes = [base + (1 if i < remainder else 0) for i in range(pairs)]
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        return [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

    def _sample_edges(self) -> None:
        bands = self._relation_bands()
        for pair_idx, edge_count in enumerate(self._edge_budget()):
            lower, upper = self.layers[pair_idx], self.layers[pair_idx + 1]
            band = bands[pair_idx]
            if len(band) == 0:
                raise GenerationError("need at least one relation per layer pair")
            n_pairs = len(lower) * len(upper)
            if edge_count > n_pairs:
                raise GenerationError(
                    f"layer pair {pair_idx}: {edge_count} edges exceed {n_pairs} slots"
                )
            chosen = self.rng.choice(n_pairs, size=edge_count, replace=False)
            adjacency = np.zeros((len(lower), len(upper)), dtype=np.int64)
            for flat in sorted(int(c) for c in chosen):
                ui, vi = divmod(flat, len(upper))
                relation = int(band[self.rng.integers(len(band))])
                u, v = int(lower[ui]), int(upper[vi])
                self.edges.append((u, relation, v))
                self._edge_relation[(u, v)] = relation
                adjacency[ui, vi] = 1
            self._adjacency.append(adjacency)

    def _chain_edges(self, nodes: list[int]) -> tuple[Edge, ...]:
        path = []
        for u, v in zip(nodes[:-1], nodes[1:]):
            path.append((u, self._edge_relation[(u, v)], v))
        return tuple(path)

    def _unique_pairs(self, start_layer: int, hops: int) -> list[_Question]:
        """All (topic, answer) pairs in (start_layer, start_layer+hops)
        joined by exactly one ascending chain, with that chain recovered."""
        counts = self._adjacency[start_layer]
        for step in range(1, hops):
            counts = counts @ self._adjacency[start_layer + step]
        result = []
        lower = self.layers[start_layer]
        upper = self.layers[start_layer + hops]
        unique = np.argwhere(counts == 1)
        for ui, vi in unique:
            nodes = [int(lower[ui])]
            cursor = int(ui)
            for step in range(hops):
                adjacency = self._adjacency[start_layer + step]
                row = adjacency[cursor]
                if step == hops - 1:
                    nxt = int(vi)
                else:
                    remaining = self._adjacency[start_layer + step + 1]
                    for step2 in range(start_layer + step + 2, start_layer + hops):
                        remaining = remaining @ self._adjacency[step2]
                    onward = remaining[:, int(vi)]
                    (candidates_idx,) = np.nonzero(row * onward)
                    nxt = int(candidates_idx[0])
                nodes.append(int(self.layers[start_layer + step + 1][nxt]))
                cursor = nxt
            result.append(
                _Question(
                    qid="",
                    hops=hops,
                    topic=nodes[0],
                    answer=nodes[-1],
                    path=self._chain_edges(nodes),
                )
            )
        return result

    def _signature_endpoints(self, q: _Question) -> set[int]:
        """Entities reachable from the topic by following the question's
        relation sequence."""
        frontier = {q.topic}
        for _, relation, _ in q.path:
            nxt = set()
            for u in frontier:
                for r, v in self._out_edges.get(u, ()):
                    if r == relation:
                        nxt.add(v)
            frontier = nxt
        return frontier

    def _question_pools(self) -> dict[int, list[_Question]]:
        self._out_edges: dict[int, list[tuple[int, int]]] = collections.defaultdict(list)
        for h, r, t in self.edges:
            self._out_edges[h].append((r, t))
        pools: dict[int, list[_Question]] = {}
        for hops in sorted(self.spec.template_mix):
            pool = []
            for start_layer in range(self.spec.layer_count - hops):
                pool.extend(self._unique_pairs(start_layer, hops))
            # The question names (topic, relation sequence); cap how many
            # endpoints share that signature so a signature-following
            # retriever can cover them all within a small budget.
            pools[hops] = [
                q
                for q in pool
                if len(self._signature_endpoints(q)) <= self.spec.signature_limit
            ]
        return pools

    def _draw(
        self,
        pools: dict[int, list[_Question]],
        counts: dict[int, int],
        blocked_edges: set[Edge],
    ) -> list[_Question]:
        chosen: list[_Question] = []
        for hops in sorted(counts):
            pool = [
                q for q in pools[hops] if not blocked_edges.intersection(q.path)
            ]
            if counts[hops] > len(pool):
                raise GenerationError(
                    f"only {len(pool)} unique {hops}-hop pairs available, "
                    f"{counts[hops]} requested; add edges or entities"
                )
            picks = self.rng.choice(len(pool), size=counts[hops], replace=False)
            chosen.extend(pool[int(i)] for i in picks)
        return chosen

    def generate(self) -> tuple[list[_Question], list[_Question]]:
        self._sample_edges()
        pools = self._question_pools()
        # Test questions are drawn first; training paths must avoid the
        # answer-side edges of test paths, so held-out performance reflects
        # structural generalization rather than positive-edge recall.
        test = self._draw(pools, _hop_counts(self.spec.test_questions, self.spec.template_mix), set())
        held_out_edges = {
            edge for q in test for edge in (q.path if q.hops == 1 else q.path[1:])
        }
        test_pairs = {(q.topic, q.answer) for q in test}
        train = self._draw(
            pools,
            _hop_counts(self.spec.train_questions, self.spec.template_mix),
            held_out_edges,
        )
        train = [q for q in train if (q.topic, q.answer) not in test_pairs]
        self._self_check(train + test)
        train = [
            _Question(f"train-{i:04d}", q.hops, q.topic, q.answer, q.path)
            for i, q in enumerate(train)
        ]
        test = [
            _Question(f"test-{i:04d}", q.hops, q.topic, q.answer, q.path)
            for i, q in enumerate(test)
        ]
        return train, test

    def _self_check(self, questions: list[_Question]) -> None:
        """Recompute shortest-path evidence per question on the final graph."""
        adj: dict[int, set[int]] = collections.defaultdict(set)
        for h, _, t in self.edges:
            adj[h].add(t)
            adj[t].add(h)

        def bfs(source: int) -> dict[int, int]:
            dist = {source: 0}
            queue = collections.deque([source])
            while queue:
                u = queue.popleft()
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        queue.append(v)
            return dist

        for q in questions:
            ds = bfs(q.topic)
            da = bfs(q.answer)
            if ds.get(q.answer) != q.hops:
                raise GenerationError(f"planted pair is not at distance {q.hops}")
            labels = set()
            for edge in self.edges:
                u, _, v = edge
                if (
                    u in ds and v in da and ds[u] + 1 + da[v] == q.hops
                ) or (v in ds and u in da and ds[v] + 1 + da[u] == q.hops):
                    labels.add(edge)
            if labels != set(q.path):
                raise GenerationError("planted path is not the unique shortest evidence")

    def _record(self, q: _Question) -> dict:
        relations = [self.relation_texts[r] for _, r, _ in q.path]
        return {
            "id": q.qid,
            "question": _question_text(relations),
            "topic_entities": [self.entity_texts[q.topic]],
            "answers": [self.entity_texts[q.answer]],
            "hops": q.hops,
            "gold_triples": [
                [self.entity_texts[h], self.relation_texts[r], self.entity_texts[t]]
                for h, r, t in q.path
            ],
        }

    def write(
        self, kg_path: str | Path, train_path: str | Path, test_path: str | Path
    ) -> dict[str, Path]:
        train, test = self.generate()
        kg_path, train_path, test_path = Path(kg_path), Path(train_path), Path(test_path)
        for p in (kg_path, train_path, test_path):
            p.parent.mkdir(parents=True, exist_ok=True)
        save_triples(
            kg_path,
            [
                (self.entity_texts[h], self.relation_texts[r], self.entity_texts[t])
                for h, r, t in self.edges
            ],
        )
        for path, questions in ((train_path, train), (test_path, test)):
            with open(path, "w", encoding="utf-8") as f:
                for q in questions:
                    f.write(json.dumps(self._record(q)) + "\n")
        return {"kg": kg_path, "train": train_path, "test": test_path}


def generate_synthetic(spec: SyntheticKgSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write kg.tsv, train.jsonl, and test.jsonl under one directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return SyntheticGenerator(spec).write(
        out / "kg.tsv", out / "train.jsonl", out / "test.jsonl"
    )
