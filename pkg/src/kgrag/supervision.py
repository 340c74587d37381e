"""Weak supervision: shortest-path surrogate labels and external label ingestion.

Training labels are the triples lying on any minimum-length undirected path
between a topic entity and an answer entity. All tied shortest paths are
included so the label set does not depend on iteration order.
"""
from __future__ import annotations

import collections
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ParseError
from .kg import EntityId, KnowledgeGraph, Triple

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeakLabelSet:
    sample_id: str
    positive_triples: frozenset[Triple]


def _bfs(adj: Mapping[int, list[int]], source: int) -> dict[int, int]:
    dist = {source: 0}
    queue = collections.deque([source])
    while queue:
        u = queue.popleft()
        for v in adj.get(u, ()):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _undirected_adjacency(kg: KnowledgeGraph) -> dict[int, list[int]]:
    adj: dict[int, list[int]] = collections.defaultdict(list)
    for h, _, t in kg.triples:
        adj[h].append(t)
        if t != h:
            adj[t].append(h)
    return adj


def shortest_path_triples(
    kg: KnowledgeGraph,
    topics: Iterable[EntityId],
    answers: Iterable[EntityId],
) -> set[Triple]:
    """Union of triples on any minimum-length undirected topic-answer path.

    A triple (u, r, v) lies on a shortest path between topic s and answer a
    of length D iff d_s(u) + 1 + d_a(v) == D or d_s(v) + 1 + d_a(u) == D,
    which covers both traversal orientations and all tied paths. Parallel
    edges between the same endpoints each count as their own tied path.
    """
    topics = set(topics)
    answers = set(answers)
    if not topics or not answers:
        return set()
    adj = _undirected_adjacency(kg)
    dist_from: dict[int, dict[int, int]] = {}
    for node in topics | answers:
        dist_from[node] = _bfs(adj, node)

    labels: set[Triple] = set()
    for s in topics:
        ds = dist_from[s]
        for a in answers:
            if a not in ds:
                continue
            total = ds[a]
            if total == 0:
                continue
            da = dist_from[a]
            for triple in kg.triples:
                u, _, v = triple
                du_s, dv_s = ds.get(u), ds.get(v)
                du_a, dv_a = da.get(u), da.get(v)
                if du_s is not None and dv_a is not None and du_s + 1 + dv_a == total:
                    labels.add(triple)
                elif dv_s is not None and du_a is not None and dv_s + 1 + du_a == total:
                    labels.add(triple)
    return labels


def shortest_path_labels(
    kg: KnowledgeGraph,
    sample_id: str,
    topics: Iterable[EntityId],
    answers: Iterable[EntityId],
) -> WeakLabelSet:
    return WeakLabelSet(
        sample_id=sample_id,
        positive_triples=frozenset(shortest_path_triples(kg, topics, answers)),
    )


def save_labels(
    path: str | Path, labels: Iterable[WeakLabelSet], kg: KnowledgeGraph
) -> None:
    """Serialize label sets as JSON Lines of surface-text triples."""
    with open(path, "w", encoding="utf-8") as f:
        for label in labels:
            triples = sorted(kg.triple_handle(t) for t in label.positive_triples)
            rows = [list(kg.surface(kg.triples[h])) for h in triples]
            f.write(json.dumps({"id": label.sample_id, "triples": rows}) + "\n")


def import_relevance_labels(
    path: str | Path, kg: KnowledgeGraph
) -> dict[str, set[Triple]]:
    """Load external relevance labels (JSON Lines of [head, relation, tail]
    surface arrays) and resolve them against the KG.

    Triples whose surfaces do not resolve to an existing KG triple are
    dropped; the per-file drop count is logged.
    """
    result: dict[str, set[Triple]] = {}
    dropped = 0
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            rid = record.get("id")
            if rid is None or "triples" not in record:
                raise ParseError(f"{path}:{lineno}: record must have 'id' and 'triples'")
            resolved: set[Triple] = set()
            for row in record["triples"]:
                if not isinstance(row, (list, tuple)) or len(row) != 3:
                    raise ParseError(f"record {rid}: malformed triple {row!r}")
                h = kg.entity_id(row[0])
                r = kg.relation_ids.get(row[1])
                t = kg.entity_id(row[2])
                if h is None or r is None or t is None:
                    dropped += 1
                    continue
                triple = Triple(h, r, t)
                if triple not in kg.triple_handles:
                    dropped += 1
                    continue
                resolved.add(triple)
            result[str(rid)] = resolved
    if dropped:
        logger.warning("%s: dropped %d unresolvable labelled triples", path, dropped)
    return result
