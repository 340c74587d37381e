"""Knowledge-graph store: triple loading, indexing, and candidate extraction.

Entities and relations are dense 0-based integer handles assigned by first
occurrence in the triples file; each handle owns exactly one surface text.
The graph is immutable after load and safe to share across threads.
"""
from __future__ import annotations

import collections
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .errors import ParseError

logger = logging.getLogger(__name__)

EntityId = int
RelationId = int


class Triple(NamedTuple):
    head: EntityId
    relation: RelationId
    tail: EntityId


@dataclass(frozen=True)
class KnowledgeGraph:
    """Immutable deduplicated triple store with forward/reverse adjacency."""

    triples: tuple[Triple, ...]
    entity_texts: tuple[str, ...]
    relation_texts: tuple[str, ...]
    out_index: tuple[tuple[tuple[RelationId, EntityId], ...], ...]
    in_index: tuple[tuple[tuple[RelationId, EntityId], ...], ...]
    entity_ids: dict[str, EntityId] = field(repr=False)
    relation_ids: dict[str, RelationId] = field(repr=False)
    triple_handles: dict[Triple, int] = field(repr=False)

    @property
    def entity_count(self) -> int:
        return len(self.entity_texts)

    @property
    def relation_count(self) -> int:
        return len(self.relation_texts)

    def entity_id(self, text: str) -> EntityId | None:
        return self.entity_ids.get(text)

    def triple_handle(self, triple: Triple) -> int:
        return self.triple_handles[triple]

    def surface(self, triple: Triple) -> tuple[str, str, str]:
        return (
            self.entity_texts[triple.head],
            self.relation_texts[triple.relation],
            self.entity_texts[triple.tail],
        )

    def undirected_neighbors(self, entity: EntityId) -> Iterable[EntityId]:
        for _, t in self.out_index[entity]:
            yield t
        for _, h in self.in_index[entity]:
            yield h


@dataclass
class QuerySample:
    """One dataset question with resolved topic/answer handles."""

    id: str
    question: str
    topic_entities: frozenset[EntityId]
    answers: tuple[str, ...]
    answer_entities: frozenset[EntityId]
    hops: int | None = None

    @property
    def topic_count(self) -> int:
        return len(self.topic_entities)


def build_graph(raw_triples: Iterable[tuple[str, str, str]]) -> KnowledgeGraph:
    """Index raw surface triples into a deduplicated KnowledgeGraph."""
    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}
    triples: list[Triple] = []
    seen: set[Triple] = set()

    def ent(text: str) -> int:
        if text not in entity_ids:
            entity_ids[text] = len(entity_ids)
        return entity_ids[text]

    def rel(text: str) -> int:
        if text not in relation_ids:
            relation_ids[text] = len(relation_ids)
        return relation_ids[text]

    for h, r, t in raw_triples:
        triple = Triple(ent(h), rel(r), ent(t))
        if triple not in seen:
            seen.add(triple)
            triples.append(triple)

    out_adj: list[list[tuple[int, int]]] = [[] for _ in range(len(entity_ids))]
    in_adj: list[list[tuple[int, int]]] = [[] for _ in range(len(entity_ids))]
    for h, r, t in triples:
        out_adj[h].append((r, t))
        in_adj[t].append((r, h))

    entity_texts = [""] * len(entity_ids)
    for text, idx in entity_ids.items():
        entity_texts[idx] = text
    relation_texts = [""] * len(relation_ids)
    for text, idx in relation_ids.items():
        relation_texts[idx] = text

    return KnowledgeGraph(
        triples=tuple(triples),
        entity_texts=tuple(entity_texts),
        relation_texts=tuple(relation_texts),
        out_index=tuple(tuple(a) for a in out_adj),
        in_index=tuple(tuple(a) for a in in_adj),
        entity_ids=entity_ids,
        relation_ids=relation_ids,
        triple_handles={t: i for i, t in enumerate(triples)},
    )


def load_triples(path: str | Path) -> KnowledgeGraph:
    """Load a TAB-separated triples file (head, relation, tail per line).

    Duplicate triples are dropped; handles follow first occurrence. An empty
    file yields an empty graph. Malformed lines raise ParseError with the
    1-based line number.
    """
    raw: list[tuple[str, str, str]] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    f"{path}:{lineno}: expected 3 TAB-separated fields, got {len(parts)}"
                )
            raw.append((parts[0], parts[1], parts[2]))
    return build_graph(raw)


def load_dataset(path: str | Path, kg: KnowledgeGraph) -> list[QuerySample]:
    """Load a JSON-Lines question dataset and resolve surfaces to handles.

    Unresolvable topic entities are dropped with a warning; answer strings
    absent from the KG stay in `answers` but not in `answer_entities`.
    """
    samples: list[QuerySample] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            rid = record.get("id", f"<line {lineno}>")
            for key in ("id", "question", "topic_entities", "answers"):
                if key not in record:
                    raise ParseError(f"record {rid}: missing required field {key!r}")
            topics = set()
            for text in record["topic_entities"]:
                eid = kg.entity_id(text)
                if eid is None:
                    logger.warning("record %s: topic entity %r not in KG, dropped", rid, text)
                else:
                    topics.add(eid)
            answers = tuple(dict.fromkeys(record["answers"]))
            answer_entities = {
                kg.entity_id(a) for a in answers if kg.entity_id(a) is not None
            }
            samples.append(
                QuerySample(
                    id=str(record["id"]),
                    question=record["question"],
                    topic_entities=frozenset(topics),
                    answers=answers,
                    answer_entities=frozenset(answer_entities),
                    hops=record.get("hops"),
                )
            )
    return samples


def undirected_distances(
    kg: KnowledgeGraph, sources: Iterable[EntityId]
) -> dict[EntityId, int]:
    """Multi-source BFS distance over the undirected view of the graph."""
    dist: dict[int, int] = {s: 0 for s in sources}
    queue = collections.deque(dist)
    while queue:
        u = queue.popleft()
        d = dist[u] + 1
        for v in kg.undirected_neighbors(u):
            if v not in dist:
                dist[v] = d
                queue.append(v)
    return dist


def extract_candidate_subgraph(
    kg: KnowledgeGraph, topics: Iterable[EntityId], hops: int
) -> list[Triple]:
    """Triples whose endpoints both lie within `hops` undirected BFS steps
    of some topic entity, in ascending triple-handle order."""
    if hops < 0:
        raise ValueError("hops must be >= 0")
    topics = set(topics)
    if not topics:
        return []
    dist = undirected_distances(kg, topics)
    result = []
    for triple in kg.triples:
        dh = dist.get(triple.head)
        dt = dist.get(triple.tail)
        if dh is not None and dh <= hops and dt is not None and dt <= hops:
            result.append(triple)
    return result


def save_triples(path: str | Path, rows: Sequence[tuple[str, str, str]]) -> None:
    """Write surface triples in the TAB-separated load_triples format."""
    with open(path, "w", encoding="utf-8") as f:
        for h, r, t in rows:
            f.write(f"{h}\t{r}\t{t}\n")
