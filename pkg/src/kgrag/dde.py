"""Structural features over a candidate subgraph.

Distance encoding propagates a topic-membership indicator for L rounds along
edge direction and, separately, against it; the per-entity feature is the
concatenation [s(0), s(1)..s(L), s(r,1)..s(r,L)]. Also provides the
topic-indicator ablation (the L=0 case) and Personalized PageRank scores.
"""
from __future__ import annotations

import collections
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kg import EntityId, Triple


@dataclass(frozen=True)
class DdeConfig:
    rounds: int = 2

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")

    @property
    def entity_dim(self) -> int:
        return 1 + 2 * self.rounds


def compute_dde(
    candidates: Sequence[Triple],
    topics: Iterable[EntityId],
    config: DdeConfig = DdeConfig(),
) -> dict[EntityId, np.ndarray]:
    """Per-entity propagation vectors restricted to the candidate subgraph.

    Round l+1 averages round-l values over in-neighbours (forward block) and
    over out-neighbours (reverse block), one term per triple; an empty
    neighbourhood contributes 0. All components stay in [0, 1].
    """
    topics = set(topics)
    entities: dict[int, int] = {}
    for h, _, t in candidates:
        for e in (h, t):
            if e not in entities:
                entities[e] = len(entities)
    for e in topics:
        if e not in entities:
            entities[e] = len(entities)
    n = len(entities)
    if n == 0:
        return {}

    in_lists: list[list[int]] = [[] for _ in range(n)]
    out_lists: list[list[int]] = [[] for _ in range(n)]
    for h, _, t in candidates:
        hi, ti = entities[h], entities[t]
        in_lists[ti].append(hi)
        out_lists[hi].append(ti)

    seed = np.zeros(n)
    for e in topics:
        seed[entities[e]] = 1.0

    L = config.rounds
    forward = _propagate(seed, in_lists, L)
    reverse = _propagate(seed, out_lists, L)
    stacked = np.column_stack([seed] + forward + reverse) if L else seed[:, None]

    return {e: stacked[i] for e, i in entities.items()}


def _propagate(seed: np.ndarray, neighbor_lists: list[list[int]], rounds: int) -> list[np.ndarray]:
    n = len(neighbor_lists)
    flat = np.fromiter(
        (v for lst in neighbor_lists for v in lst), dtype=np.int64,
        count=sum(len(lst) for lst in neighbor_lists),
    )
    targets = np.repeat(np.arange(n), [len(lst) for lst in neighbor_lists])
    counts = np.array([len(lst) for lst in neighbor_lists], dtype=np.float64)
    scale = np.divide(1.0, counts, out=np.zeros(n), where=counts > 0)

    out = []
    current = seed
    for _ in range(rounds):
        sums = np.zeros(n)
        np.add.at(sums, targets, current[flat])
        current = sums * scale
        out.append(current)
    return out


def topic_onehot(
    entities: Iterable[EntityId], topics: Iterable[EntityId]
) -> dict[EntityId, np.ndarray]:
    """Membership-bit encoding; identical to compute_dde with rounds=0."""
    topics = set(topics)
    return {e: np.array([1.0 if e in topics else 0.0]) for e in entities}


def triple_encoding(
    encodings: Mapping[EntityId, np.ndarray], triple: Triple
) -> np.ndarray:
    """Concatenation of the head then tail entity encodings."""
    for endpoint in (triple.head, triple.tail):
        if endpoint not in encodings:
            raise KeyError(f"no encoding for entity {endpoint} in triple {tuple(triple)}")
    return np.concatenate([encodings[triple.head], encodings[triple.tail]])


def ppr_scores(
    candidates: Sequence[Triple],
    topics: Iterable[EntityId],
    damping: float = 0.85,
    iterations: int = 200,
    tolerance: float = 1e-10,
) -> dict[EntityId, float]:
    """Personalized PageRank on the undirected candidate graph.

    Teleport mass is uniform over the topic entities; dangling mass is
    redirected to the teleport distribution so scores always sum to 1.
    """
    topics = set(topics)
    if not topics:
        raise ValueError("ppr_scores requires at least one topic entity")
    entities: dict[int, int] = {}
    for h, _, t in candidates:
        for e in (h, t):
            if e not in entities:
                entities[e] = len(entities)
    for e in topics:
        if e not in entities:
            entities[e] = len(entities)
    n = len(entities)

    neighbors: list[list[int]] = [[] for _ in range(n)]
    for h, _, t in candidates:
        hi, ti = entities[h], entities[t]
        neighbors[hi].append(ti)
        if ti != hi:
            neighbors[ti].append(hi)

    teleport = np.zeros(n)
    for e in topics:
        teleport[entities[e]] = 1.0 / len(topics)

    src = np.repeat(np.arange(n), [len(lst) for lst in neighbors])
    dst = np.fromiter(
        (v for lst in neighbors for v in lst), dtype=np.int64,
        count=sum(len(lst) for lst in neighbors),
    )
    degree = np.array([len(lst) for lst in neighbors], dtype=np.float64)
    inv_degree = np.divide(1.0, degree, out=np.zeros(n), where=degree > 0)
    dangling = degree == 0

    p = teleport.copy()
    for _ in range(iterations):
        spread = np.zeros(n)
        weights = p * inv_degree
        np.add.at(spread, dst, weights[src])
        nxt = damping * (spread + p[dangling].sum() * teleport) + (1 - damping) * teleport
        delta = np.abs(nxt - p).max()
        p = nxt
        if delta < tolerance:
            break
    return {e: float(p[i]) for e, i in entities.items()}
