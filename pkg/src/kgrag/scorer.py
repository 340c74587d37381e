"""Feature assembly, parallel triple scoring, top-K selection, GraphSAGE ablation.

Per-triple features concatenate the question, head, relation, and tail text
embeddings with the structural triple encoding. Scoring is read-only over
immutable params and candidates, so triples can be scored concurrently.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .embed import EmbeddingStore
from .kg import EntityId, KnowledgeGraph, RelationId, Triple
from .mlp import MlpParams, forward_logits, sigmoid

SCORE_CHUNK = 8192


@dataclass(frozen=True)
class RetrievalResult:
    """Top-K triples for one sample: scores descending, ties by handle."""

    sample_id: str
    ranked: tuple[tuple[Triple, float], ...]

    @property
    def triples(self) -> tuple[Triple, ...]:
        return tuple(t for t, _ in self.ranked)

    def top(self, k: int) -> tuple[Triple, ...]:
        return tuple(t for t, _ in self.ranked[:k])


def assemble_features(
    query_vec: np.ndarray,
    candidates: Sequence[Triple],
    kg: KnowledgeGraph,
    store: EmbeddingStore,
    encodings: Mapping[EntityId, np.ndarray] | None,
    ppr: Mapping[EntityId, float] | None = None,
    entity_override: Mapping[EntityId, np.ndarray] | None = None,
) -> np.ndarray:
    """One feature row per candidate triple, matching the candidate order.

    Layout per row: [z_q | z_h | z_r | z_t | struct], where struct is the
    head-then-tail concatenation of the per-entity encoding plus, when given,
    the head/tail PPR scores. `entity_override` substitutes updated entity
    vectors (the message-passing ablation) for the stored ones. Missing
    embeddings or encodings raise with the offending triple named.
    """
    query = np.asarray(query_vec, dtype=np.float64)
    n = len(candidates)
    d = store.dim
    struct_dim = 0
    if encodings is not None:
        probe = next(iter(encodings.values()), None)
        struct_dim = 2 * (len(probe) if probe is not None else 0)
    if ppr is not None:
        struct_dim += 2
    features = np.empty((n, query.shape[0] + 3 * d + struct_dim), dtype=np.float64)
    for i, triple in enumerate(candidates):
        h_text, r_text, t_text = kg.surface(triple)
        try:
            if entity_override is not None:
                z_h = entity_override[triple.head]
                z_t = entity_override[triple.tail]
            else:
                z_h = store.lookup(h_text)
                z_t = store.lookup(t_text)
            z_r = store.lookup(r_text)
        except KeyError as exc:
            raise KeyError(f"triple {(h_text, r_text, t_text)}: {exc}") from exc
        parts = [query, z_h, z_r, z_t]
        if encodings is not None:
            try:
                parts.append(encodings[triple.head])
                parts.append(encodings[triple.tail])
            except KeyError as exc:
                raise KeyError(
                    f"triple {(h_text, r_text, t_text)}: missing encoding for entity {exc}"
                ) from exc
        if ppr is not None:
            parts.append(np.array([ppr.get(triple.head, 0.0), ppr.get(triple.tail, 0.0)]))
        features[i] = np.concatenate(parts)
    return features


def score_candidates(
    params: MlpParams, features: np.ndarray, workers: int = 1
) -> np.ndarray:
    """Probabilities for each candidate row; chunked so results are identical
    regardless of worker count."""
    features = np.asarray(features, dtype=np.float64)
    chunks = [
        features[i : i + SCORE_CHUNK] for i in range(0, features.shape[0], SCORE_CHUNK)
    ]
    if not chunks:
        return np.zeros(0)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            logits = list(pool.map(lambda c: forward_logits(params, c), chunks))
    else:
        logits = [forward_logits(params, c) for c in chunks]
    return sigmoid(np.concatenate(logits))


def select_top_k(
    candidates: Sequence[Triple],
    scores: np.ndarray,
    k: int,
    handles: Sequence[int] | None = None,
) -> list[tuple[Triple, float]]:
    """Exact top-k by score, ties broken by ascending triple handle."""
    if k < 0:
        raise ValueError("k must be >= 0")
    scores = np.asarray(scores, dtype=np.float64)
    if handles is None:
        handles = np.arange(len(candidates))
    else:
        handles = np.asarray(handles)
    order = np.lexsort((handles, -scores))
    return [(candidates[i], float(scores[i])) for i in order[:k]]


def score_and_select(
    params: MlpParams,
    sample_id: str,
    candidates: Sequence[Triple],
    features: np.ndarray,
    k: int,
    handles: Sequence[int] | None = None,
    workers: int = 1,
) -> RetrievalResult:
    scores = score_candidates(params, features, workers=workers)
    return RetrievalResult(sample_id, tuple(select_top_k(candidates, scores, k, handles)))


SageLayer = Sequence[tuple[np.ndarray, np.ndarray]]  # (weight, bias) stack


def init_sage_layers(
    entity_dim: int, relation_dim: int, layers: int = 1, seed: int = 0
) -> list[list[tuple[np.ndarray, np.ndarray]]]:
    """Seeded single-linear layer MLPs mapping [z_e | z_n | z_r] back to
    entity dimension."""
    rng = np.random.default_rng(seed)
    out = []
    in_dim = 2 * entity_dim + relation_dim
    for _ in range(layers):
        scale = np.sqrt(2.0 / in_dim)
        w = rng.standard_normal((in_dim, entity_dim)) * scale
        out.append([(w, np.zeros(entity_dim))])
    return out


def graphsage_encode(
    candidates: Sequence[Triple],
    entity_embs: Mapping[EntityId, np.ndarray],
    relation_embs: Mapping[RelationId, np.ndarray],
    layer_params: Sequence[SageLayer],
    layers: int = 1,
) -> dict[EntityId, np.ndarray]:
    """Mean-aggregating message passing with edge attributes.

    Each layer aggregates [z_neighbor | z_relation] over in-edges (empty
    neighbourhood aggregates to zero) and maps [z_entity | aggregate]
    through the layer's MLP.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if len(layer_params) != layers:
        raise ValueError(f"expected {layers} layer parameter sets, got {len(layer_params)}")
    current = {e: np.asarray(v, dtype=np.float64) for e, v in entity_embs.items()}
    in_edges: dict[int, list[tuple[int, int]]] = {e: [] for e in current}
    for h, r, t in candidates:
        in_edges.setdefault(t, []).append((h, r))
        in_edges.setdefault(h, [])
    for layer in range(layers):
        mlp = layer_params[layer]
        layer_in = mlp[0][0].shape[0]
        updated = {}
        for e, z_e in current.items():
            edges = in_edges.get(e, [])
            if edges:
                agg = np.mean(
                    [np.concatenate([current[h], relation_embs[r]]) for h, r in edges],
                    axis=0,
                )
            else:
                # zero aggregate sized to the layer's [z_e | z_n | z_r] input
                agg = np.zeros(layer_in - z_e.shape[0])
            updated[e] = _sage_mlp(mlp, np.concatenate([z_e, agg]))
        current = updated
    return current


def _sage_mlp(layers: SageLayer, x: np.ndarray) -> np.ndarray:
    """Vector-output MLP: ReLU between layers, linear final layer."""
    a = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        if a.shape[0] != w.shape[0]:
            raise ValueError(f"sage layer {i}: input dim {a.shape[0]} != {w.shape[0]}")
        z = a @ w + b
        a = z if i == last else np.maximum(z, 0.0)
    return a


class StoreBackedDataset:
    """Lazy training rows: feature matrices are assembled per batch from the
    embedding store, keeping memory at one-batch scale."""

    def __init__(self, store: EmbeddingStore, struct_dim: int):
        self._matrix = store.matrix.astype(np.float64)
        self._queries: list[np.ndarray] = []
        self._sample_of: list[np.ndarray] = []
        self._hrt: list[np.ndarray] = []
        self._struct: list[np.ndarray] = []
        self._labels: list[np.ndarray] = []
        self._struct_dim = struct_dim
        self._finalized = False

    def add_sample(
        self,
        query_vec: np.ndarray,
        hrt_rows: np.ndarray,
        struct: np.ndarray,
        labels: np.ndarray,
    ) -> None:
        n = hrt_rows.shape[0]
        if struct.shape != (n, self._struct_dim) or labels.shape[0] != n:
            raise ValueError("misaligned sample arrays")
        self._queries.append(np.asarray(query_vec, dtype=np.float64))
        self._sample_of.append(np.full(n, len(self._queries) - 1, dtype=np.int64))
        self._hrt.append(hrt_rows.astype(np.int64))
        self._struct.append(struct.astype(np.float32))
        self._labels.append(labels.astype(np.float64))

    def _finalize(self):
        if not self._finalized:
            sizes = [len(x) for x in self._labels]
            offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
            self._groups = [np.arange(a, b) for a, b in zip(offsets[:-1], offsets[1:])]
            self._num_rows = int(offsets[-1])
            self._q = np.stack(self._queries)
            self._s = np.concatenate(self._sample_of)
            self._h = np.concatenate(self._hrt, axis=0)
            self._st = np.concatenate(self._struct, axis=0)
            self._y = np.concatenate(self._labels)
            self._finalized = True

    @property
    def groups(self) -> list[np.ndarray]:
        self._finalize()
        return self._groups

    @property
    def num_rows(self) -> int:
        self._finalize()
        return self._num_rows

    def gather(self, row_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self._finalize()
        q = self._q[self._s[row_ids]]
        h = self._matrix[self._h[row_ids, 0]]
        r = self._matrix[self._h[row_ids, 1]]
        t = self._matrix[self._h[row_ids, 2]]
        st = self._st[row_ids].astype(np.float64)
        return np.hstack([q, h, r, t, st]), self._y[row_ids]
