"""Shared retrieval engine: loads artifacts once, serves many queries.

Used by the `retrieve` pipeline stage, the FastAPI service, and tests. All
loaded state is immutable, so one engine can serve concurrent readers.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import dde as dde_mod
from . import scorer as scorer_mod
from .config import validate_config
from .embed import EmbeddingStore, HashEncoder, HttpEncoder, cosine_baseline_scores, store_load
from .errors import ConfigError, PrerequisiteError
from .kg import EntityId, KnowledgeGraph, Triple, extract_candidate_subgraph, load_triples
from .mlp import MlpParams, load_params
from .reasoner import LlmClient, build_qa_prompt, parse_answers
from .scorer import RetrievalResult, assemble_features, score_and_select, select_top_k

logger = logging.getLogger(__name__)


def struct_dim_for(config: Mapping[str, Any]) -> int:
    variant = config["retriever"]["feature_variant"]
    rounds = config["retriever"]["dde_rounds"]
    if variant == "dde":
        return 2 * (1 + 2 * rounds)
    if variant == "dde+ppr":
        return 2 * (1 + 2 * rounds) + 2
    if variant == "topic_onehot":
        return 2
    return 0  # none, graphsage


def feature_dim_for(config: Mapping[str, Any]) -> int:
    return 4 * config["embeddings"]["dim"] + struct_dim_for(config)


def make_query_encoder(config: Mapping[str, Any]):
    emb = config["embeddings"]
    if emb["encoder"] == "hash":
        return HashEncoder(dim=emb["dim"])
    if not emb.get("endpoint"):
        raise ConfigError("embeddings.endpoint required for the http encoder")
    return HttpEncoder(
        emb["endpoint"],
        batch_size=emb["batch_size"],
        retries=emb["retries"],
        parallelism=emb["parallelism"],
    )


class Engine:
    def __init__(
        self,
        config: dict[str, Any],
        kg: KnowledgeGraph,
        store: EmbeddingStore,
        params: MlpParams | None = None,
    ):
        validate_config(config)
        self.config = config
        self.kg = kg
        self.store = store
        self.params = params
        self.encoder = make_query_encoder(config)
        retriever = config["retriever"]
        self.variant = retriever["feature_variant"]
        self.rounds = retriever["dde_rounds"]
        self.hops = retriever["hops"]
        self.k = retriever["k"]
        self.workers = retriever.get("workers", 1)
        self._sage_layers = None
        if self.variant == "graphsage":
            sage = retriever["graphsage"]
            self._sage_layers = scorer_mod.init_sage_layers(
                store.dim, store.dim, layers=sage["layers"], seed=sage["seed"]
            )

    @classmethod
    def load(cls, config: dict[str, Any], require_params: bool = True) -> "Engine":
        paths = config["paths"]
        out_dir = Path(paths["out_dir"])
        kg = load_triples(paths["kg"])
        store_path = out_dir / "store.embs"
        if not store_path.exists():
            raise PrerequisiteError(f"missing {store_path}; run the `embed` stage first")
        store = store_load(store_path)
        params = None
        if config["retriever"]["retriever"] == "mlp":
            params_path = out_dir / "params.mlps"
            if params_path.exists():
                params = load_params(
                    params_path,
                    expected_input_dim=feature_dim_for(config),
                    expected_dde_rounds=config["retriever"]["dde_rounds"],
                )
            elif require_params:
                raise PrerequisiteError(f"missing {params_path}; run the `train` stage first")
        return cls(config, kg, store, params)

    def embed_question(self, question: str) -> np.ndarray:
        return np.asarray(self.encoder.encode([question])[0], dtype=np.float64)

    def candidates_for(self, topics: Sequence[EntityId]) -> list[Triple]:
        return extract_candidate_subgraph(self.kg, topics, self.hops)

    def structural_context(
        self, candidates: Sequence[Triple], topics: Sequence[EntityId]
    ) -> dict[str, Any]:
        """Per-variant structural inputs for feature assembly."""
        topics = set(topics)
        if self.variant == "dde":
            return {
                "encodings": dde_mod.compute_dde(
                    candidates, topics, dde_mod.DdeConfig(self.rounds)
                )
            }
        if self.variant == "dde+ppr":
            ppr_cfg = self.config["retriever"]["ppr"]
            return {
                "encodings": dde_mod.compute_dde(
                    candidates, topics, dde_mod.DdeConfig(self.rounds)
                ),
                "ppr": dde_mod.ppr_scores(
                    candidates,
                    topics,
                    damping=ppr_cfg["damping"],
                    iterations=ppr_cfg["iterations"],
                    tolerance=ppr_cfg["tolerance"],
                )
                if topics
                else {},
            }
        if self.variant == "topic_onehot":
            entities = {e for t in candidates for e in (t.head, t.tail)} | topics
            return {"encodings": dde_mod.topic_onehot(entities, topics)}
        if self.variant == "graphsage":
            entity_embs = {
                e: self.store.lookup(self.kg.entity_texts[e]).astype(np.float64)
                for t in candidates
                for e in (t.head, t.tail)
            }
            relation_embs = {
                t.relation: self.store.lookup(
                    self.kg.relation_texts[t.relation]
                ).astype(np.float64)
                for t in candidates
            }
            override = (
                scorer_mod.graphsage_encode(
                    candidates,
                    entity_embs,
                    relation_embs,
                    self._sage_layers,
                    layers=len(self._sage_layers),
                )
                if candidates
                else {}
            )
            return {"encodings": None, "entity_override": override}
        return {"encodings": None}

    def features_for(
        self,
        query_vec: np.ndarray,
        candidates: Sequence[Triple],
        topics: Sequence[EntityId],
    ) -> np.ndarray:
        ctx = self.structural_context(candidates, topics)
        return assemble_features(
            query_vec,
            candidates,
            self.kg,
            self.store,
            ctx.get("encodings"),
            ppr=ctx.get("ppr"),
            entity_override=ctx.get("entity_override"),
        )

    def retrieve(
        self,
        question: str,
        topic_texts: Sequence[str],
        k: int | None = None,
        sample_id: str = "",
    ) -> RetrievalResult:
        k = self.k if k is None else k
        topics = [
            eid
            for eid in (self.kg.entity_id(t) for t in topic_texts)
            if eid is not None
        ]
        candidates = self.candidates_for(topics)
        if not candidates or k == 0:
            return RetrievalResult(sample_id, ())
        handles = [self.kg.triple_handle(t) for t in candidates]
        query_vec = self.embed_question(question)
        if self.config["retriever"]["retriever"] == "cosine":
            score_map = cosine_baseline_scores(self.store, query_vec, candidates, self.kg)
            scores = np.array([score_map[t] for t in candidates])
            return RetrievalResult(
                sample_id, tuple(select_top_k(candidates, scores, k, handles))
            )
        if self.params is None:
            raise PrerequisiteError("no trained params loaded; run the `train` stage first")
        features = self.features_for(query_vec, candidates, topics)
        return score_and_select(
            self.params, sample_id, candidates, features, k, handles, workers=self.workers
        )

    def answer(
        self, question: str, topic_texts: Sequence[str], k: int | None = None
    ) -> dict[str, Any]:
        """Retrieve, prompt the configured reasoner, and parse the reply."""
        reasoner_cfg = self.config["reasoner"]
        if not reasoner_cfg.get("endpoint"):
            raise ConfigError("reasoner.endpoint is required to answer questions")
        result = self.retrieve(question, topic_texts, k=k)
        surfaces = [self.kg.surface(t) for t in result.triples]
        bundle = build_qa_prompt(question, surfaces, allow_empty=True)
        client = LlmClient(
            endpoint=reasoner_cfg["endpoint"],
            model=reasoner_cfg["model"],
            retries=reasoner_cfg["retries"],
            timeout=reasoner_cfg["timeout"],
        )
        raw = client.call(bundle)
        parsed = parse_answers(raw, frozenset(reasoner_cfg["refusal_tokens"]))
        return {
            "answers": parsed.answers,
            "refusal": parsed.refusal,
            "explanation": parsed.explanation,
            "raw": raw,
            "triples": [
                {"head": h, "relation": r, "tail": t, "score": s}
                for (h, r, t), s in zip(surfaces, (s for _, s in result.ranked))
            ],
        }
