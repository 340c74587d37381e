"""FastAPI service wrapping the retrieval engine.

The engine loads the KG, embedding store, and trained params once at
startup; requests then share the immutable state. Build with `create_app`
or run `kgrag serve --config <path>`.
"""
from __future__ import annotations

import os
from typing import Any

from fastapi import FastAPI, HTTPException

from ..config import resolve_config
from ..engine import Engine
from ..errors import ConfigError, KgragError, LlmError, PrerequisiteError
from ..reasoner import build_labeling_prompt, build_qa_prompt, parse_answers
from .models import (
    AnswerRequest,
    AnswerResponse,
    HealthResponse,
    ParseRequest,
    ParseResponse,
    PromptMessage,
    PromptRequest,
    PromptResponse,
    RetrieveRequest,
    RetrieveResponse,
    ScoredTriple,
)


def create_app(config: dict[str, Any]) -> FastAPI:
    engine = Engine.load(config, require_params=config["retriever"]["retriever"] == "mlp")
    app = FastAPI(title="kgrag", version="0.1.0")

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(
            status="ok",
            entities=engine.kg.entity_count,
            triples=len(engine.kg.triples),
            retriever=config["retriever"]["retriever"],
            trained=engine.params is not None,
        )

    @app.post("/retrieve", response_model=RetrieveResponse)
    def retrieve(request: RetrieveRequest) -> RetrieveResponse:
        if request.k is not None and request.k < 0:
            raise HTTPException(status_code=422, detail="k must be >= 0")
        try:
            result = engine.retrieve(request.question, request.topic_entities, k=request.k)
        except PrerequisiteError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        triples = [
            ScoredTriple(
                head=h, relation=r, tail=t, score=score
            )
            for (h, r, t), score in (
                (engine.kg.surface(triple), score) for triple, score in result.ranked
            )
        ]
        return RetrieveResponse(triples=triples)

    @app.post("/answer", response_model=AnswerResponse)
    def answer(request: AnswerRequest) -> AnswerResponse:
        try:
            result = engine.answer(request.question, request.topic_entities, k=request.k)
        except ConfigError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except LlmError as exc:
            raise HTTPException(status_code=502, detail=str(exc)) from exc
        except KgragError as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        return AnswerResponse(
            answers=result["answers"],
            refusal=result["refusal"],
            explanation=result["explanation"],
            triples=[ScoredTriple(**t) for t in result["triples"]],
        )

    @app.post("/prompts/qa", response_model=PromptResponse)
    def qa_prompt(request: PromptRequest) -> PromptResponse:
        bundle = build_qa_prompt(request.question, request.triples, allow_empty=True)
        return PromptResponse(
            messages=[PromptMessage(role=m.role, content=m.content) for m in bundle.messages]
        )

    @app.post("/prompts/labeling", response_model=PromptResponse)
    def labeling_prompt(request: PromptRequest) -> PromptResponse:
        bundle = build_labeling_prompt(request.question, request.triples)
        return PromptResponse(
            messages=[PromptMessage(role=m.role, content=m.content) for m in bundle.messages]
        )

    @app.post("/parse", response_model=ParseResponse)
    def parse(request: ParseRequest) -> ParseResponse:
        refusal_tokens = frozenset(config["reasoner"]["refusal_tokens"])
        output = parse_answers(request.text, refusal_tokens)
        return ParseResponse(
            answers=output.answers, refusal=output.refusal, explanation=output.explanation
        )

    return app


def app_from_env() -> FastAPI:
    """Factory for `uvicorn kgrag.service.app:app_from_env --factory`."""
    config_path = os.environ.get("KGRAG_CONFIG")
    if not config_path:
        raise ConfigError("set KGRAG_CONFIG to the pipeline config path")
    return create_app(resolve_config(config_path))
