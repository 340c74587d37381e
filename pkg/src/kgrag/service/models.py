"""Pydantic request/response models for the HTTP service."""
from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    entities: int
    triples: int
    retriever: str
    trained: bool


class RetrieveRequest(BaseModel):
    question: str
    topic_entities: list[str] = Field(default_factory=list)
    k: int | None = None


class ScoredTriple(BaseModel):
    head: str
    relation: str
    tail: str
    score: float


class RetrieveResponse(BaseModel):
    triples: list[ScoredTriple]


class AnswerRequest(BaseModel):
    question: str
    topic_entities: list[str] = Field(default_factory=list)
    k: int | None = None


class AnswerResponse(BaseModel):
    answers: list[str]
    refusal: bool
    explanation: str
    triples: list[ScoredTriple]


class PromptRequest(BaseModel):
    question: str
    triples: list[tuple[str, str, str]] = Field(default_factory=list)


class PromptMessage(BaseModel):
    role: str
    content: str


class PromptResponse(BaseModel):
    messages: list[PromptMessage]


class ParseRequest(BaseModel):
    text: str


class ParseResponse(BaseModel):
    answers: list[str]
    refusal: bool
    explanation: str
