"""Prompt assembly, chat-completion client, and grounded-answer parsing.

Prompts carry the retrieved triples one per line as "(head,relation,tail)"
and ask for answers prefixed with "ans:" (question answering) or triples
prefixed with "evidence:" (relevance labeling). Requests pin temperature
and seed to 0; each question costs exactly one completion call.
"""
from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import requests

from .errors import LlmError, LlmTimeoutError

QA_SYSTEM = (
    "Based on the triples retrieved from a knowledge graph, please answer the "
    'question. Please return formatted answers as a list, each prefixed with "ans:".'
)

LABELING_SYSTEM = (
    "Based on the triplets retrieved from a knowledge graph, please select "
    "relevant triplets for answering the question. Please return formatted "
    'triplets as a list, each prefixed with "evidence:".'
)

ICL_TRIPLES = [
    ("Lou Seal", "sports.mascot.team", "San Francisco Giants"),
    ("San Francisco Giants", "sports.sports_team.championships", "2012 World Series"),
    ("San Francisco Giants", "sports.sports_championship_event.champion", "2014 World Series"),
    ("San Francisco Giants", "time.participant.event", "2014 Major League Baseball season"),
    ("San Francisco Giants", "time.participant.event", "2010 World Series"),
    ("San Francisco Giants", "time.participant.event", "2010 Major League Baseball season"),
    ("San Francisco Giants", "sports.sports_team.championships", "2014 World Series"),
    ("San Francisco Giants", "sports.sports_team.team_mascot", "Crazy Crab"),
    ("San Francisco Giants", "sports.sports_team.championships", "2010 World Series"),
    ("San Francisco Giants", "sports.professional_sports_team.owner_s", "Bill Neukom"),
    ("San Francisco Giants", "time.participant.event", "2012 World Series"),
    ("San Francisco", "sports.sports_team_location.teams", "San Francisco Giants"),
    ("San Francisco Giants", "sports.sports_team.arena_stadium", "AT&T Park"),
    ("AT&T Park", "location.location.events", "2012 World Series"),
]

ICL_QUESTION = "What year did the team with mascot named Lou Seal win the World Series?"

ICL_ANSWER = """\
To find the year the team with mascot named Lou Seal won the World Series, we need to find the team with mascot named Lou Seal and then find the year they won the World Series.

From the triplets, we can see that Lou Seal is the mascot of the San Francisco Giants.

Now, we need to find the year the San Francisco Giants won the World Series.

From the triplets, we can see that San Francisco Giants won the 2010 World Series and 2012 World Series and 2014 World Series.

So, the team with mascot named Lou Seal (San Francisco Giants) won the World Series in 2010, 2012, and 2014.

Therefore, the formatted answers are:

ans: 2014 (2014 World Series)
ans: 2012 (2012 World Series)
ans: 2010 (2010 World Series)"""

DEFAULT_REFUSAL_TOKENS = frozenset({"not available", "none", "no answer", "unknown"})

_ANS_RE = re.compile(r"^ans:\s*(.*)$", re.IGNORECASE)
_EVIDENCE_RE = re.compile(r"^evidence:\s*(.*)$", re.IGNORECASE)


class Message(NamedTuple):
    role: str
    content: str


@dataclass(frozen=True)
class PromptBundle:
    messages: tuple[Message, ...]

    def to_chat_payload(self) -> list[dict[str, str]]:
        return [{"role": m.role, "content": m.content} for m in self.messages]

    def render(self) -> str:
        """Canonical text form used for golden-file comparison."""
        blocks = [f"=== {m.role} ===\n{m.content}" for m in self.messages]
        return "\n".join(blocks) + "\n"


@dataclass
class ReasonerOutput:
    raw_text: str
    answers: list[str]
    refusal: bool
    explanation: str = ""


def render_triples(triples: Sequence[tuple[str, str, str]]) -> str:
    return "\n".join(f"({h},{r},{t})" for h, r, t in triples)


def _user_block(question: str, triples: Sequence[tuple[str, str, str]]) -> str:
    body = render_triples(triples)
    triple_block = f"Triplets:\n{body}\n" if body else "Triplets:\n"
    return f"{triple_block}\nQuestion:\n{question}"


def build_qa_prompt(
    question: str,
    ranked_triples: Sequence[tuple[str, str, str]],
    allow_empty: bool = False,
) -> PromptBundle:
    """QA prompt: system instruction, the World-Series worked example, then
    the sample to infer. Triples appear in retriever rank order."""
    if not ranked_triples and not allow_empty:
        raise ValueError("no triples to render; pass allow_empty=True for the no-context mode")
    return PromptBundle(
        messages=(
            Message("system", QA_SYSTEM),
            Message("user", _user_block(ICL_QUESTION, ICL_TRIPLES)),
            Message("assistant", ICL_ANSWER),
            Message("user", _user_block(question, ranked_triples)),
        )
    )


def build_labeling_prompt(
    question: str, candidate_triples: Sequence[tuple[str, str, str]]
) -> PromptBundle:
    """Relevance-labeling prompt; replies are expected as "evidence:" lines."""
    return PromptBundle(
        messages=(
            Message("system", LABELING_SYSTEM),
            Message("user", _user_block(question, candidate_triples)),
        )
    )


@dataclass
class LlmClient:
    """Minimal chat-completions client with retry/backoff.

    Sends temperature=0 and seed=0 on every request for reproducibility and
    makes a single completion call per question (retries cover transient
    transport failures only).
    """

    endpoint: str
    model: str
    retries: int = 3
    backoff: float = 0.5
    timeout: float = 120.0
    session: requests.Session = field(default_factory=requests.Session, repr=False)

    def call(self, bundle: PromptBundle) -> str:
        url = self.endpoint.rstrip("/") + "/v1/chat/completions"
        body = {
            "model": self.model,
            "messages": bundle.to_chat_payload(),
            "temperature": 0,
            "seed": 0,
        }
        last_status: int | None = None
        last_error: Exception | None = None
        for attempt in range(1, self.retries + 1):
            try:
                resp = self.session.post(url, json=body, timeout=self.timeout)
            except requests.Timeout as exc:
                raise LlmTimeoutError(f"{url} timed out after {self.timeout}s") from exc
            except requests.RequestException as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * attempt)
                continue
            if resp.status_code == 200:
                payload = resp.json()
                return payload["choices"][0]["message"]["content"]
            last_status = resp.status_code
            if resp.status_code in (408, 429) or resp.status_code >= 500:
                if attempt < self.retries:
                    time.sleep(self.backoff * attempt)
                continue
            raise LlmError(f"{url} returned status {resp.status_code}", status=resp.status_code)
        raise LlmError(
            f"{url} failed after {self.retries} attempts "
            f"(last status {last_status}, last error {last_error})",
            status=last_status,
        )


def call_llm(endpoint: str, model: str, bundle: PromptBundle, **kwargs) -> str:
    return LlmClient(endpoint=endpoint, model=model, **kwargs).call(bundle)


def normalize_answer(text: str) -> str:
    return text.strip().lower().rstrip(".!?").strip()


def parse_answers(
    raw_text: str, refusal_tokens: frozenset[str] = DEFAULT_REFUSAL_TOKENS
) -> ReasonerOutput:
    """Extract "ans:"-prefixed lines in order, deduplicated.

    Refusal is flagged when no answer line exists or every extracted answer
    normalizes to a refusal token; refusals carry an empty answer list.
    Parsing is total: any input yields an output.
    """
    answers: list[str] = []
    explanation_lines: list[str] = []
    for line in raw_text.splitlines():
        match = _ANS_RE.match(line.strip())
        if match:
            value = match.group(1).strip()
            if value and value not in answers:
                answers.append(value)
        else:
            explanation_lines.append(line)
    refusal = not answers or all(
        normalize_answer(a) in refusal_tokens for a in answers
    )
    return ReasonerOutput(
        raw_text=raw_text,
        answers=[] if refusal else answers,
        refusal=refusal,
        explanation="\n".join(explanation_lines).strip(),
    )


def format_answers(answers: Sequence[str]) -> str:
    """Render answers in the assistant output format (parse round-trip)."""
    return "\n".join(f"ans: {a}" for a in answers)


def parse_labeling_response(raw_text: str) -> list[tuple[str, str, str]]:
    """Extract "evidence:"-prefixed triples; malformed lines are skipped."""
    triples: list[tuple[str, str, str]] = []
    for line in raw_text.splitlines():
        match = _EVIDENCE_RE.match(line.strip())
        if not match:
            continue
        body = match.group(1).strip()
        if body.startswith("(") and body.endswith(")"):
            body = body[1:-1]
        parts = [p.strip() for p in body.split(",")]
        if len(parts) == 3 and all(parts):
            triples.append((parts[0], parts[1], parts[2]))
    return triples
