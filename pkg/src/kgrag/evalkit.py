"""Metric suite: triple/entity recall, Macro/Micro-F1, Hit, Hit@1, and the
hallucination-sensitive answer score, with per-bucket breakdowns.

Answer matching is case-insensitive exact match after trimming, also
accepting a predicted answer whose trailing parenthetical qualifier was
stripped (so "2014 (2014 World Series)" matches gold "2014"). Hit alone
checks the raw response for a gold substring.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .kg import EntityId, Triple

VERDICT_CORRECT = "correct"
VERDICT_WRONG_RETRIEVED = "wrong-retrieved"
VERDICT_WRONG_NOT_RETRIEVED = "wrong-not-retrieved"

_PAREN_RE = re.compile(r"\s*\([^()]*\)\s*$")

SCORE_RAW_MIN = -1.5
SCORE_RAW_MAX = 1.0


def _basic_norm(text: str) -> str:
    return text.strip().lower()


def strip_parenthetical(text: str) -> str:
    return _PAREN_RE.sub("", text).strip()


def answers_match(predicted: str, gold: str) -> bool:
    pred = _basic_norm(predicted)
    target = _basic_norm(gold)
    return pred == target or strip_parenthetical(pred) == target


@dataclass
class SampleJudgment:
    sample_id: str
    predicted: list[str]
    gold: list[str]
    gold_in_kg: bool
    verdicts: list[str]
    refusal: bool
    raw_response: str = ""
    hops: int | None = None
    topic_count: int | None = None

    def __post_init__(self):
        if len(self.verdicts) != len(self.predicted):
            raise ValueError("one verdict required per predicted answer")


def judge_sample(
    sample_id: str,
    predicted: Sequence[str],
    gold: Sequence[str],
    gold_in_kg: bool,
    retrieved_surfaces: Iterable[str],
    refusal: bool,
    raw_response: str = "",
    hops: int | None = None,
    topic_count: int | None = None,
) -> SampleJudgment:
    """Assign one verdict per predicted answer.

    A wrong answer counts as retrieved when it matches the surface text of
    any retrieved triple endpoint; otherwise it is wrong-not-retrieved.
    """
    surface_set = {_basic_norm(s) for s in retrieved_surfaces}
    verdicts = []
    for answer in predicted:
        if any(answers_match(answer, g) for g in gold):
            verdicts.append(VERDICT_CORRECT)
        else:
            norm = _basic_norm(answer)
            found = norm in surface_set or strip_parenthetical(norm) in surface_set
            verdicts.append(VERDICT_WRONG_RETRIEVED if found else VERDICT_WRONG_NOT_RETRIEVED)
    return SampleJudgment(
        sample_id=sample_id,
        predicted=list(predicted),
        gold=list(gold),
        gold_in_kg=gold_in_kg,
        verdicts=verdicts,
        refusal=refusal,
        raw_response=raw_response,
        hops=hops,
        topic_count=topic_count,
    )


def triple_recall(retrieved: Iterable[Triple], gold: Iterable[Triple]) -> float | None:
    """|retrieved ∩ gold| / |gold|; None when gold is empty (excluded sample)."""
    gold = set(gold)
    if not gold:
        return None
    retrieved = set(retrieved)
    return len(retrieved & gold) / len(gold)


def answer_entity_recall(
    retrieved: Iterable[Triple], answer_entities: Iterable[EntityId]
) -> float | None:
    """Fraction of answer entities appearing as an endpoint of any retrieved
    triple; None when there are no answer entities."""
    answers = set(answer_entities)
    if not answers:
        return None
    touched = set()
    for h, _, t in retrieved:
        touched.add(h)
        touched.add(t)
    return len(answers & touched) / len(answers)


def mean_excluding_none(values: Iterable[float | None]) -> float | None:
    kept = [v for v in values if v is not None]
    return sum(kept) / len(kept) if kept else None


def f1_hit_metrics(
    judgments: Sequence[SampleJudgment],
) -> tuple[float, float, float, float]:
    """(macro_f1, micro_f1, hit, hit_at_1) over a judgment set.

    Samples with empty gold are excluded from both F1 pools but still count
    in the Hit/Hit@1 denominators. Hit checks the raw response for any gold
    answer as a case-insensitive substring; Hit@1 matches the first parsed
    answer only.
    """
    if not judgments:
        raise ValueError("f1_hit_metrics requires at least one judgment")
    macro_terms = []
    tp = fp = fn = 0
    hit_count = 0
    hit1_count = 0
    for j in judgments:
        raw = j.raw_response.lower()
        if any(g.strip() and g.strip().lower() in raw for g in j.gold):
            hit_count += 1
        if j.predicted and any(answers_match(j.predicted[0], g) for g in j.gold):
            hit1_count += 1
        if not j.gold:
            continue
        correct = sum(
            1 for p in j.predicted if any(answers_match(p, g) for g in j.gold)
        )
        matched_gold = sum(
            1 for g in j.gold if any(answers_match(p, g) for p in j.predicted)
        )
        precision = correct / len(j.predicted) if j.predicted else 0.0
        recall = matched_gold / len(j.gold)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        macro_terms.append(f1)
        tp += matched_gold
        fp += len(j.predicted) - correct
        fn += len(j.gold) - matched_gold

    macro_f1 = sum(macro_terms) / len(macro_terms) if macro_terms else 0.0
    micro_p = tp / (tp + fp) if tp + fp else 0.0
    micro_r = tp / (tp + fn) if tp + fn else 0.0
    micro_f1 = 2 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r else 0.0
    return macro_f1, micro_f1, hit_count / len(judgments), hit1_count / len(judgments)


def _sample_score(j: SampleJudgment) -> float:
    if j.refusal or not j.predicted:
        return 0.0 if j.gold_in_kg else 1.0
    total = 0.0
    for verdict in j.verdicts:
        if verdict == VERDICT_CORRECT:
            total += 1.0
        elif j.gold_in_kg:
            total -= 1.0
        elif verdict == VERDICT_WRONG_RETRIEVED:
            total -= 1.0
        else:
            total -= 1.5
    return total


def score_h(judgments: Sequence[SampleJudgment]) -> float:
    """Answer-grounding score in [0, 100].

    Per sample, correct answers score +1; wrong answers -1 (or -1.5 when the
    sample has no KG answer and the wrong answer is absent from the
    retrieved triples); refusals score 0 with gold in the KG and +1 without.
    The per-sample score is divided by max(1, answer count), averaged, and
    the analytic range [-1.5, 1] is mapped linearly onto [0, 100].
    """
    if not judgments:
        raise ValueError("score_h requires at least one judgment")
    raw = sum(_sample_score(j) / max(1, len(j.predicted)) for j in judgments)
    raw /= len(judgments)
    return (raw - SCORE_RAW_MIN) / (SCORE_RAW_MAX - SCORE_RAW_MIN) * 100.0


@dataclass
class MetricsReport:
    macro_f1: float
    micro_f1: float
    hit: float
    hit_at_1: float
    score_h: float
    sample_count: int
    buckets: dict[str, "MetricsReport"] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "hit": self.hit,
            "hit_at_1": self.hit_at_1,
            "score_h": self.score_h,
            "sample_count": self.sample_count,
        }
        if self.buckets:
            out["buckets"] = {k: v.as_dict() for k, v in self.buckets.items()}
        return out


def qa_metrics(judgments: Sequence[SampleJudgment]) -> MetricsReport:
    macro, micro, hit, hit1 = f1_hit_metrics(judgments)
    return MetricsReport(
        macro_f1=macro,
        micro_f1=micro,
        hit=hit,
        hit_at_1=hit1,
        score_h=score_h(judgments),
        sample_count=len(judgments),
    )


def breakdown(
    judgments: Sequence[SampleJudgment], bucketing: str
) -> dict[str, MetricsReport]:
    """Recompute the QA metrics within hop-count or topic-count buckets."""
    if bucketing == "hop-count":
        def key(j: SampleJudgment) -> str:
            if j.hops is None:
                raise ValueError(f"sample {j.sample_id} has no hop metadata")
            return str(j.hops) if j.hops < 3 else ">=3"
    elif bucketing == "topic-count":
        def key(j: SampleJudgment) -> str:
            if j.topic_count is None:
                raise ValueError(f"sample {j.sample_id} has no topic metadata")
            return "single" if j.topic_count <= 1 else "multiple"
    else:
        raise ValueError(f"unknown bucketing key {bucketing!r}")

    groups: dict[str, list[SampleJudgment]] = {}
    for j in judgments:
        groups.setdefault(key(j), []).append(j)
    return {name: qa_metrics(group) for name, group in sorted(groups.items())}


def dump_judgments(path, judgments: Sequence[SampleJudgment]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for j in judgments:
            f.write(
                json.dumps(
                    {
                        "id": j.sample_id,
                        "predicted": j.predicted,
                        "gold": j.gold,
                        "gold_in_kg": j.gold_in_kg,
                        "verdicts": j.verdicts,
                        "refusal": j.refusal,
                        "hops": j.hops,
                        "topic_count": j.topic_count,
                    }
                )
                + "\n"
            )


def render_text_table(rows: Sequence[tuple[str, Mapping[str, float]]]) -> str:
    """Aligned plain-text table: one row per (name, metric mapping)."""
    if not rows:
        return ""
    columns = list(rows[0][1].keys())
    headers = ["metric set"] + columns
    table = [headers]
    for name, metrics in rows:
        table.append([name] + [f"{metrics[c]:.4f}" for c in columns])
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
