"""Reward scoring: rule-based checks, judge adapters, checklist report score.

Rule scorers are pure and use exact numeric bounds (token length 100..2000,
at most 12 distinct citations, child counts 2..7, dominant-script ratio at
least 0.8). Judge adapters send rubric prompts to a backend and map the
returned 1..5 rating onto [0, 1] via (s - 1) / 4. All scores live in [0, 1].
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .backend import Backend, ChatRequest
from .model import CHILD_MAX, CHILD_MIN, Outline, PreferenceChecklist, UserQuery
from .prompts import (
    build_judge_content_prompt,
    build_judge_plan_prompt,
    load_rubrics,
)
from .report import FinalReport, extract_citations
from .retrieval import CorpusDocument
from .textutils import count_tokens, script_ratio

TOKEN_MIN = 100
TOKEN_MAX = 2000
CITATION_MAX = 12
LANGUAGE_RATIO = 0.8

JUDGE_TEMPERATURE = 0.0
JUDGE_MAX_OUTPUT = 2048

OUTLINE_JUDGE_CRITERIA = (
    ("guidance", "guide"),
    ("hierarchy", "hierarchical"),
    ("coherence", "coherence"),
)
PARAGRAPH_JUDGE_CRITERIA = ("relevance", "coverage", "depth", "novelty")

PLAN_JUDGE_INSTRUCTION = (
    "Create a well-organized hierarchical outline for a research report that "
    "answers the user's request, with a clear plan for every section."
)

# Generic five-point scale used when a checklist aspect supplies only a
# criterion description.
GENERIC_SCALE = {
    "1": "The report fails this criterion almost entirely.",
    "2": "The report shows major gaps on this criterion.",
    "3": "The report is adequate on this criterion with clear weaknesses.",
    "4": "The report is strong on this criterion with minor weaknesses.",
    "5": "The report fully satisfies this criterion.",
}


class RewardError(Exception):
    pass


class EmptyGolden(RewardError):
    pass


class JudgeParseFailure(RewardError):
    pass


@dataclass
class MetricScore:
    name: str
    value: float
    detail: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"score {self.name} out of [0,1]: {self.value}")


@dataclass
class GoldenSet:
    """Reference labels distilled from teacher trajectories."""

    doc_ids: set[str] = field(default_factory=set)
    citation_keys: set[str] = field(default_factory=set)
    terminate_label: bool | None = None


def rubric_to_unit(score: int) -> float:
    if not 1 <= score <= 5:
        raise JudgeParseFailure(f"rubric score {score} outside 1..5")
    return (score - 1) / 4


def outline_basic(outline: Outline, query: UserQuery) -> MetricScore:
    """Two equal-weight checks: child counts within bounds, language match.

    The top-level section list is held to the same 2..7 bound as any
    expanded node.
    """
    failures: list[str] = []
    counts = [("top level", len(outline.sections))]
    counts.extend(
        (str(pos), len(node.children))
        for pos, node in outline.ordered_sections()
        if node.children
    )
    for where, count in counts:
        if not CHILD_MIN <= count <= CHILD_MAX:
            failures.append(f"{where} has {count} children; expected {CHILD_MIN}..{CHILD_MAX}")
    structure_ok = not failures

    ratio = script_ratio(outline.all_text(), query.language)
    language_ok = ratio >= LANGUAGE_RATIO

    passed = int(structure_ok) + int(language_ok)
    detail = {
        "structure": {"passed": structure_ok, "failures": failures},
        "language": {"passed": language_ok, "ratio": ratio, "expected": query.language},
    }
    return MetricScore(name="outline_basic", value=passed / 2, detail=detail)


def paragraph_basic(content: str, query: UserQuery) -> MetricScore:
    """Three equal-weight checks: token length, citation count, language."""
    n_tokens = count_tokens(content)
    length_ok = TOKEN_MIN <= n_tokens <= TOKEN_MAX

    n_citations = len(extract_citations(content).keys)
    citations_ok = n_citations <= CITATION_MAX

    ratio = script_ratio(content, query.language)
    language_ok = ratio >= LANGUAGE_RATIO

    passed = int(length_ok) + int(citations_ok) + int(language_ok)
    detail = {
        "length": {"passed": length_ok, "tokens": n_tokens, "bounds": [TOKEN_MIN, TOKEN_MAX]},
        "citations": {"passed": citations_ok, "count": n_citations, "max": CITATION_MAX},
        "language": {"passed": language_ok, "ratio": ratio, "expected": query.language},
    }
    return MetricScore(name="paragraph_basic", value=passed / 3, detail=detail)


def citation_precision(
    gen_keys: set[str] | list[str],
    golden: GoldenSet,
    retrieved_ids: set[str] | list[str],
) -> MetricScore:
    """F1 against the golden citation set, zeroed by any hallucinated key.

    A key never retrieved is a hallucination and zeroes the whole score
    regardless of overlap. With no hallucination: both sets empty scores 1,
    exactly one empty scores 0, otherwise the usual F1.
    """
    gen = set(gen_keys)
    retrieved = set(retrieved_ids)
    hallucinated = sorted(gen - retrieved)
    if hallucinated:
        return MetricScore(
            name="citation_precision",
            value=0.0,
            detail={"hallucinated": hallucinated},
        )
    golden_keys = set(golden.citation_keys)
    if not gen and not golden_keys:
        return MetricScore(name="citation_precision", value=1.0, detail={"vacuous": True})
    if not gen or not golden_keys:
        return MetricScore(
            name="citation_precision",
            value=0.0,
            detail={"generated": len(gen), "golden": len(golden_keys)},
        )
    overlap = len(gen & golden_keys)
    precision = overlap / len(gen)
    recall = overlap / len(golden_keys)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MetricScore(
        name="citation_precision",
        value=f1,
        detail={"precision": precision, "recall": recall, "overlap": overlap},
    )


def retrieval_recall(
    retrieved_ids: set[str] | list[str], golden: GoldenSet
) -> MetricScore:
    if not golden.doc_ids:
        raise EmptyGolden("golden document set is empty")
    overlap = len(set(retrieved_ids) & golden.doc_ids)
    return MetricScore(
        name="retrieval_recall",
        value=overlap / len(golden.doc_ids),
        detail={"overlap": overlap, "golden": len(golden.doc_ids)},
    )


def termination_accuracy(predicted: bool, reference: bool) -> MetricScore:
    return MetricScore(
        name="termination_accuracy",
        value=1.0 if predicted == reference else 0.0,
        detail={"predicted": predicted, "reference": reference},
    )


_RESULT_RE = re.compile(r"\[RESULT\]\s*(-?\d+)")
_TRAILING_INT_RE = re.compile(r"(-?\d+)\s*$")


def parse_plan_judgment(text: str) -> int:
    """Last "[RESULT] n" marker in a plan-judge reply; n must be 1..5."""
    matches = _RESULT_RE.findall(text)
    if not matches:
        raise JudgeParseFailure("no [RESULT] integer in judge reply")
    score = int(matches[-1])
    if not 1 <= score <= 5:
        raise JudgeParseFailure(f"judge score {score} outside 1..5")
    return score


def parse_content_judgment(text: str) -> int:
    """Bare integer ending a content-judge reply; must be 1..5."""
    m = _TRAILING_INT_RE.search(text)
    if not m:
        raise JudgeParseFailure("judge reply does not end with an integer")
    score = int(m.group(1))
    if not 1 <= score <= 5:
        raise JudgeParseFailure(f"judge score {score} outside 1..5")
    return score


def _ask_judge(backend: Backend, prompt: str, parser) -> tuple[int, str]:
    """One judge call with a single retry on an unparseable reply."""
    last_error: JudgeParseFailure | None = None
    for _ in range(2):
        resp = backend.complete(
            ChatRequest(
                messages=[("user", prompt)],
                temperature=JUDGE_TEMPERATURE,
                max_output=JUDGE_MAX_OUTPUT,
            )
        )
        try:
            return parser(resp.content), resp.content
        except JudgeParseFailure as exc:
            last_error = exc
    assert last_error is not None
    raise last_error


def _rubric_block(entry: dict) -> str:
    lines = [entry["description"]]
    for score in ("1", "2", "3", "4", "5"):
        lines.append(f"Score {score}: {entry['scores'][score]}")
    return "\n".join(lines)


def _outline_sketch(outline: Outline) -> str:
    lines = [outline.title or "(untitled)"]
    for pos, node in outline.ordered_sections():
        dotted = ".".join(str(i) for i in pos.path)
        indent = "  " * (pos.depth - 1)
        line = f"{indent}{dotted}. {node.title}"
        if node.plan:
            line += f" - {node.plan}"
        lines.append(line)
    return "\n".join(lines)


def judge_outline(
    outline: Outline, reference_outline: Outline, backend: Backend
) -> list[MetricScore]:
    """Three rubric judgments of an outline against a score-5 reference."""
    rubrics = load_rubrics()
    scores: list[MetricScore] = []
    for metric_name, rubric_key in OUTLINE_JUDGE_CRITERIA:
        prompt = build_judge_plan_prompt(
            instruction=PLAN_JUDGE_INSTRUCTION,
            response=_outline_sketch(outline),
            reference_answer=_outline_sketch(reference_outline),
            rubric=_rubric_block(rubrics[rubric_key]),
        )
        raw_score, reply = _ask_judge(backend, prompt, parse_plan_judgment)
        scores.append(
            MetricScore(
                name=metric_name,
                value=rubric_to_unit(raw_score),
                detail={"raw": raw_score, "reply_tail": reply[-200:]},
            )
        )
    return scores


def judge_paragraph(content: str, topic: str, backend: Backend) -> list[MetricScore]:
    """Four rubric judgments of drafted prose, each ending in a bare 1..5."""
    rubrics = load_rubrics()
    scores: list[MetricScore] = []
    for criterion in PARAGRAPH_JUDGE_CRITERIA:
        entry = rubrics[criterion]
        prompt = build_judge_content_prompt(
            topic=topic,
            survey=content,
            criterion_description=entry["description"],
            score_descriptions=entry["scores"],
        )
        raw_score, reply = _ask_judge(backend, prompt, parse_content_judgment)
        scores.append(
            MetricScore(
                name=criterion,
                value=rubric_to_unit(raw_score),
                detail={"raw": raw_score, "reply_tail": reply[-200:]},
            )
        )
    return scores


_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?。！？])\s+")
_VERDICT_RE = re.compile(r"\b(SUPPORTED|UNSUPPORTED)\b")

FAITHFULNESS_PROMPT = """You are verifying whether a claim is supported by cited documents.

** Documents **
{documents}

** Claim **
{claim}

If every fact in the claim is backed by the documents, reply SUPPORTED.
Otherwise reply UNSUPPORTED. End your reply with that single word."""


def extract_claims(content: str) -> list[str]:
    """Sentence-level claim extraction: split on sentence enders, keep prose."""
    claims = []
    for part in _SENTENCE_SPLIT_RE.split(content):
        sentence = part.strip()
        if sentence and re.search(r"\w", sentence):
            claims.append(sentence)
    return claims


def _parse_verdict(text: str) -> bool:
    matches = _VERDICT_RE.findall(text)
    if not matches:
        raise JudgeParseFailure("no SUPPORTED/UNSUPPORTED verdict in judge reply")
    return matches[-1] == "SUPPORTED"


def faithfulness(
    content: str, cited_docs: list[CorpusDocument], backend: Backend
) -> MetricScore:
    """Fraction of sentence-level claims the judge finds supported.

    Content with no extractable claims passes vacuously.
    """
    claims = extract_claims(content)
    if not claims:
        return MetricScore(name="faithfulness", value=1.0, detail={"claims": 0})
    documents = "\n\n".join(f"[{d.id}] {d.title}\n{d.text}" for d in cited_docs)
    if not documents:
        documents = "(no documents)"
    supported = 0
    verdicts = []
    for claim in claims:
        prompt = FAITHFULNESS_PROMPT.format(documents=documents, claim=claim)
        ok, _ = _ask_judge(backend, prompt, _parse_verdict)
        verdicts.append(ok)
        if ok:
            supported += 1
    return MetricScore(
        name="faithfulness",
        value=supported / len(claims),
        detail={"claims": len(claims), "supported": supported, "verdicts": verdicts},
    )


def report_score(
    report: FinalReport, checklist: PreferenceChecklist, backend: Backend
) -> MetricScore:
    """Checklist-weighted judge score of the final report."""
    per_aspect = {}
    total = 0.0
    for aspect in checklist.aspects:
        prompt = build_judge_content_prompt(
            topic=report.title,
            survey=report.rendered,
            criterion_description=aspect.rubric,
            score_descriptions=GENERIC_SCALE,
        )
        raw_score, _ = _ask_judge(backend, prompt, parse_content_judgment)
        value = rubric_to_unit(raw_score)
        per_aspect[aspect.name] = {"raw": raw_score, "value": value, "weight": aspect.weight}
        total += aspect.weight * value
    # Guard against float drift pushing a weighted sum a hair out of range.
    total = min(max(total, 0.0), 1.0)
    return MetricScore(name="report_score", value=total, detail={"aspects": per_aspect})


def ability_score(scores: list[MetricScore], weights: list[float] | None = None, name: str = "ability") -> MetricScore:
    """Combine sub-metric scores; equal weights unless given."""
    if not scores:
        raise ValueError("no scores to combine")
    if weights is None:
        weights = [1.0 / len(scores)] * len(scores)
    if len(weights) != len(scores):
        raise ValueError("weights and scores differ in length")
    total = sum(w for w in weights)
    if total <= 0:
        raise ValueError("weights must sum to a positive value")
    value = sum(w * s.value for w, s in zip(weights, scores)) / total
    value = min(max(value, 0.0), 1.0)
    return MetricScore(
        name=name,
        value=value,
        detail={"parts": {s.name: s.value for s in scores}},
    )
