"""Prompt template assets and slot filling.

Templates ship as text files under assets/prompts and are loaded verbatim;
a checksum test pins their bytes. Slots are literal bracket markers such as
``[user query]``. Filling is strict: a slot present in the template must
receive a non-empty value, and every value handed in must land in a slot.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

from .model import ResearchState
from .report import render_draft
from .retrieval import CorpusDocument

ENGINE_TEMPLATES = ("search", "initialize", "write", "deepen")
JUDGE_TEMPLATES = ("judge_plan", "judge_content")

# Which bracket slots each engine template carries.
TEMPLATE_SLOTS: dict[str, tuple[str, ...]] = {
    "search": ("[user query]", "[current outline]", "[current instruction]"),
    "initialize": ("[user query]", "[current information]"),
    "write": (
        "[user query]",
        "[current survey]",
        "[current instruction]",
        "[current information]",
    ),
    "deepen": ("[user query]", "[current survey]"),
}

EMPTY_OUTLINE_PLACEHOLDER = "(no outline yet)"
NO_DOCUMENTS_PLACEHOLDER = "(no documents retrieved)"


class PromptError(Exception):
    pass


class UnknownTemplate(PromptError):
    pass


class MissingSlotValue(PromptError):
    pass


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in ENGINE_TEMPLATES + JUDGE_TEMPLATES:
        raise UnknownTemplate(f"no template named {name!r}")
    return (
        resources.files("draftloop.assets.prompts")
        .joinpath(f"{name}.txt")
        .read_text(encoding="utf-8")
    )


@lru_cache(maxsize=None)
def load_rubrics() -> dict:
    raw = (
        resources.files("draftloop.assets.prompts")
        .joinpath("rubrics.json")
        .read_text(encoding="utf-8")
    )
    return json.loads(raw)


def fill_slots(template: str, values: dict[str, str]) -> str:
    """Replace each bracket slot exactly once; missing or empty values raise."""
    out = template
    for slot, value in values.items():
        if slot not in out:
            raise MissingSlotValue(f"template has no slot {slot}")
        if not value:
            raise MissingSlotValue(f"empty value for slot {slot}")
        out = out.replace(slot, value, 1)
    return out


def render_documents(docs: list[CorpusDocument]) -> str:
    """Render retrieved documents for the information slot, citation key first."""
    if not docs:
        return ""
    parts = []
    for doc in docs:
        parts.append(f"[{doc.id}] {doc.title}\n{doc.text}")
    return "\n\n".join(parts)


def build_prompt(
    template_id: str,
    state: ResearchState,
    instruction: str = "",
    info: str = "",
    section_budget: int = 0,
    recent_untruncated: int = 2,
) -> str:
    """Fill an engine template from the current research state.

    The outline and survey slots both carry the working draft rendering so
    retrieval and deepening decisions condition on the accumulated text, not
    just section titles. Empty renders fall back to explicit placeholders
    rather than leaving a slot blank.
    """
    if template_id not in ENGINE_TEMPLATES:
        raise UnknownTemplate(f"no engine template named {template_id!r}")
    template = load_template(template_id)
    slots = TEMPLATE_SLOTS[template_id]

    draft = ""
    if state.outline.sections or state.outline.title:
        draft = render_draft(
            state.outline,
            state.write_log,
            section_budget=section_budget,
            recent_untruncated=recent_untruncated,
        )
    if not draft.strip():
        draft = EMPTY_OUTLINE_PLACEHOLDER

    values: dict[str, str] = {}
    for slot in slots:
        if slot == "[user query]":
            values[slot] = state.query.text
        elif slot in ("[current outline]", "[current survey]"):
            values[slot] = draft
        elif slot == "[current instruction]":
            values[slot] = instruction
        elif slot == "[current information]":
            values[slot] = info
    filled = fill_slots(template, values)
    for slot in (
        "[user query]",
        "[current outline]",
        "[current survey]",
        "[current instruction]",
        "[current information]",
    ):
        if slot in filled:
            raise MissingSlotValue(f"slot {slot} left unfilled in {template_id}")
    return filled


def build_judge_plan_prompt(
    instruction: str, response: str, reference_answer: str, rubric: str
) -> str:
    template = load_template("judge_plan")
    values = {
        "{instruction}": instruction,
        "{response}": response,
        "{reference_answer}": reference_answer,
        "{rubric}": rubric,
    }
    out = template
    for slot, value in values.items():
        if slot not in out:
            raise MissingSlotValue(f"template has no slot {slot}")
        if not value:
            raise MissingSlotValue(f"empty value for slot {slot}")
        out = out.replace(slot, value)
    return out


def build_judge_content_prompt(
    topic: str,
    survey: str,
    criterion_description: str,
    score_descriptions: dict[str, str],
) -> str:
    """Fill the content-judge template; the topic slot appears twice."""
    template = load_template("judge_content")
    if not topic or not survey or not criterion_description:
        raise MissingSlotValue("topic, survey and criterion description are required")
    out = template.replace("[TOPIC]", topic)
    out = out.replace("[SURVEY]", survey, 1)
    out = out.replace("[Criterion Description]", criterion_description, 1)
    for score in ("1", "2", "3", "4", "5"):
        slot = f"[Score {score} Description]"
        desc = score_descriptions.get(score, "")
        if not desc:
            raise MissingSlotValue(f"missing description for score {score}")
        out = out.replace(slot, desc, 1)
    return out
