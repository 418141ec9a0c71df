"""Typed action protocol between the engine and the model.

Model completions wrap a reasoning block and an action block:

    <thought> ... </thought><action> ... </action>

The action payload is JSON for every family except write, where raw markdown
is the normal form. Parsing is total: every input yields either an Action or
a typed ProtocolError, never an uncaught crash.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .model import (
    CHILD_MAX,
    CHILD_MIN,
    MAX_DEPTH,
    ResearchState,
    SectionPosition,
)

KEYWORD_MIN = 1
KEYWORD_MAX = 5


class ProtocolError(Exception):
    """Base class for action-protocol parse failures."""


class MissingAction(ProtocolError):
    pass


class UnterminatedBlock(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class UnknownActionName(ProtocolError):
    pass


class FieldMissing(ProtocolError):
    pass


class ArityViolation(ProtocolError):
    pass


@dataclass
class ActionEnvelope:
    """Extracted thought/action pair plus the prompt family that produced it."""

    thought: str
    payload: str
    kind_hint: str  # search | initialize | write | deepen
    repaired: bool = False


@dataclass
class Initialize:
    title: str
    sections: list[tuple[str, str]]  # (title, plan) pairs


@dataclass
class Search:
    keywords: list[str]


@dataclass
class Write:
    content: str
    position: SectionPosition | None = None
    title: str | None = None


@dataclass
class Expand:
    position: SectionPosition
    subsections: list[tuple[str, str]]


@dataclass
class Terminate:
    pass


Action = Initialize | Search | Write | Expand | Terminate


@dataclass(frozen=True)
class Violation:
    """A structural objection to applying an action; data, not an exception."""

    kind: str
    message: str


_THOUGHT_RE = re.compile(r"<thought>(.*?)</thought>", re.DOTALL)
_ACTION_RE = re.compile(r"<action>(.*?)</action>", re.DOTALL)


def parse_envelope(raw: str, kind_hint: str) -> ActionEnvelope:
    """Extract the last action block and the last thought block preceding it.

    Models sometimes restate blocks; the final action is taken as the final
    decision. A lone opening tag with no closing tag is reported as
    UnterminatedBlock rather than silently ignored.
    """
    actions = list(_ACTION_RE.finditer(raw))
    if not actions:
        if "<action>" in raw:
            raise UnterminatedBlock("opening <action> tag without closing tag")
        raise MissingAction("no <action> block in model output")
    chosen = actions[-1]
    thought = ""
    for m in _THOUGHT_RE.finditer(raw):
        if m.end() <= chosen.start():
            thought = m.group(1)
    return ActionEnvelope(
        thought=thought.strip(), payload=chosen.group(1).strip(), kind_hint=kind_hint
    )


def repair_json(text: str) -> str:
    """Best-effort cleanup of near-JSON: single-quoted strings, trailing commas.

    Walks the text once; double-quoted regions pass through untouched so that
    apostrophes inside proper strings survive.
    """
    out: list[str] = []
    i = 0
    n = len(text)
    in_string = False
    while i < n:
        ch = text[i]
        if in_string:
            out.append(ch)
            if ch == "\\" and i + 1 < n:
                out.append(text[i + 1])
                i += 2
                continue
            if ch == '"':
                in_string = False
            i += 1
            continue
        if ch == '"':
            in_string = True
            out.append(ch)
            i += 1
            continue
        if ch == "'":
            j = i + 1
            buf: list[str] = []
            while j < n:
                c = text[j]
                if c == "\\" and j + 1 < n:
                    buf.append(c)
                    buf.append(text[j + 1])
                    j += 2
                    continue
                if c == "'":
                    break
                buf.append(c)
                j += 1
            inner = "".join(buf).replace('"', '\\"')
            out.append('"' + inner + '"')
            i = j + 1
            continue
        if ch == ",":
            j = i + 1
            while j < n and text[j] in " \t\r\n":
                j += 1
            if j < n and text[j] in "}]":
                i += 1
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def _load_json(payload: str, env: ActionEnvelope) -> object:
    try:
        return json.loads(payload)
    except json.JSONDecodeError:
        pass
    try:
        value = json.loads(repair_json(payload))
    except json.JSONDecodeError as exc:
        raise MalformedPayload(f"payload is not JSON: {exc}") from None
    env.repaired = True
    return value


def _title_plan_pairs(items: object, what: str) -> list[tuple[str, str]]:
    if not isinstance(items, list):
        raise MalformedPayload(f"{what} must be a list")
    pairs: list[tuple[str, str]] = []
    for entry in items:
        if not isinstance(entry, dict):
            raise MalformedPayload(f"{what} entries must be objects")
        if entry.get("children") or entry.get("subsections") or entry.get("sections"):
            raise MalformedPayload(f"{what} must be a single level, no nesting")
        if "title" not in entry:
            raise FieldMissing(f"{what} entry missing title")
        title = entry["title"]
        plan = entry.get("plan", "")
        if not isinstance(title, str) or not isinstance(plan, str):
            raise MalformedPayload(f"{what} title and plan must be strings")
        pairs.append((title, plan))
    return pairs


def parse_action(env: ActionEnvelope) -> Action:
    """Turn an envelope payload into a typed Action.

    Write-family payloads are raw markdown unless they are a strict JSON
    object carrying a "content" field; no repair pass is attempted for them,
    since mangling prose that merely resembles JSON would corrupt the draft.
    Sets ``env.repaired`` when a lenient re-parse was needed.
    """
    payload = env.payload
    if env.kind_hint == "write":
        try:
            value = json.loads(payload)
        except json.JSONDecodeError:
            return Write(content=payload)
        if isinstance(value, dict) and "content" in value:
            return _build_write(value)
        return Write(content=payload)

    value = _load_json(payload, env)
    if not isinstance(value, dict):
        raise MalformedPayload("payload must be a JSON object")
    if "name" not in value:
        raise FieldMissing("payload missing name field")
    name = value["name"]

    if name == "initialize":
        if "title" not in value:
            raise FieldMissing("initialize missing title")
        if "sections" not in value:
            raise FieldMissing("initialize missing sections")
        title = value["title"]
        if not isinstance(title, str):
            raise MalformedPayload("initialize title must be a string")
        sections = _title_plan_pairs(value["sections"], "sections")
        if not sections:
            raise ArityViolation("initialize has no sections")
        return Initialize(title=title, sections=sections)

    if name == "search":
        if "keywords" not in value:
            raise FieldMissing("search missing keywords")
        keywords = value["keywords"]
        if not isinstance(keywords, list):
            raise MalformedPayload("keywords must be a list")
        if any(not isinstance(k, str) for k in keywords):
            raise MalformedPayload("keywords must be strings")
        if not KEYWORD_MIN <= len(keywords) <= KEYWORD_MAX:
            raise ArityViolation(
                f"{len(keywords)} keywords; expected {KEYWORD_MIN}..{KEYWORD_MAX}"
            )
        return Search(keywords=list(keywords))

    if name == "write":
        if "content" not in value:
            raise FieldMissing("write missing content")
        return _build_write(value)

    if name == "expand":
        if "position" not in value:
            raise FieldMissing("expand missing position")
        try:
            position = SectionPosition.parse(str(value["position"]))
        except ValueError as exc:
            raise MalformedPayload(str(exc)) from None
        if "subsections" not in value:
            raise FieldMissing("expand missing subsections")
        subsections = _title_plan_pairs(value["subsections"], "subsections")
        if not CHILD_MIN <= len(subsections) <= CHILD_MAX:
            raise ArityViolation(
                f"{len(subsections)} subsections; expected {CHILD_MIN}..{CHILD_MAX}"
            )
        return Expand(position=position, subsections=subsections)

    if name == "terminate":
        return Terminate()

    raise UnknownActionName(f"unknown action name {name!r}")


def _build_write(value: dict) -> Write:
    content = value["content"]
    if not isinstance(content, str):
        raise MalformedPayload("write content must be a string")
    position = None
    if value.get("position"):
        try:
            position = SectionPosition.parse(str(value["position"]))
        except ValueError as exc:
            raise MalformedPayload(str(exc)) from None
    title = value.get("title")
    if title is not None and not isinstance(title, str):
        raise MalformedPayload("write title must be a string")
    return Write(content=content, position=position, title=title)


def serialize_action(action: Action) -> str:
    """Canonical JSON for an action; parse_action inverts this exactly."""
    obj: dict
    if isinstance(action, Initialize):
        obj = {
            "name": "initialize",
            "title": action.title,
            "sections": [{"title": t, "plan": p} for t, p in action.sections],
        }
    elif isinstance(action, Search):
        obj = {"name": "search", "keywords": list(action.keywords)}
    elif isinstance(action, Write):
        obj = {"name": "write"}
        if action.position is not None:
            obj["position"] = str(action.position)
        if action.title is not None:
            obj["title"] = action.title
        obj["content"] = action.content
    elif isinstance(action, Expand):
        obj = {
            "name": "expand",
            "position": str(action.position),
            "subsections": [{"title": t, "plan": p} for t, p in action.subsections],
        }
    elif isinstance(action, Terminate):
        obj = {"name": "terminate"}
    else:
        raise TypeError(f"not an action: {action!r}")
    return json.dumps(obj, ensure_ascii=False)


def envelope_text(thought: str, action: Action) -> str:
    return f"<thought>{thought}</thought><action>{serialize_action(action)}</action>"


def validate_against_state(action: Action, state: ResearchState) -> list[Violation]:
    """Structural legality of applying ``action`` to ``state``; never mutates.

    An empty list means the action is applicable. Violations are returned as
    data so callers can log them into trajectories or turn them into
    reprompts; Terminate is always legal.
    """
    violations: list[Violation] = []
    outline = state.outline

    if isinstance(action, Initialize):
        if outline.sections:
            violations.append(
                Violation("AlreadyInitialized", "outline already has sections")
            )
        if not CHILD_MIN <= len(action.sections) <= CHILD_MAX:
            violations.append(
                Violation(
                    "CountViolation",
                    f"{len(action.sections)} top-level sections; "
                    f"expected {CHILD_MIN}..{CHILD_MAX}",
                )
            )
    elif isinstance(action, Expand):
        node = outline.section_at(action.position)
        if node is None:
            violations.append(
                Violation("UnknownPosition", f"{action.position} does not exist")
            )
        else:
            if action.position.depth >= MAX_DEPTH:
                violations.append(
                    Violation(
                        "DepthViolation",
                        f"{action.position} is at level {action.position.depth}; "
                        f"expansion beyond level {MAX_DEPTH} is not allowed",
                    )
                )
            if node.expanded:
                violations.append(
                    Violation("AlreadyExpanded", f"{action.position} is already expanded")
                )
        if not CHILD_MIN <= len(action.subsections) <= CHILD_MAX:
            violations.append(
                Violation(
                    "CountViolation",
                    f"{len(action.subsections)} subsections; "
                    f"expected {CHILD_MIN}..{CHILD_MAX}",
                )
            )
    elif isinstance(action, Write) and action.position is not None:
        node = outline.section_at(action.position)
        if node is None:
            violations.append(
                Violation("UnknownPosition", f"{action.position} does not exist")
            )
        elif node.content:
            violations.append(
                Violation("DraftOverwrite", f"{action.position} already has content")
            )
    return violations
