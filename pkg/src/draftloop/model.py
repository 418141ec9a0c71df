"""Domain model for a research run: query, dynamic outline tree, retrieval context.

The outline is a depth-limited section tree. Structural invariants (depth cap,
child-count bounds, append-only drafts) are enforced by the mutation methods,
not by the constructors: scorers must be able to hold structurally invalid
outlines that a model proposed, exactly so they can penalize them.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field

from .textutils import dominant_script

MAX_DEPTH = 3
CHILD_MIN = 2
CHILD_MAX = 7

_POSITION_RE = re.compile(r"^section-(\d+(?:\.\d+)*)$")


class OutlineError(Exception):
    """Base class for structural outline violations."""


class UnknownPosition(OutlineError):
    pass


class DepthViolation(OutlineError):
    pass


class AlreadyExpanded(OutlineError):
    pass


class CountViolation(OutlineError):
    pass


class DraftOverwrite(OutlineError):
    pass


@dataclass(frozen=True, order=True)
class SectionPosition:
    """1-based index path addressing a node, rendered as ``section-x.y.z``."""

    path: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.path or len(self.path) > MAX_DEPTH:
            raise ValueError(f"position path length must be 1..{MAX_DEPTH}: {self.path!r}")
        if any(i < 1 for i in self.path):
            raise ValueError(f"position indices are 1-based: {self.path!r}")

    @classmethod
    def parse(cls, text: str) -> "SectionPosition":
        m = _POSITION_RE.match(text.strip())
        if not m:
            raise ValueError(f"not a section position: {text!r}")
        return cls(tuple(int(p) for p in m.group(1).split(".")))

    @property
    def depth(self) -> int:
        return len(self.path)

    def child(self, index: int) -> "SectionPosition":
        return SectionPosition(self.path + (index,))

    def __str__(self) -> str:
        return "section-" + ".".join(str(i) for i in self.path)


@dataclass(frozen=True)
class ChecklistAspect:
    name: str
    weight: float
    rubric: str


@dataclass
class PreferenceChecklist:
    """Weighted scoring aspects for the final report; weights sum to 1."""

    aspects: list[ChecklistAspect]

    def __post_init__(self) -> None:
        if not self.aspects:
            raise ValueError("checklist needs at least one aspect")
        if any(a.weight < 0 for a in self.aspects):
            raise ValueError("aspect weights must be non-negative")
        total = sum(a.weight for a in self.aspects)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"aspect weights must sum to 1, got {total}")

    def to_dict(self) -> list[dict]:
        return [{"name": a.name, "weight": a.weight, "rubric": a.rubric} for a in self.aspects]

    @classmethod
    def from_dict(cls, data: list[dict]) -> "PreferenceChecklist":
        return cls([ChecklistAspect(d["name"], float(d["weight"]), d["rubric"]) for d in data])


@dataclass
class UserQuery:
    """The research question, with a script tag inferred from its characters."""

    text: str
    language: str = ""
    checklist: PreferenceChecklist | None = None

    def __post_init__(self) -> None:
        self.text = self.text.strip()
        if not self.text:
            raise ValueError("query text is empty")
        if not self.language:
            self.language = dominant_script(self.text)

    def to_dict(self) -> dict:
        out: dict = {"text": self.text, "language": self.language}
        if self.checklist is not None:
            out["checklist"] = self.checklist.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "UserQuery":
        checklist = None
        if data.get("checklist"):
            checklist = PreferenceChecklist.from_dict(data["checklist"])
        return cls(text=data["text"], language=data.get("language", ""), checklist=checklist)


@dataclass
class SectionNode:
    """One outline section: a title, a writing plan, and optionally drafted content."""

    title: str
    plan: str
    content: str | None = None
    children: list["SectionNode"] = field(default_factory=list)

    @property
    def expanded(self) -> bool:
        return bool(self.children)

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "plan": self.plan,
            "content": self.content,
            "children": [c.to_dict() for c in self.children],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SectionNode":
        return cls(
            title=data["title"],
            plan=data.get("plan", ""),
            content=data.get("content"),
            children=[cls.from_dict(c) for c in data.get("children", [])],
        )


@dataclass
class Outline:
    """Dynamic section tree, at most three levels deep."""

    title: str
    sections: list[SectionNode] = field(default_factory=list)

    def section_at(self, pos: SectionPosition) -> SectionNode | None:
        nodes = self.sections
        node: SectionNode | None = None
        for index in pos.path:
            if index > len(nodes):
                return None
            node = nodes[index - 1]
            nodes = node.children
        return node

    def ordered_sections(self) -> list[tuple[SectionPosition, SectionNode]]:
        """Depth-first pre-order traversal with positions."""
        out: list[tuple[SectionPosition, SectionNode]] = []

        def walk(nodes: list[SectionNode], prefix: tuple[int, ...]) -> None:
            for i, node in enumerate(nodes, 1):
                pos = SectionPosition(prefix + (i,))
                out.append((pos, node))
                walk(node.children, pos.path)

        walk(self.sections, ())
        return out

    def pending_sections(self) -> list[SectionPosition]:
        """Leaf positions without content, in depth-first order: the next drafting targets."""
        return [
            pos
            for pos, node in self.ordered_sections()
            if not node.children and not node.content
        ]

    def insert_subsections(
        self, pos: SectionPosition, subs: list[tuple[str, str]]
    ) -> None:
        """Expand the node at ``pos`` with new (title, plan) children.

        Existing node positions never change: children are only ever appended
        under a previously childless node.
        """
        node = self.section_at(pos)
        if node is None:
            raise UnknownPosition(f"{pos} does not exist")
        if pos.depth >= MAX_DEPTH:
            raise DepthViolation(f"{pos} is at level {pos.depth}; cannot expand beyond level {MAX_DEPTH}")
        if node.expanded:
            raise AlreadyExpanded(f"{pos} is already expanded")
        if not CHILD_MIN <= len(subs) <= CHILD_MAX:
            raise CountViolation(
                f"{len(subs)} subsections at {pos}; expected {CHILD_MIN}..{CHILD_MAX}"
            )
        node.children = [SectionNode(title=t, plan=p) for t, p in subs]

    def attach_content(self, pos: SectionPosition, content: str) -> None:
        """Set a node's drafted text. Drafts are append-only: rewriting raises."""
        node = self.section_at(pos)
        if node is None:
            raise UnknownPosition(f"{pos} does not exist")
        if node.content:
            raise DraftOverwrite(f"{pos} already has content")
        node.content = content

    def node_count(self) -> int:
        return len(self.ordered_sections())

    def level_counts(self) -> tuple[int, int, int]:
        counts = [0, 0, 0]
        for pos, _ in self.ordered_sections():
            counts[pos.depth - 1] += 1
        return (counts[0], counts[1], counts[2])

    def all_text(self) -> str:
        parts = [self.title]
        for _, node in self.ordered_sections():
            parts.append(node.title)
            parts.append(node.plan)
        return "\n".join(p for p in parts if p)

    def to_dict(self) -> dict:
        return {"title": self.title, "sections": [s.to_dict() for s in self.sections]}

    @classmethod
    def from_dict(cls, data: dict) -> "Outline":
        return cls(
            title=data["title"],
            sections=[SectionNode.from_dict(s) for s in data.get("sections", [])],
        )


@dataclass
class RetrievalContext:
    """Per-section retrieved document ids plus a global append-only citation registry."""

    per_section: dict[SectionPosition, list[str]] = field(default_factory=dict)
    registry: dict[str, str] = field(default_factory=dict)
    background: list[str] = field(default_factory=list)

    def add(self, pos: SectionPosition, doc_ids: list[str], dedup: bool = False) -> list[str]:
        """Append ids under ``pos``; returns the ids actually added.

        With ``dedup``, ids already present anywhere in the context are skipped.
        The registry always gains an entry per new id.
        """
        added: list[str] = []
        bucket = self.per_section.setdefault(pos, [])
        for doc_id in doc_ids:
            if dedup and doc_id in self.registry:
                continue
            if doc_id not in bucket:
                bucket.append(doc_id)
                added.append(doc_id)
            self.registry.setdefault(doc_id, doc_id)
        return added

    def add_background(self, doc_ids: list[str]) -> None:
        for doc_id in doc_ids:
            if doc_id not in self.background:
                self.background.append(doc_id)
            self.registry.setdefault(doc_id, doc_id)

    def section_ids(self, pos: SectionPosition) -> list[str]:
        return list(self.per_section.get(pos, []))

    def to_dict(self) -> dict:
        return {
            "per_section": {str(pos): ids for pos, ids in self.per_section.items()},
            "registry": dict(self.registry),
            "background": list(self.background),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RetrievalContext":
        return cls(
            per_section={
                SectionPosition.parse(key): list(ids)
                for key, ids in data.get("per_section", {}).items()
            },
            registry=dict(data.get("registry", {})),
            background=list(data.get("background", [])),
        )


@dataclass
class ResearchState:
    """Everything the policy observes: query, outline, draft, retrieval context."""

    query: UserQuery
    outline: Outline
    context: RetrievalContext = field(default_factory=RetrievalContext)
    loop_index: int = 0
    deepen_count: int = 0
    # Positions in the order their content was attached; drives the
    # "most recent sections stay untruncated" rendering rule.
    write_log: list[SectionPosition] = field(default_factory=list)

    def pending_sections(self) -> list[SectionPosition]:
        return self.outline.pending_sections()

    def copy_outline(self) -> Outline:
        return copy.deepcopy(self.outline)

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "outline": self.outline.to_dict(),
            "context": self.context.to_dict(),
            "loop_index": self.loop_index,
            "deepen_count": self.deepen_count,
            "write_log": [str(p) for p in self.write_log],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ResearchState":
        return cls(
            query=UserQuery.from_dict(data["query"]),
            outline=Outline.from_dict(data["outline"]),
            context=RetrievalContext.from_dict(data.get("context", {})),
            loop_index=int(data.get("loop_index", 0)),
            deepen_count=int(data.get("deepen_count", 0)),
            write_log=[SectionPosition.parse(p) for p in data.get("write_log", [])],
        )
