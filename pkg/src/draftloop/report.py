"""Citation handling and final report assembly.

Drafted sections cite sources with ``\\cite{key}`` macros. Rendering rewrites
valid macros to bracketed numbers ordered by first appearance, marks keys that
were never retrieved as unresolved, and appends a References section covering
exactly the numbered citations.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .model import Outline, ResearchState, RetrievalContext, SectionPosition
from .retrieval import CorpusIndex


class ReportError(Exception):
    pass


class UndraftedLeaf(ReportError):
    def __init__(self, pos: SectionPosition):
        super().__init__(f"leaf {pos} has no content")
        self.position = pos


@dataclass
class CitationSet:
    """Citation keys in first-appearance order, plus a malformed-macro count."""

    keys: list[str] = field(default_factory=list)
    malformed: int = 0


@dataclass
class ReportStats:
    write_count: int = 0
    expand_count: int = 0
    sections_per_level: tuple[int, int, int] = (0, 0, 0)
    malformed_citations: int = 0
    hallucinated_citations: int = 0

    def to_dict(self) -> dict:
        return {
            "write_count": self.write_count,
            "expand_count": self.expand_count,
            "sections_per_level": list(self.sections_per_level),
            "malformed_citations": self.malformed_citations,
            "hallucinated_citations": self.hallucinated_citations,
        }


@dataclass
class FinalReport:
    title: str
    rendered: str
    bibliography: list[tuple[str, str, str]]  # (key, title, source)
    stats: ReportStats

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "rendered": self.rendered,
            "bibliography": [list(entry) for entry in self.bibliography],
            "stats": self.stats.to_dict(),
        }


_CITE_RE = re.compile(r"\\cite\{([^{}]*)\}")


def extract_citations(markdown: str) -> CitationSet:
    """Collect citation keys in first-appearance order, de-duplicated.

    Multi-key macros split on commas. A ``\\cite{`` opener that never closes
    cleanly is counted as malformed and contributes no keys.
    """
    cset = CitationSet()
    seen: set[str] = set()
    well_formed = 0
    for m in _CITE_RE.finditer(markdown):
        well_formed += 1
        for raw_key in m.group(1).split(","):
            key = raw_key.strip()
            if key and key not in seen:
                seen.add(key)
                cset.keys.append(key)
    cset.malformed = markdown.count("\\cite{") - well_formed
    return cset


def validate_citations(
    cset: CitationSet, ctx: RetrievalContext
) -> tuple[list[str], list[str]]:
    """Partition keys into (valid, hallucinated) by registry membership."""
    valid = [k for k in cset.keys if k in ctx.registry]
    hallucinated = [k for k in cset.keys if k not in ctx.registry]
    return valid, hallucinated


def _rewrite_citations(
    text: str, numbering: dict[str, int]
) -> str:
    def replace(m: re.Match) -> str:
        keys = [k.strip() for k in m.group(1).split(",")]
        keys = [k for k in keys if k]
        numbered = sorted({numbering[k] for k in keys if k in numbering})
        unresolved = [k for k in keys if k not in numbering]
        parts = []
        if numbered:
            parts.append("[" + ", ".join(str(n) for n in numbered) + "]")
        parts.extend(f"[unresolved: {k}]" for k in unresolved)
        return "".join(parts)

    return _CITE_RE.sub(replace, text)


def heading(pos: SectionPosition, title: str) -> str:
    dotted = ".".join(str(i) for i in pos.path)
    return "#" * (pos.depth + 1) + f" {dotted} {title}"


def render_report(state: ResearchState, corpus: CorpusIndex | None = None) -> FinalReport:
    """Assemble the deliverable markdown from a fully drafted outline.

    Pure: identical state and corpus produce identical bytes. Hallucinated
    keys (never present in the retrieval registry) render as a marked
    placeholder and are excluded from References.
    """
    outline = state.outline
    sections = outline.ordered_sections()
    for pos, node in sections:
        if not node.children and not node.content:
            raise UndraftedLeaf(pos)

    body_parts: list[str] = []
    for _, node in sections:
        if node.content:
            body_parts.append(node.content)
    full_body = "\n\n".join(body_parts)
    cset = extract_citations(full_body)
    valid, hallucinated = validate_citations(cset, state.context)
    numbering = {key: n for n, key in enumerate(valid, 1)}

    lines: list[str] = [f"# {outline.title}", ""]
    for pos, node in sections:
        lines.append(heading(pos, node.title))
        if node.content:
            lines.append("")
            lines.append(_rewrite_citations(node.content, numbering))
        lines.append("")

    bibliography: list[tuple[str, str, str]] = []
    if numbering:
        lines.append("## References")
        lines.append("")
        for key in valid:
            doc = corpus.get(key) if corpus is not None else None
            title = doc.title if doc is not None else key
            source = doc.source if doc is not None else ""
            bibliography.append((key, title, source))
            label = f"{source}:{key}" if source else key
            lines.append(f"[{numbering[key]}] {title}. {label}")
        lines.append("")

    stats = ReportStats(
        sections_per_level=outline.level_counts(),
        malformed_citations=cset.malformed,
        hallucinated_citations=len(hallucinated),
    )
    return FinalReport(
        title=outline.title,
        rendered="\n".join(lines),
        bibliography=bibliography,
        stats=stats,
    )


def render_draft(
    outline: Outline,
    write_log: list[SectionPosition] | None = None,
    section_budget: int = 0,
    recent_untruncated: int = 2,
) -> str:
    """Render the working draft with citation macros left intact.

    Used for snapshots and for the survey slot of prompts. A positive
    ``section_budget`` truncates each section's content to that many
    characters, except the most recently written ``recent_untruncated``
    sections, which stay whole so the model sees its latest prose exactly.
    """
    write_log = write_log or []
    recent = set(write_log[-recent_untruncated:]) if recent_untruncated > 0 else set()
    lines: list[str] = [f"# {outline.title}", ""]
    for pos, node in outline.ordered_sections():
        lines.append(heading(pos, node.title))
        if node.plan:
            lines.append(f"Plan: {node.plan}")
        if node.content:
            content = node.content
            if section_budget > 0 and pos not in recent and len(content) > section_budget:
                content = content[:section_budget] + " [truncated]"
            lines.append("")
            lines.append(content)
        lines.append("")
    return "\n".join(lines)


def report_stats(trajectory, state: ResearchState) -> ReportStats:
    """Count writes and expansions in a trajectory plus final section shape."""
    from .actions import Expand, Write

    write_count = 0
    expand_count = 0
    for step in trajectory.steps:
        if not step.applied:
            continue
        if isinstance(step.action, Write):
            write_count += 1
        elif isinstance(step.action, Expand):
            expand_count += 1
    return ReportStats(
        write_count=write_count,
        expand_count=expand_count,
        sections_per_level=state.outline.level_counts(),
    )
