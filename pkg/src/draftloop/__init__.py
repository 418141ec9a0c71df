"""Iterative draft-and-deepen research report engine with trajectory tooling."""

from .actions import (
    Action,
    ActionEnvelope,
    Expand,
    Initialize,
    Search,
    Terminate,
    Write,
    parse_action,
    parse_envelope,
    serialize_action,
    validate_against_state,
)
from .backend import (
    ChatRequest,
    ChatResponse,
    HttpBackend,
    MockBackend,
    ReplayBackend,
    mock_from_script,
)
from .engine import (
    EngineConfig,
    deepen_or_terminate,
    draft_pending_sections,
    initialize_research,
    run,
    run_forced,
)
from .model import (
    Outline,
    PreferenceChecklist,
    ResearchState,
    RetrievalContext,
    SectionNode,
    SectionPosition,
    UserQuery,
)
from .report import FinalReport, extract_citations, render_report, validate_citations
from .retrieval import CorpusDocument, CorpusIndex, SearchHit, ingest, merge_context, search
from .rewards import (
    GoldenSet,
    MetricScore,
    citation_precision,
    faithfulness,
    judge_outline,
    judge_paragraph,
    outline_basic,
    paragraph_basic,
    report_score,
    retrieval_recall,
    termination_accuracy,
)
from .trajectory import (
    Trajectory,
    TrajectoryStep,
    balanced_sample,
    export_sft,
    prune,
)

__version__ = "0.1.0"

__all__ = [
    "Action",
    "ActionEnvelope",
    "ChatRequest",
    "ChatResponse",
    "CorpusDocument",
    "CorpusIndex",
    "EngineConfig",
    "Expand",
    "FinalReport",
    "GoldenSet",
    "HttpBackend",
    "Initialize",
    "MetricScore",
    "MockBackend",
    "Outline",
    "PreferenceChecklist",
    "ReplayBackend",
    "ResearchState",
    "RetrievalContext",
    "Search",
    "SearchHit",
    "SectionNode",
    "SectionPosition",
    "Terminate",
    "Trajectory",
    "TrajectoryStep",
    "UserQuery",
    "Write",
    "balanced_sample",
    "citation_precision",
    "deepen_or_terminate",
    "draft_pending_sections",
    "export_sft",
    "extract_citations",
    "faithfulness",
    "ingest",
    "initialize_research",
    "judge_outline",
    "judge_paragraph",
    "merge_context",
    "mock_from_script",
    "outline_basic",
    "paragraph_basic",
    "parse_action",
    "parse_envelope",
    "prune",
    "render_report",
    "report_score",
    "retrieval_recall",
    "run",
    "run_forced",
    "search",
    "serialize_action",
    "termination_accuracy",
    "validate_against_state",
    "validate_citations",
]
