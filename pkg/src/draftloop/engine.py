"""The draft-and-deepen policy loop.

One run alternates three phases against a chat backend and a local corpus:

1. Initialization: one background search, then a sparse top-level outline.
2. Drafting: for every pending leaf, a targeted search conditioned on the
   accumulated draft, then a grounded write attaching that leaf's content.
3. Deepening: the model either expands exactly one section into subsections,
   which reopens drafting for the new leaves, or terminates the run.

Deepening is capped; the cap fires even against a model that always expands.
A forced collection mode rejects termination until a requested number of
expansions has happened, snapshotting the draft after every drafting pass.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .actions import (
    Action,
    Expand,
    Initialize,
    ProtocolError,
    Search,
    Terminate,
    Violation,
    Write,
    parse_action,
    parse_envelope,
    validate_against_state,
)
from .backend import Backend, BackendError, ChatRequest
from .model import (
    CountViolation,
    Outline,
    OutlineError,
    ResearchState,
    SectionNode,
    SectionPosition,
    UserQuery,
)
from .prompts import (
    NO_DOCUMENTS_PLACEHOLDER,
    build_prompt,
    render_documents,
)
from .report import ReportError, extract_citations, render_draft, render_report, report_stats
from .retrieval import CorpusError, CorpusIndex, Embedder, EmptyIndex, merge_context, search
from .trajectory import (
    STAGE_DEFAULT_ABILITY,
    DraftSnapshot,
    Trajectory,
    TrajectoryStep,
    ability_for_action,
)

INITIAL_SEARCH_INSTRUCTION = (
    "Research the user query and gather background information for the report."
)

DEFAULT_TEMPERATURES = {
    "search": 0.0,
    "initialize": 0.0,
    "write": 0.7,
    "deepen": 0.0,
}


class EngineError(Exception):
    pass


class ActionKindMismatch(EngineError):
    pass


class EmptyWrite(EngineError):
    pass


class EngineAbort(EngineError):
    """Unrecoverable failure; carries the partial trajectory for persistence."""

    def __init__(
        self,
        message: str,
        trajectory: Trajectory | None = None,
        stage: str = "",
        position: SectionPosition | None = None,
        cause: Exception | None = None,
    ) -> None:
        super().__init__(message)
        self.trajectory = trajectory
        self.stage = stage
        self.position = position
        self.cause = cause


@dataclass
class EngineConfig:
    max_depth: int = 3
    max_deepen: int = 12
    top_k: int = 8
    keyword_min: int = 1
    keyword_max: int = 5
    subsection_min: int = 2
    subsection_max: int = 7
    temperatures: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_TEMPERATURES)
    )
    max_output: int = 4096
    forced_mode: bool = False
    forced_expansions: int = 0
    dedup_retrieval: bool = False
    survey_section_budget: int = 1200
    survey_recent_untruncated: int = 2
    reprompt_limit: int = 1
    forced_reprompt_limit: int = 3

    def __post_init__(self) -> None:
        if not 1 <= self.max_depth <= 3:
            raise ValueError("max_depth must be between 1 and 3")
        if self.max_deepen < 1:
            raise ValueError("max_deepen must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if not 1 <= self.keyword_min <= self.keyword_max:
            raise ValueError("keyword bounds must satisfy 1 <= min <= max")
        if not 1 <= self.subsection_min <= self.subsection_max:
            raise ValueError("subsection bounds must satisfy 1 <= min <= max")
        if self.max_output < 1:
            raise ValueError("max_output must be positive")
        missing = set(DEFAULT_TEMPERATURES) - set(self.temperatures)
        if missing:
            raise ValueError(f"temperatures missing stages: {sorted(missing)}")
        if self.forced_mode and not 1 <= self.forced_expansions <= self.max_deepen:
            raise ValueError(
                "forced_expansions must be between 1 and max_deepen in forced mode"
            )

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "max_deepen": self.max_deepen,
            "top_k": self.top_k,
            "keyword_min": self.keyword_min,
            "keyword_max": self.keyword_max,
            "subsection_min": self.subsection_min,
            "subsection_max": self.subsection_max,
            "temperatures": dict(self.temperatures),
            "max_output": self.max_output,
            "forced_mode": self.forced_mode,
            "forced_expansions": self.forced_expansions,
            "dedup_retrieval": self.dedup_retrieval,
            "survey_section_budget": self.survey_section_budget,
            "survey_recent_untruncated": self.survey_recent_untruncated,
            "reprompt_limit": self.reprompt_limit,
            "forced_reprompt_limit": self.forced_reprompt_limit,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        return cls(**known)

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class Expanded:
    position: SectionPosition


@dataclass
class Terminated:
    cap_override: bool = False
    forced_stop: bool = False
    error: str | None = None


def _complete_and_record(
    backend: Backend,
    cfg: EngineConfig,
    trajectory: Trajectory,
    state: ResearchState,
    stage: str,
    prompt: str,
) -> TrajectoryStep:
    """One model call, recorded whether or not its output parses."""
    req = ChatRequest(
        messages=[("user", prompt)],
        temperature=cfg.temperatures[stage],
        max_output=cfg.max_output,
    )
    resp = backend.complete(req)
    step = TrajectoryStep(
        step_index=0,
        loop_index=state.loop_index,
        stage=stage,
        ability=STAGE_DEFAULT_ABILITY[stage],
        prompt=prompt,
        raw_output=resp.content,
    )
    try:
        env = parse_envelope(resp.content, stage)
        action = parse_action(env)
        step.action = action
        step.repaired = env.repaired
        step.ability = ability_for_action(action)
    except ProtocolError as exc:
        step.error = f"{type(exc).__name__}: {exc}"
    trajectory.add_step(step)
    return step


def _require(step: TrajectoryStep, stage: str, *kinds: type) -> Action:
    if step.error is not None:
        raise ProtocolError(f"{stage}: {step.error}")
    assert step.action is not None
    if not isinstance(step.action, kinds):
        names = " or ".join(k.__name__ for k in kinds)
        raise ActionKindMismatch(
            f"{stage}: expected {names}, got {type(step.action).__name__}"
        )
    return step.action


def _raise_violations(violations: list[Violation], stage: str) -> None:
    if not violations:
        return
    first = violations[0]
    exc_class = {
        "CountViolation": CountViolation,
        "UnknownPosition": OutlineError,
        "DepthViolation": OutlineError,
        "AlreadyExpanded": OutlineError,
        "DraftOverwrite": OutlineError,
    }.get(first.kind, EngineError)
    raise exc_class(f"{stage}: {first.kind}: {first.message}")


def _run_search(
    state: ResearchState,
    index: CorpusIndex,
    cfg: EngineConfig,
    keywords: list[str],
    embedder: Embedder | None,
):
    if not cfg.keyword_min <= len(keywords) <= cfg.keyword_max:
        raise CountViolation(
            f"{len(keywords)} keywords; configured bounds are "
            f"{cfg.keyword_min}..{cfg.keyword_max}"
        )
    return search(index, keywords, top_k=cfg.top_k, embedder=embedder)


def initialize_research(
    query: UserQuery,
    backend: Backend,
    index: CorpusIndex,
    cfg: EngineConfig | None = None,
    trajectory: Trajectory | None = None,
    embedder: Embedder | None = None,
) -> ResearchState:
    """Background search followed by the sparse top-level outline.

    Parse and validation failures raise after the offending step has been
    recorded, so aborted runs still leave a usable trajectory.
    """
    cfg = cfg or EngineConfig()
    if len(index) == 0:
        raise EmptyIndex("cannot initialize against an empty corpus")
    if trajectory is None:
        trajectory = Trajectory(
            query=query, fingerprint=cfg.fingerprint(), config=cfg.to_dict()
        )
    state = ResearchState(query=query, outline=Outline(title=""))

    prompt = build_prompt(
        "search",
        state,
        instruction=INITIAL_SEARCH_INSTRUCTION,
        section_budget=cfg.survey_section_budget,
        recent_untruncated=cfg.survey_recent_untruncated,
    )
    step = _complete_and_record(backend, cfg, trajectory, state, "search", prompt)
    action = _require(step, "search", Search)
    hits = _run_search(state, index, cfg, action.keywords, embedder)
    doc_ids = [h.doc_id for h in hits]
    state.context.add_background(doc_ids)
    step.observation = "retrieved: " + (", ".join(doc_ids) if doc_ids else "(none)")
    step.applied = True

    docs = [index.docs[i] for i in doc_ids]
    info = render_documents(docs) or NO_DOCUMENTS_PLACEHOLDER
    prompt = build_prompt("initialize", state, info=info)
    step = _complete_and_record(backend, cfg, trajectory, state, "initialize", prompt)
    action = _require(step, "initialize", Initialize)
    violations = validate_against_state(action, state)
    _raise_violations(violations, "initialize")
    if not cfg.subsection_min <= len(action.sections) <= cfg.subsection_max:
        raise CountViolation(
            f"initialize: {len(action.sections)} top-level sections; configured "
            f"bounds are {cfg.subsection_min}..{cfg.subsection_max}"
        )
    state.outline = Outline(
        title=action.title,
        sections=[SectionNode(title=t, plan=p) for t, p in action.sections],
    )
    step.observation = f"outline created with {len(action.sections)} sections"
    step.applied = True
    return state


def draft_pending_sections(
    state: ResearchState,
    backend: Backend,
    index: CorpusIndex,
    cfg: EngineConfig | None = None,
    trajectory: Trajectory | None = None,
    embedder: Embedder | None = None,
) -> ResearchState:
    """Search-then-write every pending leaf, depth-first.

    Each search sees the accumulated draft, so later queries condition on
    earlier prose. Citations of documents the section never retrieved are
    flagged in the step observation but the content still lands; scoring,
    not the engine, penalizes them.
    """
    cfg = cfg or EngineConfig()
    if trajectory is None:
        trajectory = Trajectory(
            query=state.query, fingerprint=cfg.fingerprint(), config=cfg.to_dict()
        )
    pending = state.pending_sections()
    if not pending:
        raise EngineError("drafting pass requires at least one pending section")

    for pos in pending:
        node = state.outline.section_at(pos)
        assert node is not None
        instruction = f"Research for section {pos}: {node.plan}"
        prompt = build_prompt(
            "search",
            state,
            instruction=instruction,
            section_budget=cfg.survey_section_budget,
            recent_untruncated=cfg.survey_recent_untruncated,
        )
        step = _complete_and_record(backend, cfg, trajectory, state, "search", prompt)
        action = _require(step, f"search at {pos}", Search)
        hits = _run_search(state, index, cfg, action.keywords, embedder)
        merge_context(state.context, pos, hits, dedup=cfg.dedup_retrieval, index=index)
        doc_ids = [h.doc_id for h in hits]
        step.observation = "retrieved: " + (", ".join(doc_ids) if doc_ids else "(none)")
        step.applied = True

        docs = [index.docs[i] for i in doc_ids]
        info = render_documents(docs) or NO_DOCUMENTS_PLACEHOLDER
        instruction = f"Write the section {pos} ({node.title}): {node.plan}"
        prompt = build_prompt(
            "write",
            state,
            instruction=instruction,
            info=info,
            section_budget=cfg.survey_section_budget,
            recent_untruncated=cfg.survey_recent_untruncated,
        )
        step = _complete_and_record(backend, cfg, trajectory, state, "write", prompt)
        action = _require(step, f"write at {pos}", Write)
        content = action.content.strip()
        if not content:
            raise EmptyWrite(f"write at {pos} returned empty content")
        notes = []
        if action.position is not None and action.position != pos:
            notes.append(f"model-specified position {action.position} ignored")
        cited = extract_citations(content).keys
        unretrieved = [k for k in cited if k not in state.context.section_ids(pos)]
        if unretrieved:
            notes.append("cited outside this section's retrieval: " + ", ".join(unretrieved))
        state.outline.attach_content(pos, content)
        state.write_log.append(pos)
        step.observation = f"drafted {pos}" + ("; " + "; ".join(notes) if notes else "")
        step.applied = True
    return state


def deepen_or_terminate(
    state: ResearchState,
    backend: Backend,
    cfg: EngineConfig | None = None,
    trajectory: Trajectory | None = None,
) -> Expanded | Terminated:
    """One deepening decision: expand exactly one section, or stop.

    Invalid actions get a bounded number of reprompts with the violation
    appended. In normal mode exhaustion forces termination with the error
    recorded; in forced mode it aborts the run. A valid expansion beyond the
    deepening cap is overridden into termination and flagged.
    """
    cfg = cfg or EngineConfig()
    if trajectory is None:
        trajectory = Trajectory(
            query=state.query, fingerprint=cfg.fingerprint(), config=cfg.to_dict()
        )
    base_prompt = build_prompt(
        "deepen",
        state,
        section_budget=cfg.survey_section_budget,
        recent_untruncated=cfg.survey_recent_untruncated,
    )
    limit = cfg.forced_reprompt_limit if cfg.forced_mode else cfg.reprompt_limit
    prompt = base_prompt
    violation_text = ""

    for attempt in range(limit + 1):
        step = _complete_and_record(backend, cfg, trajectory, state, "deepen", prompt)
        if step.error is not None:
            violation_text = step.error
        elif isinstance(step.action, Terminate):
            if cfg.forced_mode and state.deepen_count < cfg.forced_expansions:
                violation_text = (
                    "TerminateRejected: this run must expand "
                    f"{cfg.forced_expansions} times; only {state.deepen_count} done"
                )
                step.observation = "terminate rejected in forced mode"
            else:
                step.applied = True
                step.observation = "run terminated"
                return Terminated()
        elif isinstance(step.action, Expand):
            violations = validate_against_state(step.action, state)
            if not violations and step.action.position.depth >= cfg.max_depth:
                violations = [
                    Violation(
                        "DepthViolation",
                        f"{step.action.position} is at configured depth limit "
                        f"{cfg.max_depth}",
                    )
                ]
            if not violations and not (
                cfg.subsection_min
                <= len(step.action.subsections)
                <= cfg.subsection_max
            ):
                violations = [
                    Violation(
                        "CountViolation",
                        f"{len(step.action.subsections)} subsections; configured "
                        f"bounds are {cfg.subsection_min}..{cfg.subsection_max}",
                    )
                ]
            if not violations:
                if state.deepen_count >= cfg.max_deepen:
                    step.observation = (
                        f"deepening cap {cfg.max_deepen} reached; expansion overridden"
                    )
                    return Terminated(cap_override=True)
                state.outline.insert_subsections(
                    step.action.position, step.action.subsections
                )
                state.deepen_count += 1
                state.loop_index += 1
                step.applied = True
                step.observation = (
                    f"expanded {step.action.position} into "
                    f"{len(step.action.subsections)} subsections"
                )
                return Expanded(position=step.action.position)
            violation_text = "; ".join(f"{v.kind}: {v.message}" for v in violations)
            step.observation = f"invalid expansion: {violation_text}"
        else:
            violation_text = (
                "ActionKindMismatch: expected expand or terminate, got "
                f"{type(step.action).__name__}"
            )
            step.observation = violation_text
        if attempt < limit:
            prompt = (
                base_prompt
                + "\n\n[Your previous action was invalid: "
                + violation_text
                + ". Choose a valid action.]"
            )

    if cfg.forced_mode:
        raise EngineAbort(
            f"no valid expansion after {limit} reprompts: {violation_text}",
            trajectory=trajectory,
            stage="deepen",
        )
    step.observation += "; engine forced termination after invalid deepening actions"
    return Terminated(forced_stop=True, error=violation_text)


def _capture_snapshot(trajectory: Trajectory, state: ResearchState) -> DraftSnapshot:
    snapshot = DraftSnapshot(
        loop_index=state.loop_index,
        outline=state.copy_outline(),
        rendered=render_draft(state.outline, state.write_log),
    )
    trajectory.add_snapshot(snapshot)
    return snapshot


_RECOVERABLE = (
    ProtocolError,
    OutlineError,
    CorpusError,
    BackendError,
    ReportError,
    EngineError,
)


def run(
    query: UserQuery,
    backend: Backend,
    index: CorpusIndex,
    cfg: EngineConfig | None = None,
    embedder: Embedder | None = None,
):
    """Full policy loop; returns (FinalReport, Trajectory).

    Any stage failure raises EngineAbort carrying the partial trajectory so
    callers can persist what was collected.
    """
    cfg = cfg or EngineConfig()
    if cfg.forced_mode:
        raise ValueError("run() is for normal mode; use run_forced()")
    trajectory = Trajectory(
        query=query, fingerprint=cfg.fingerprint(), config=cfg.to_dict()
    )
    try:
        state = initialize_research(
            query, backend, index, cfg, trajectory=trajectory, embedder=embedder
        )
        while True:
            draft_pending_sections(
                state, backend, index, cfg, trajectory=trajectory, embedder=embedder
            )
            _capture_snapshot(trajectory, state)
            outcome = deepen_or_terminate(state, backend, cfg, trajectory=trajectory)
            if isinstance(outcome, Terminated):
                break
        report = render_report(state, index)
    except EngineAbort:
        raise
    except _RECOVERABLE as exc:
        raise EngineAbort(str(exc), trajectory=trajectory, cause=exc) from exc
    stats = report_stats(trajectory, state)
    stats.malformed_citations = report.stats.malformed_citations
    stats.hallucinated_citations = report.stats.hallucinated_citations
    report.stats = stats
    trajectory.final_report = report
    return report, trajectory


def run_forced(
    query: UserQuery,
    backend: Backend,
    index: CorpusIndex,
    cfg: EngineConfig,
    embedder: Embedder | None = None,
):
    """Collection mode: reject termination until N expansions have happened.

    Returns (snapshots, trajectory) with exactly N+1 snapshots on success:
    the initial full draft plus one per expansion. The run ends after the
    final drafting pass without a further deepening call.
    """
    if not cfg.forced_mode:
        raise ValueError("run_forced() requires forced_mode")
    trajectory = Trajectory(
        query=query, fingerprint=cfg.fingerprint(), config=cfg.to_dict()
    )
    try:
        state = initialize_research(
            query, backend, index, cfg, trajectory=trajectory, embedder=embedder
        )
        while True:
            draft_pending_sections(
                state, backend, index, cfg, trajectory=trajectory, embedder=embedder
            )
            _capture_snapshot(trajectory, state)
            if state.deepen_count >= cfg.forced_expansions:
                break
            deepen_or_terminate(state, backend, cfg, trajectory=trajectory)
    except EngineAbort:
        raise
    except _RECOVERABLE as exc:
        raise EngineAbort(str(exc), trajectory=trajectory, cause=exc) from exc
    return trajectory.snapshots, trajectory
