"""Trajectory recording, reward-guided pruning, balanced sampling, SFT export.

A trajectory is every model interaction of one engine run: prompts, raw
completions, parsed actions, environment observations, and a draft snapshot
after each completed drafting pass. Pruning relabels a run to stop at its
best-scoring draft; balanced sampling rebalances pooled steps across the
four agent abilities; export turns steps into prompt/response pairs.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import IO

from .actions import (
    Action,
    Expand,
    Initialize,
    Search,
    Terminate,
    Write,
    parse_action,
    parse_envelope,
    serialize_action,
)
from .model import Outline, ResearchState, UserQuery
from .report import FinalReport, ReportStats

TRAJECTORY_VERSION = 1

STAGES = ("search", "initialize", "write", "deepen")
ABILITIES = ("planning", "retrieval", "writing", "decision-making")

# Default ability weights for balanced sampling; planning and decisions are
# upweighted relative to their natural frequency.
DEFAULT_TARGET_MIX = {
    "planning": 0.25,
    "retrieval": 0.2,
    "writing": 0.35,
    "decision-making": 0.2,
}

# A step whose action failed to parse still belongs to the ability its stage
# was exercising.
STAGE_DEFAULT_ABILITY = {
    "search": "retrieval",
    "initialize": "planning",
    "write": "writing",
    "deepen": "decision-making",
}


class TrajectoryError(Exception):
    pass


class LengthMismatch(TrajectoryError):
    pass


class EmptyPool(TrajectoryError):
    pass


def ability_for_action(action: Action) -> str:
    if isinstance(action, (Initialize, Expand)):
        return "planning"
    if isinstance(action, Search):
        return "retrieval"
    if isinstance(action, Write):
        return "writing"
    if isinstance(action, Terminate):
        return "decision-making"
    raise TypeError(f"not an action: {action!r}")


@dataclass
class DraftSnapshot:
    """The working draft as it stood after one completed drafting pass."""

    loop_index: int
    outline: Outline
    rendered: str

    def to_dict(self) -> dict:
        return {
            "loop_index": self.loop_index,
            "outline": self.outline.to_dict(),
            "rendered": self.rendered,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DraftSnapshot":
        return cls(
            loop_index=int(data["loop_index"]),
            outline=Outline.from_dict(data["outline"]),
            rendered=data["rendered"],
        )


@dataclass
class TrajectoryStep:
    step_index: int
    loop_index: int
    stage: str
    ability: str
    prompt: str
    raw_output: str
    action: Action | None = None
    error: str | None = None
    observation: str = ""
    repaired: bool = False
    applied: bool = False
    synthetic: bool = False
    trajectory_id: str = ""

    def to_dict(self) -> dict:
        return {
            "type": "step",
            "step_index": self.step_index,
            "loop_index": self.loop_index,
            "stage": self.stage,
            "ability": self.ability,
            "prompt": self.prompt,
            "raw_output": self.raw_output,
            "action": serialize_action(self.action) if self.action is not None else None,
            "error": self.error,
            "observation": self.observation,
            "repaired": self.repaired,
            "applied": self.applied,
            "synthetic": self.synthetic,
        }

    @classmethod
    def from_dict(cls, data: dict, trajectory_id: str = "") -> "TrajectoryStep":
        action = None
        if data.get("action"):
            env = parse_envelope(
                f"<thought></thought><action>{data['action']}</action>", data["stage"]
            )
            action = parse_action(env)
        return cls(
            step_index=int(data["step_index"]),
            loop_index=int(data["loop_index"]),
            stage=data["stage"],
            ability=data["ability"],
            prompt=data["prompt"],
            raw_output=data["raw_output"],
            action=action,
            error=data.get("error"),
            observation=data.get("observation", ""),
            repaired=bool(data.get("repaired", False)),
            applied=bool(data.get("applied", False)),
            synthetic=bool(data.get("synthetic", False)),
            trajectory_id=trajectory_id,
        )


def derive_trajectory_id(query_text: str, fingerprint: str, tag: str = "") -> str:
    """Deterministic id: same query, config, and tag always name the same run."""
    digest = hashlib.sha256(
        f"{query_text}\x1f{fingerprint}\x1f{tag}".encode("utf-8")
    ).hexdigest()
    return digest[:16]


@dataclass
class Trajectory:
    query: UserQuery
    fingerprint: str
    config: dict = field(default_factory=dict)
    trajectory_id: str = ""
    steps: list[TrajectoryStep] = field(default_factory=list)
    snapshots: list[DraftSnapshot] = field(default_factory=list)
    final_report: FinalReport | None = None

    def __post_init__(self) -> None:
        if not self.trajectory_id:
            self.trajectory_id = derive_trajectory_id(self.query.text, self.fingerprint)

    def add_step(self, step: TrajectoryStep) -> TrajectoryStep:
        step.step_index = len(self.steps)
        step.trajectory_id = self.trajectory_id
        self.steps.append(step)
        return step

    def add_snapshot(self, snapshot: DraftSnapshot) -> None:
        if self.snapshots and snapshot.loop_index <= self.snapshots[-1].loop_index:
            raise TrajectoryError("snapshot loop indices must strictly increase")
        self.snapshots.append(snapshot)

    def raw_outputs(self) -> list[str]:
        """Recorded completions in order, for replay; synthetic steps excluded."""
        return [s.raw_output for s in self.steps if not s.synthetic]


def save_trajectory(traj: Trajectory, fh: IO[str]) -> None:
    header = {
        "type": "header",
        "version": TRAJECTORY_VERSION,
        "trajectory_id": traj.trajectory_id,
        "query": traj.query.to_dict(),
        "config": traj.config,
        "fingerprint": traj.fingerprint,
    }
    fh.write(json.dumps(header, ensure_ascii=False, sort_keys=True) + "\n")
    for step in traj.steps:
        fh.write(json.dumps(step.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    for snapshot in traj.snapshots:
        record = {"type": "snapshot", **snapshot.to_dict()}
        fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    if traj.final_report is not None:
        record = {"type": "final_report", **traj.final_report.to_dict()}
        fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def save_trajectory_path(traj: Trajectory, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        save_trajectory(traj, fh)


def load_trajectory(fh: IO[str]) -> Trajectory:
    header = None
    steps: list[TrajectoryStep] = []
    snapshots: list[DraftSnapshot] = []
    final_report = None
    for line in fh:
        if not line.strip():
            continue
        record = json.loads(line)
        kind = record.get("type")
        if kind == "header":
            if record.get("version") != TRAJECTORY_VERSION:
                raise TrajectoryError(
                    f"trajectory version {record.get('version')!r} unsupported"
                )
            header = record
        elif kind == "step":
            steps.append(
                TrajectoryStep.from_dict(
                    record, trajectory_id=header["trajectory_id"] if header else ""
                )
            )
        elif kind == "snapshot":
            snapshots.append(DraftSnapshot.from_dict(record))
        elif kind == "final_report":
            final_report = FinalReport(
                title=record["title"],
                rendered=record["rendered"],
                bibliography=[tuple(e) for e in record["bibliography"]],
                stats=ReportStats(
                    write_count=record["stats"]["write_count"],
                    expand_count=record["stats"]["expand_count"],
                    sections_per_level=tuple(record["stats"]["sections_per_level"]),
                    malformed_citations=record["stats"].get("malformed_citations", 0),
                    hallucinated_citations=record["stats"].get(
                        "hallucinated_citations", 0
                    ),
                ),
            )
        else:
            raise TrajectoryError(f"unknown record type {kind!r}")
    if header is None:
        raise TrajectoryError("trajectory stream has no header record")
    traj = Trajectory(
        query=UserQuery.from_dict(header["query"]),
        fingerprint=header["fingerprint"],
        config=header.get("config", {}),
        trajectory_id=header["trajectory_id"],
    )
    traj.steps = steps
    traj.snapshots = snapshots
    traj.final_report = final_report
    for step in traj.steps:
        step.trajectory_id = traj.trajectory_id
    return traj


def load_trajectory_path(path: str) -> Trajectory:
    with open(path, encoding="utf-8") as fh:
        return load_trajectory(fh)


_TERMINATE_OUTPUT = (
    f"<thought></thought><action>{serialize_action(Terminate())}</action>"
)


def _regenerated_deepen_prompt(traj: Trajectory, snapshot: DraftSnapshot) -> str:
    from .prompts import build_prompt

    cfg = traj.config or {}
    state = ResearchState(query=traj.query, outline=snapshot.outline)
    return build_prompt(
        "deepen",
        state,
        section_budget=int(cfg.get("survey_section_budget", 0)),
        recent_untruncated=int(cfg.get("survey_recent_untruncated", 2)),
    )


def prune(traj: Trajectory, snapshot_scores: list[float]) -> Trajectory:
    """Relabel a run to stop at its best draft.

    The endpoint is the earliest highest-scoring snapshot. Steps after the
    drafting pass that produced it are dropped, and the deepening decision
    that followed it becomes a Terminate: the recorded one if the model
    actually terminated there, otherwise a synthetic step flagged as such.
    """
    if len(snapshot_scores) != len(traj.snapshots) or not traj.snapshots:
        raise LengthMismatch(
            f"{len(snapshot_scores)} scores for {len(traj.snapshots)} snapshots"
        )
    best = max(snapshot_scores)
    target = snapshot_scores.index(best)
    target_loop = traj.snapshots[target].loop_index

    pruned = Trajectory(
        query=traj.query,
        fingerprint=traj.fingerprint,
        config=dict(traj.config),
        trajectory_id=traj.trajectory_id,
    )
    pruned.snapshots = traj.snapshots[: target + 1]

    decision: TrajectoryStep | None = None
    kept: list[TrajectoryStep] = []
    for step in traj.steps:
        if step.stage == "deepen" and step.loop_index == target_loop:
            decision = step
            break
        kept.append(step)

    for step in kept:
        pruned.add_step(step)
    if decision is not None and isinstance(decision.action, Terminate):
        pruned.add_step(decision)
    else:
        prompt = (
            decision.prompt
            if decision is not None
            else _regenerated_deepen_prompt(traj, pruned.snapshots[-1])
        )
        pruned.add_step(
            TrajectoryStep(
                step_index=0,
                loop_index=target_loop,
                stage="deepen",
                ability="decision-making",
                prompt=prompt,
                raw_output=_TERMINATE_OUTPUT,
                action=Terminate(),
                applied=True,
                synthetic=True,
            )
        )
    pruned.final_report = None
    return pruned


def balanced_sample(
    steps: list[TrajectoryStep],
    target_mix: dict[str, float] | None = None,
    n: int = 1,
    seed: int = 0,
) -> list[TrajectoryStep]:
    """Draw ``n`` steps without replacement, matching an ability mix.

    Quotas come from largest-remainder apportionment of the target mix,
    clamped to bucket sizes; any deficit is redistributed over buckets with
    spare capacity, proportionally to their targets. Output order follows
    the input pool so identical seeds give identical bytes.
    """
    if not steps:
        raise EmptyPool("no steps to sample from")
    if n < 1:
        raise ValueError("n must be >= 1")
    mix = dict(DEFAULT_TARGET_MIX if target_mix is None else target_mix)
    unknown = set(mix) - set(ABILITIES)
    if unknown:
        raise ValueError(f"unknown abilities in target mix: {sorted(unknown)}")
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"target mix must sum to 1, got {total}")
    if any(v < 0 for v in mix.values()):
        raise ValueError("target mix proportions must be non-negative")

    buckets: dict[str, list[int]] = {a: [] for a in ABILITIES}
    for i, step in enumerate(steps):
        if step.ability not in buckets:
            raise ValueError(f"step {i} has unknown ability {step.ability!r}")
        buckets[step.ability].append(i)

    n = min(n, len(steps))
    abilities = [a for a in ABILITIES if a in mix]
    quotas = _apportion({a: mix[a] for a in abilities}, n)
    for a in abilities:
        quotas[a] = min(quotas[a], len(buckets[a]))

    # Redistribute whatever the clamped buckets could not absorb.
    while True:
        deficit = n - sum(quotas.values())
        if deficit <= 0:
            break
        spare = {
            a: len(buckets[a]) - quotas[a]
            for a in abilities
            if len(buckets[a]) > quotas[a] and mix[a] > 0
        }
        if not spare:
            spare = {
                a: len(buckets[a]) - quotas[a]
                for a in abilities
                if len(buckets[a]) > quotas[a]
            }
        if not spare:
            break
        weights = {a: mix[a] for a in spare}
        if sum(weights.values()) <= 0:
            weights = {a: 1.0 for a in spare}
        scale = sum(weights.values())
        extra = _apportion({a: w / scale for a, w in weights.items()}, deficit)
        for a, q in extra.items():
            quotas[a] += min(q, len(buckets[a]) - quotas[a])

    rng = random.Random(seed)
    chosen: list[int] = []
    for a in abilities:
        take = quotas.get(a, 0)
        if take > 0:
            chosen.extend(rng.sample(buckets[a], take))
    chosen.sort()
    return [steps[i] for i in chosen]


def _apportion(proportions: dict[str, float], n: int) -> dict[str, int]:
    """Largest-remainder rounding of ``n * proportion`` per key."""
    shares = {a: n * p for a, p in proportions.items()}
    out = {a: int(shares[a]) for a in proportions}
    remainder = n - sum(out.values())
    by_fraction = sorted(
        proportions,
        key=lambda a: (-(shares[a] - int(shares[a])), a),
    )
    for a in by_fraction[:remainder]:
        out[a] += 1
    return out


@dataclass
class TrainingSample:
    prompt: str
    response: str
    ability: str
    stage: str
    trajectory_id: str
    step_index: int
    repaired: bool

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "response": self.response,
            "ability": self.ability,
            "stage": self.stage,
            "trajectory_id": self.trajectory_id,
            "step_index": self.step_index,
            "repaired": self.repaired,
        }


@dataclass
class ExportResult:
    samples: list[TrainingSample]
    skipped: int = 0


def export_sft(steps: list[TrajectoryStep]) -> ExportResult:
    """Turn recorded steps into prompt/response training pairs.

    Responses are rebuilt byte-faithfully from the recorded completion when
    the parse needed no repair; repaired steps get the canonical
    serialization instead, so downstream consumers never train on broken
    JSON. Steps whose action never parsed are skipped and counted.
    """
    result = ExportResult(samples=[])
    for step in steps:
        if step.action is None:
            result.skipped += 1
            continue
        if step.repaired:
            thought = _extract_thought(step.raw_output)
            response = (
                f"<thought>{thought}</thought>"
                f"<action>{serialize_action(step.action)}</action>"
            )
        else:
            env = parse_envelope(step.raw_output, step.stage)
            response = (
                f"<thought>{env.thought}</thought><action>{env.payload}</action>"
            )
        result.samples.append(
            TrainingSample(
                prompt=step.prompt,
                response=response,
                ability=step.ability,
                stage=step.stage,
                trajectory_id=step.trajectory_id,
                step_index=step.step_index,
                repaired=step.repaired,
            )
        )
    return result


def _extract_thought(raw_output: str) -> str:
    try:
        return parse_envelope(raw_output, "deepen").thought
    except Exception:
        return ""


def write_samples(samples: list[TrainingSample], fh: IO[str]) -> None:
    for sample in samples:
        fh.write(json.dumps(sample.to_dict(), ensure_ascii=False) + "\n")
