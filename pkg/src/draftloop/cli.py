"""Command-line operator surface.

Subcommands: ingest, run, collect, prune, sample, score, replay. Exit codes
are a stable contract: 0 success, 1 runtime failure, 2 configuration error.
Artifacts land in the --out directory when given, otherwise in a fresh
timestamped directory; a manifest records artifact checksums but no wall
clock, so identical inputs give byte-identical artifacts either way.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import datetime
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import yaml

from .backend import (
    Backend,
    HttpBackend,
    MockBackend,
    ReplayBackend,
)
from .engine import (
    EngineAbort,
    EngineConfig,
    run,
    run_forced,
)
from .model import Outline, PreferenceChecklist, UserQuery
from .report import FinalReport, ReportStats, extract_citations
from .retrieval import CorpusError, CorpusIndex, ingest_path
from .rewards import (
    EmptyGolden,
    GoldenSet,
    JudgeParseFailure,
    citation_precision,
    judge_outline,
    judge_paragraph,
    outline_basic,
    paragraph_basic,
    report_score,
    retrieval_recall,
)
from .trajectory import (
    ABILITIES,
    LengthMismatch,
    Trajectory,
    balanced_sample,
    export_sft,
    load_trajectory_path,
    prune,
    save_trajectory_path,
    write_samples,
)

MANIFEST_VERSION = 1


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


@dataclass
class CliConfig:
    """Declarative run configuration; credentials stay in the environment."""

    corpus: str = ""
    index: str = ""
    backend_mode: str = ""  # "mock" or "http"
    endpoint: str = ""
    model: str = ""
    credential_env: str = "DRAFTLOOP_API_KEY"
    script: str = ""
    engine: dict = field(default_factory=dict)
    out_dir: str = ""
    seed: int = 0
    workers: int = 1

    @classmethod
    def load(cls, path: str) -> "CliConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                if path.endswith((".yaml", ".yml")):
                    data = yaml.safe_load(fh) or {}
                else:
                    data = json.load(fh)
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}", 2) from None
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise CliError(f"config file {path} is not valid: {exc}", 2) from None
        if not isinstance(data, dict):
            raise CliError(f"config file {path} must hold a mapping", 2)
        backend = data.get("backend") or {}
        cfg = cls(
            corpus=str(data.get("corpus", "")),
            index=str(data.get("index", "")),
            backend_mode=str(backend.get("mode", "")),
            endpoint=os.path.expandvars(str(backend.get("endpoint", ""))),
            model=os.path.expandvars(str(backend.get("model", ""))),
            credential_env=str(backend.get("credential_env", "DRAFTLOOP_API_KEY")),
            script=str(backend.get("script", "")),
            engine=dict(data.get("engine") or {}),
            out_dir=str(data.get("out", "")),
            seed=int(data.get("seed", 0)),
            workers=int(data.get("workers", 1)),
        )
        if not cfg.backend_mode:
            cfg.backend_mode = "mock" if cfg.script else ("http" if cfg.endpoint else "")
        return cfg

    def validate_backend(self) -> None:
        has_mock = bool(self.script)
        has_live = bool(self.endpoint)
        if has_mock and has_live:
            raise CliError("configure either a mock script or a live endpoint, not both", 2)
        if not has_mock and not has_live:
            raise CliError("no backend configured: set backend.script or backend.endpoint", 2)
        if has_live:
            if not self.model:
                raise CliError("live backend needs backend.model", 2)
            if not os.environ.get(self.credential_env):
                raise CliError(
                    f"credential environment variable {self.credential_env} is not set", 2
                )

    def build_backend(self) -> Backend:
        self.validate_backend()
        if self.script:
            return MockBackend(_load_script(self.script))
        return HttpBackend(
            endpoint=self.endpoint,
            model=self.model,
            credential_env=self.credential_env,
        )

    def engine_config(self, overrides: dict | None = None) -> EngineConfig:
        merged = dict(self.engine)
        if overrides:
            merged.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return EngineConfig.from_dict(merged)
        except (ValueError, TypeError) as exc:
            raise CliError(f"bad engine configuration: {exc}", 2) from None


def _load_script(path: str) -> list[tuple[str, str]]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"mock script not found: {path}", 2) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"mock script {path} is not valid JSON: {exc}", 2) from None
    steps: list[tuple[str, str]] = []
    if not isinstance(data, list):
        raise CliError(f"mock script {path} must be a JSON list", 2)
    for entry in data:
        if isinstance(entry, dict) and "matcher" in entry and "response" in entry:
            steps.append((str(entry["matcher"]), str(entry["response"])))
        elif isinstance(entry, list) and len(entry) == 2:
            steps.append((str(entry[0]), str(entry[1])))
        else:
            raise CliError(
                f"mock script {path}: each entry needs matcher and response", 2
            )
    if not steps:
        raise CliError(f"mock script {path} is empty", 2)
    return steps


def _load_index(args, cfg: CliConfig | None) -> CorpusIndex:
    index_path = getattr(args, "index", None) or (cfg.index if cfg else "")
    corpus_path = getattr(args, "corpus", None) or (cfg.corpus if cfg else "")
    try:
        if index_path:
            return CorpusIndex.load(index_path)
        if corpus_path:
            return ingest_path(corpus_path)
    except FileNotFoundError as exc:
        raise CliError(f"cannot read corpus data: {exc}", 2) from None
    except CorpusError as exc:
        raise CliError(f"cannot load corpus data: {exc}", 1) from None
    raise CliError("no corpus: give --index or --corpus (or set them in the config)", 2)


def _out_dir(args, cfg: CliConfig | None, command: str) -> str:
    chosen = getattr(args, "out", None) or (cfg.out_dir if cfg else "")
    if not chosen:
        stamp = datetime.datetime.now().strftime("%Y%m%dT%H%M%S")
        base = os.path.join("runs", f"{command}-{stamp}")
        chosen = base
        counter = 1
        while os.path.exists(chosen):
            chosen = f"{base}-{counter}"
            counter += 1
    os.makedirs(chosen, exist_ok=True)
    return chosen


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: str, command: str, seed: int, fingerprint: str) -> None:
    artifacts = {}
    for name in sorted(os.listdir(out_dir)):
        path = os.path.join(out_dir, name)
        if os.path.isfile(path) and name != "manifest.json":
            artifacts[name] = _sha256_file(path)
    manifest = {
        "version": MANIFEST_VERSION,
        "command": command,
        "seed": seed,
        "config_fingerprint": fingerprint,
        "artifacts": artifacts,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(out_dir: str, name: str, text: str) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def _persist_run(
    out_dir: str, report: FinalReport | None, trajectory: Trajectory | None
) -> None:
    if report is not None:
        _write_text(out_dir, "report.md", report.rendered)
        _write_text(
            out_dir,
            "stats.json",
            json.dumps(report.stats.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)
            + "\n",
        )
    if trajectory is not None:
        save_trajectory_path(trajectory, os.path.join(out_dir, "trajectory.jsonl"))


def cmd_ingest(args) -> int:
    try:
        index = ingest_path(args.corpus, strict=not args.lenient)
    except FileNotFoundError as exc:
        raise CliError(f"cannot read corpus: {exc}", 2) from None
    except CorpusError as exc:
        print(f"ingest failed: {exc}", file=sys.stderr)
        return 1
    index.save(args.index)
    report = index.ingest_report
    print(f"accepted={report.accepted} rejected={report.rejected}")
    return 0


def cmd_run(args) -> int:
    cfg = CliConfig.load(args.config) if args.config else CliConfig()
    overrides = {"top_k": args.top_k}
    engine_cfg = cfg.engine_config(overrides)
    if engine_cfg.forced_mode:
        raise CliError("run is for normal mode; use collect for forced expansion", 2)
    backend = cfg.build_backend()
    index = _load_index(args, cfg)
    out_dir = _out_dir(args, cfg, "run")
    query = UserQuery(text=args.query)
    try:
        report, trajectory = run(query, backend, index, engine_cfg)
    except EngineAbort as exc:
        _persist_run(out_dir, None, exc.trajectory)
        _write_manifest(out_dir, "run", cfg.seed, engine_cfg.fingerprint())
        print(f"run aborted: {exc}", file=sys.stderr)
        return 1
    _persist_run(out_dir, report, trajectory)
    _write_manifest(out_dir, "run", cfg.seed, engine_cfg.fingerprint())
    print(f"report written to {os.path.join(out_dir, 'report.md')}")
    return 0


def _collect_one(
    position: int, query_text: str, cfg: CliConfig, engine_cfg: EngineConfig, out_dir: str
) -> tuple[int, str | None]:
    """Run one forced collection; returns (position, error message or None)."""
    bundle = os.path.join(out_dir, f"query_{position:03d}")
    os.makedirs(bundle, exist_ok=True)
    backend = cfg.build_backend()
    index = _load_index(argparse.Namespace(index=None, corpus=None), cfg)
    query = UserQuery(text=query_text)
    try:
        snapshots, trajectory = run_forced(query, backend, index, engine_cfg)
    except EngineAbort as exc:
        if exc.trajectory is not None:
            save_trajectory_path(
                exc.trajectory, os.path.join(bundle, "trajectory.jsonl")
            )
            for snapshot in exc.trajectory.snapshots:
                _write_text(
                    bundle, f"snapshot_{snapshot.loop_index:02d}.md", snapshot.rendered
                )
        return position, str(exc)
    save_trajectory_path(trajectory, os.path.join(bundle, "trajectory.jsonl"))
    for snapshot in snapshots:
        _write_text(bundle, f"snapshot_{snapshot.loop_index:02d}.md", snapshot.rendered)
    return position, None


def cmd_collect(args) -> int:
    cfg = CliConfig.load(args.config) if args.config else CliConfig()
    overrides: dict = {"forced_mode": True}
    if args.forced is not None:
        overrides["forced_expansions"] = args.forced
    engine_cfg = cfg.engine_config(overrides)
    try:
        with open(args.queries, encoding="utf-8") as fh:
            queries = [line.strip() for line in fh if line.strip()]
    except FileNotFoundError:
        raise CliError(f"query file not found: {args.queries}", 2) from None
    if not queries:
        raise CliError(f"query file {args.queries} is empty", 2)
    cfg.validate_backend()
    out_dir = _out_dir(args, cfg, "collect")

    workers = args.workers or cfg.workers
    failures: list[tuple[int, str]] = []
    if workers <= 1:
        results = [
            _collect_one(i, q, cfg, engine_cfg, out_dir) for i, q in enumerate(queries)
        ]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(
                    lambda item: _collect_one(item[0], item[1], cfg, engine_cfg, out_dir),
                    enumerate(queries),
                )
            )
    for position, error in results:
        if error is not None:
            failures.append((position, error))
            print(f"query {position} failed: {error}", file=sys.stderr)
    _write_manifest(out_dir, "collect", cfg.seed, engine_cfg.fingerprint())
    print(f"collected {len(queries) - len(failures)}/{len(queries)} queries in {out_dir}")
    return 1 if failures else 0


def cmd_prune(args) -> int:
    try:
        trajectory = load_trajectory_path(args.trajectory)
    except FileNotFoundError:
        raise CliError(f"trajectory file not found: {args.trajectory}", 2) from None
    try:
        with open(args.scores, encoding="utf-8") as fh:
            scores = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"scores file not found: {args.scores}", 2) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"scores file is not valid JSON: {exc}", 2) from None
    if not isinstance(scores, list) or not all(
        isinstance(s, (int, float)) for s in scores
    ):
        raise CliError("scores file must hold a JSON list of numbers", 2)
    out_dir = _out_dir(args, None, "prune")
    try:
        pruned = prune(trajectory, [float(s) for s in scores])
    except LengthMismatch as exc:
        print(f"prune failed: {exc}", file=sys.stderr)
        return 1
    path = os.path.join(out_dir, "pruned.jsonl")
    save_trajectory_path(pruned, path)
    _write_manifest(out_dir, "prune", 0, trajectory.fingerprint)
    print(f"pruned trajectory written to {path}")
    return 0


def _parse_mix(text: str) -> dict[str, float]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    try:
        if all("=" in p for p in parts):
            mix = {}
            for p in parts:
                name, value = p.split("=", 1)
                mix[name.strip()] = float(value)
            return mix
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise CliError(f"bad --mix value: {exc}", 2) from None
    if len(values) != len(ABILITIES):
        raise CliError(
            f"--mix needs {len(ABILITIES)} comma-separated proportions "
            f"in the order {', '.join(ABILITIES)}",
            2,
        )
    return dict(zip(ABILITIES, values))


def cmd_sample(args) -> int:
    mix = _parse_mix(args.mix) if args.mix else None
    if not os.path.isdir(args.steps_dir):
        raise CliError(f"steps directory not found: {args.steps_dir}", 2)
    files = sorted(
        os.path.join(root, name)
        for root, _, names in os.walk(args.steps_dir)
        for name in names
        if name.endswith(".jsonl")
    )
    pool = []
    for path in files:
        pool.extend(load_trajectory_path(path).steps)
    if not pool:
        raise CliError(f"no trajectory steps under {args.steps_dir}", 1)
    try:
        sampled = balanced_sample(pool, mix, n=args.n, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc), 2) from None
    out_dir = _out_dir(args, None, "sample")
    result = export_sft(sampled)
    path = os.path.join(out_dir, "samples.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        write_samples(result.samples, fh)
    _write_manifest(out_dir, "sample", args.seed, "")
    achieved = {
        a: sum(1 for s in sampled if s.ability == a) / len(sampled) for a in ABILITIES
    }
    achieved_text = ", ".join(f"{a}={achieved[a]:.3f}" for a in ABILITIES)
    print(
        f"sampled {len(sampled)} steps ({result.skipped} skipped in export); "
        f"achieved mix: {achieved_text}"
    )
    return 0


def _load_golden(path: str) -> tuple[GoldenSet, set[str]]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    golden = GoldenSet(
        doc_ids=set(data.get("doc_ids", [])),
        citation_keys=set(data.get("citation_keys", [])),
        terminate_label=data.get("terminate_label"),
    )
    retrieved = set(data.get("retrieved_ids", data.get("doc_ids", [])))
    return golden, retrieved


def cmd_score(args) -> int:
    targets = [bool(args.paragraph), bool(args.outline), bool(args.report)]
    if sum(targets) != 1:
        raise CliError("give exactly one of --paragraph, --outline, --report", 2)
    cfg = CliConfig.load(args.config) if args.config else None
    backend = None
    if cfg is not None and (cfg.script or cfg.endpoint):
        backend = cfg.build_backend()

    golden = retrieved = None
    if args.golden:
        try:
            golden, retrieved = _load_golden(args.golden)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise CliError(f"cannot read golden file: {exc}", 2) from None

    scores: dict[str, object] = {}

    def record(metric) -> None:
        scores[metric.name] = {"value": metric.value, "detail": metric.detail}

    try:
        if args.paragraph:
            if not args.query:
                raise CliError("--query is required to score a paragraph", 2)
            with open(args.paragraph, encoding="utf-8") as fh:
                content = fh.read()
            query = UserQuery(text=args.query)
            record(paragraph_basic(content, query))
            if golden is not None:
                gen_keys = set(extract_citations(content).keys)
                record(citation_precision(gen_keys, golden, retrieved or set()))
                try:
                    record(retrieval_recall(retrieved or set(), golden))
                except EmptyGolden:
                    scores["retrieval_recall"] = "skipped"
            else:
                scores["citation_precision"] = "skipped"
                scores["retrieval_recall"] = "skipped"
            if backend is not None:
                for metric in judge_paragraph(content, args.query, backend):
                    record(metric)
        elif args.outline:
            if not args.query:
                raise CliError("--query is required to score an outline", 2)
            with open(args.outline, encoding="utf-8") as fh:
                outline = Outline.from_dict(json.load(fh))
            query = UserQuery(text=args.query)
            record(outline_basic(outline, query))
            if backend is not None and args.reference_outline:
                with open(args.reference_outline, encoding="utf-8") as fh:
                    reference = Outline.from_dict(json.load(fh))
                for metric in judge_outline(outline, reference, backend):
                    record(metric)
        else:
            with open(args.report, encoding="utf-8") as fh:
                rendered = fh.read()
            if backend is None or not args.checklist:
                raise CliError(
                    "scoring a report needs a configured backend and --checklist", 2
                )
            with open(args.checklist, encoding="utf-8") as fh:
                checklist = PreferenceChecklist.from_dict(json.load(fh))
            title = rendered.splitlines()[0].lstrip("# ").strip() if rendered else "report"
            report = FinalReport(
                title=title or "report",
                rendered=rendered,
                bibliography=[],
                stats=ReportStats(),
            )
            record(report_score(report, checklist, backend))
    except FileNotFoundError as exc:
        raise CliError(f"cannot read input: {exc}", 2) from None
    except JudgeParseFailure as exc:
        print(f"judge failed: {exc}", file=sys.stderr)
        return 1

    print(json.dumps(scores, ensure_ascii=False, indent=2, sort_keys=True))
    return 0


def cmd_replay(args) -> int:
    try:
        trajectory = load_trajectory_path(args.trajectory)
    except FileNotFoundError:
        raise CliError(f"trajectory file not found: {args.trajectory}", 2) from None
    cfg = CliConfig.load(args.config) if args.config else None
    index = _load_index(args, cfg)
    engine_cfg = EngineConfig.from_dict(trajectory.config)
    backend = ReplayBackend(trajectory.raw_outputs())
    out_dir = _out_dir(args, cfg, "replay")
    try:
        if engine_cfg.forced_mode:
            _, replayed = run_forced(trajectory.query, backend, index, engine_cfg)
            report = None
        else:
            report, replayed = run(trajectory.query, backend, index, engine_cfg)
    except EngineAbort as exc:
        print(f"replay aborted: {exc}", file=sys.stderr)
        return 1
    _persist_run(out_dir, report, replayed)
    _write_manifest(out_dir, "replay", 0, engine_cfg.fingerprint())
    if report is not None and trajectory.final_report is not None:
        if report.rendered != trajectory.final_report.rendered:
            print("replay diverged from the recorded final report", file=sys.stderr)
            return 1
        print("replay matched the recorded final report")
    else:
        print(f"replay artifacts written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="draftloop",
        description="Iterative draft-and-deepen research report engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a corpus index from JSONL records")
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--lenient", action="store_true", help="skip bad records")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("run", help="run the full research loop for one query")
    p.add_argument("--query", required=True)
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--index")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top-k", type=int, dest="top_k")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("collect", help="forced-expansion snapshot collection")
    p.add_argument("--queries", required=True, help="file with one query per line")
    p.add_argument("--config")
    p.add_argument("--forced", type=int, metavar="N", help="expansions per query")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("prune", help="cut a trajectory at its best snapshot")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--scores", required=True, help="JSON list of snapshot scores")
    p.add_argument("--out")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("sample", help="ability-balanced sampling of pooled steps")
    p.add_argument("--steps-dir", required=True, dest="steps_dir")
    p.add_argument("--mix", help="proportions planning,retrieval,writing,decision-making")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("score", help="score an outline, paragraph, or report")
    p.add_argument("--paragraph")
    p.add_argument("--outline")
    p.add_argument("--report")
    p.add_argument("--query")
    p.add_argument("--golden")
    p.add_argument("--checklist")
    p.add_argument("--reference-outline", dest="reference_outline")
    p.add_argument("--config")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("replay", help="re-run recorded completions and compare")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--index")
    p.add_argument("--out")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
