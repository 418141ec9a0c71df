"""Shared fixture builders for the test suite.

The scripted corpus gives every document a unique marker token (tag0, tag1,
...) so a search for "tagN" deterministically retrieves document N first;
scripts can then cite keys that are guaranteed to be resolvable.
"""

from __future__ import annotations

import json
import math
import random

from draftloop.retrieval import CorpusIndex, ingest
from draftloop.textutils import tokens

SEARCH_MATCH = "searcher within a multi-agent system"
INIT_MATCH = "simple article outline structure"
WRITE_MATCH = "compose a new paragraph"
DEEPEN_MATCH = "requires expansion into subsections"


def corpus_lines(n: int, filler: str = "energy systems study") -> list[str]:
    lines = []
    for i in range(n):
        lines.append(
            json.dumps(
                {
                    "id": f"d{i:03d}",
                    "title": f"Document {i}",
                    "text": f"Unique marker tag{i} appears in this {filler} case {i}.",
                    "source": "web",
                }
            )
        )
    return lines


def make_corpus(n: int = 50) -> CorpusIndex:
    return ingest(corpus_lines(n))


def envelope(payload: str, thought: str = "t") -> str:
    return f"<thought>{thought}</thought><action>{payload}</action>"


def search_payload(*keywords: str) -> str:
    return json.dumps({"name": "search", "keywords": list(keywords)})


def init_payload(count: int = 3, title: str = "Energy Report") -> str:
    return json.dumps(
        {
            "name": "initialize",
            "title": title,
            "sections": [
                {"title": f"Part {j}", "plan": f"Plan for part {j}"}
                for j in range(1, count + 1)
            ],
        }
    )


def expand_payload(position: str, count: int = 2) -> str:
    return json.dumps(
        {
            "name": "expand",
            "position": position,
            "subsections": [
                {"title": f"Sub {j}", "plan": f"Plan for sub {j}"}
                for j in range(1, count + 1)
            ],
        }
    )


def terminate_payload() -> str:
    return json.dumps({"name": "terminate"})


def paragraph(i: int, cite: str | None = None) -> str:
    base = f"Paragraph {i} discusses the assigned topic in plain words"
    if cite:
        base += f" with evidence \\cite{{{cite}}}"
    return base + " and closes the thought."


def words(n: int, stem: str = "word") -> str:
    return " ".join(f"{stem}{i}" for i in range(n))


def fourteen_step_script() -> list[tuple[str, str]]:
    """1 search + 1 initialize + 3 write pairs + 1 expand + 2 write pairs + 1 terminate."""
    steps = [
        (SEARCH_MATCH, envelope(search_payload("tag0", "tag1"))),
        (INIT_MATCH, envelope(init_payload(3))),
    ]
    for i in range(3):
        steps.append((SEARCH_MATCH, envelope(search_payload(f"tag{i + 1}"))))
        steps.append((WRITE_MATCH, envelope(paragraph(i + 1, f"d{i + 1:03d}"))))
    steps.append((DEEPEN_MATCH, envelope(expand_payload("section-3", 2))))
    for i in range(3, 5):
        steps.append((SEARCH_MATCH, envelope(search_payload(f"tag{i + 1}"))))
        steps.append((WRITE_MATCH, envelope(paragraph(i + 1, f"d{i + 1:03d}"))))
    steps.append((DEEPEN_MATCH, envelope(terminate_payload())))
    return steps


def _expansion_targets(width: int) -> list[str]:
    """Expandable positions in a deterministic order for wide scripts."""
    targets = [f"section-{i}" for i in range(1, width + 1)]
    targets += [f"section-{i}.1" for i in range(1, width + 1)]
    targets += [f"section-{i}.2" for i in range(1, width + 1)]
    return targets


def expanding_script(
    expansions: int, extra_deepen: int = 0, width: int = 7
) -> list[tuple[str, str]]:
    """A script that expands ``expansions`` times, then keeps trying.

    ``extra_deepen`` additional expansion responses are appended for runs
    where the engine consults the model again after the final applied
    expansion (the cap-override round).
    """
    steps = [
        (SEARCH_MATCH, envelope(search_payload("tag0"))),
        (INIT_MATCH, envelope(init_payload(width))),
    ]
    marker = 0
    for _ in range(width):
        steps.append((SEARCH_MATCH, envelope(search_payload(f"tag{marker}"))))
        steps.append((WRITE_MATCH, envelope(paragraph(marker, f"d{marker:03d}"))))
        marker += 1
    targets = _expansion_targets(width)
    for k in range(expansions + extra_deepen):
        steps.append((DEEPEN_MATCH, envelope(expand_payload(targets[k], 2))))
        if k < expansions:
            for _ in range(2):
                steps.append((SEARCH_MATCH, envelope(search_payload(f"tag{marker}"))))
                steps.append((WRITE_MATCH, envelope(paragraph(marker, f"d{marker:03d}"))))
                marker += 1
    return steps


def stubborn_terminate_script(deepen_replies: int = 4) -> list[tuple[str, str]]:
    """Initialize and draft two sections, then refuse to ever expand."""
    steps = [
        (SEARCH_MATCH, envelope(search_payload("tag0"))),
        (INIT_MATCH, envelope(init_payload(2))),
    ]
    for i in range(2):
        steps.append((SEARCH_MATCH, envelope(search_payload(f"tag{i + 1}"))))
        steps.append((WRITE_MATCH, envelope(paragraph(i + 1, f"d{i + 1:03d}"))))
    for _ in range(deepen_replies):
        steps.append((DEEPEN_MATCH, envelope(terminate_payload())))
    return steps


class ShadowOutline:
    """Tracks expandable positions the way the engine's outline does."""

    def __init__(self, top: int):
        self.children: dict[tuple[int, ...], int] = {(): top}

    def leaves(self) -> list[tuple[int, ...]]:
        out = []

        def walk(prefix: tuple[int, ...]) -> None:
            count = self.children.get(prefix, 0)
            if count == 0:
                out.append(prefix)
                return
            for i in range(1, count + 1):
                walk(prefix + (i,))

        for i in range(1, self.children[()] + 1):
            walk((i,))
        return out

    def expandable(self) -> list[tuple[int, ...]]:
        return [
            pos
            for pos in self.leaves()
            if len(pos) < 3
        ]

    def expand(self, pos: tuple[int, ...], count: int) -> None:
        self.children[pos] = count


def random_run_script(rng: random.Random) -> tuple[list[tuple[str, str]], int]:
    """A random valid scripted run; returns (script, expansions)."""
    top = rng.randint(2, 4)
    shadow = ShadowOutline(top)
    steps = [
        (SEARCH_MATCH, envelope(search_payload("tag0"))),
        (INIT_MATCH, envelope(init_payload(top))),
    ]
    marker = 0
    for _ in range(top):
        steps.append((SEARCH_MATCH, envelope(search_payload(f"tag{marker % 50}"))))
        steps.append((WRITE_MATCH, envelope(paragraph(marker, f"d{marker % 50:03d}"))))
        marker += 1
    expansions = 0
    for _ in range(rng.randint(0, 3)):
        options = shadow.expandable()
        if not options:
            break
        pos = rng.choice(options)
        count = rng.randint(2, 4)
        dotted = "section-" + ".".join(str(i) for i in pos)
        steps.append((DEEPEN_MATCH, envelope(expand_payload(dotted, count))))
        shadow.expand(pos, count)
        expansions += 1
        for _ in range(count):
            steps.append((SEARCH_MATCH, envelope(search_payload(f"tag{marker % 50}"))))
            steps.append((WRITE_MATCH, envelope(paragraph(marker, f"d{marker % 50:03d}"))))
            marker += 1
    steps.append((DEEPEN_MATCH, envelope(terminate_payload())))
    return steps, expansions


def brute_force_search(
    docs: list[dict], keywords: list[str], top_k: int, k1: float = 1.2, b: float = 0.75
) -> list[tuple[str, float]]:
    """Independent scorer: direct scan over raw documents, no inverted index.

    Mirrors the ranking contract: statistics over the set of documents that
    contain at least one query term, document frequency from that same scan,
    term sum over the keyword bag, ties broken by ascending id.
    """
    terms = tokens(" ".join(keywords).lower())
    if not terms:
        return []
    doc_tokens = {
        d["id"]: tokens((d["title"] + "\n" + d["text"]).lower()) for d in docs
    }
    matched = [
        d["id"] for d in docs if any(t in doc_tokens[d["id"]] for t in set(terms))
    ]
    if not matched:
        return []
    avgdl = sum(len(doc_tokens[d]) for d in matched) / len(matched)
    n = len(matched)
    scores = {}
    for doc_id in matched:
        toks = doc_tokens[doc_id]
        score = 0.0
        for term in terms:
            tf = toks.count(term)
            if tf == 0:
                continue
            df = sum(1 for other in matched if term in doc_tokens[other])
            idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len(toks) / avgdl))
        scores[doc_id] = score
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:top_k]


def brute_force_f1(gen: set[str], golden: set[str], retrieved: set[str]) -> float:
    """Literal restatement of the citation scoring rule for oracle use."""
    for key in gen:
        if key not in retrieved:
            return 0.0
    if len(gen) == 0 and len(golden) == 0:
        return 1.0
    if len(gen) == 0 or len(golden) == 0:
        return 0.0
    tp = len(gen & golden)
    precision = tp / len(gen)
    recall = tp / len(golden)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
