"""Local document corpus: JSONL ingestion, lexical index, keyword search.

Ranking is Okapi-style (k1 = 1.2, b = 0.75) with one twist: collection
statistics (document count and average length) are computed over the set of
documents matching at least one query term, not the whole corpus. Every
document containing a query term is in that set, so per-term document
frequencies are unaffected, while scores of existing hits become literally
invariant under insertion of documents that share no term with the query.
Global-statistics BM25 does not have that property: growing the corpus
shifts avgdl and N, which can reorder prior hits.

An optional embedder hook replaces lexical ranking with cosine similarity
when configured.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass

from .model import RetrievalContext, SectionPosition
from .textutils import tokens

BM25_K1 = 1.2
BM25_B = 0.75
DEFAULT_TOP_K = 8

INDEX_FORMAT = "draftloop-corpus-index"
INDEX_VERSION = 1

_ID_ALLOWED = frozenset(
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_.:-"
)


class CorpusError(Exception):
    pass


class DuplicateId(CorpusError):
    def __init__(self, doc_id: str, line: int):
        super().__init__(f"duplicate document id {doc_id!r} on line {line}")
        self.doc_id = doc_id
        self.line = line


class SchemaError(CorpusError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyIndex(CorpusError):
    pass


class UnknownDocId(CorpusError):
    pass


class IndexFormatError(CorpusError):
    pass


@dataclass(frozen=True)
class CorpusDocument:
    id: str
    title: str
    text: str
    source: str = ""

    def body(self) -> str:
        return f"{self.title}\n{self.text}"


@dataclass(frozen=True)
class SearchHit:
    doc_id: str
    score: float
    rank: int


@dataclass
class IngestReport:
    accepted: int = 0
    rejected: int = 0


# Embedder contract: texts in, one vector per text out.
Embedder = Callable[[list[str]], list[list[float]]]


class CorpusIndex:
    """Immutable-after-build inverted index over a document corpus."""

    def __init__(self) -> None:
        self.docs: dict[str, CorpusDocument] = {}
        self.order: list[str] = []
        self.postings: dict[str, dict[str, int]] = {}
        self.doc_len: dict[str, int] = {}
        self.ingest_report = IngestReport()
        self._doc_vectors: dict[str, list[float]] = {}

    def __len__(self) -> int:
        return len(self.docs)

    def add(self, doc: CorpusDocument) -> None:
        terms = tokens(doc.body().lower())
        self.docs[doc.id] = doc
        self.order.append(doc.id)
        self.doc_len[doc.id] = len(terms)
        for term in terms:
            self.postings.setdefault(term, {})
            self.postings[term][doc.id] = self.postings[term].get(doc.id, 0) + 1

    def get(self, doc_id: str) -> CorpusDocument | None:
        return self.docs.get(doc_id)

    def to_dict(self) -> dict:
        return {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "count": len(self.docs),
            "docs": [
                {
                    "id": d.id,
                    "title": d.title,
                    "text": d.text,
                    "source": d.source,
                }
                for d in (self.docs[i] for i in self.order)
            ],
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "CorpusIndex":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict) or data.get("format") != INDEX_FORMAT:
            raise IndexFormatError(f"{path} is not a corpus index file")
        if data.get("version") != INDEX_VERSION:
            raise IndexFormatError(
                f"{path} has index version {data.get('version')!r}; "
                f"this build reads version {INDEX_VERSION}"
            )
        index = cls()
        for entry in data.get("docs", []):
            index.add(
                CorpusDocument(
                    id=entry["id"],
                    title=entry["title"],
                    text=entry["text"],
                    source=entry.get("source", ""),
                )
            )
        index.ingest_report = IngestReport(accepted=len(index), rejected=0)
        return index


def _check_record(record: object, line: int) -> CorpusDocument:
    if not isinstance(record, dict):
        raise SchemaError("record is not a JSON object", line)
    for fld in ("id", "title", "text"):
        if fld not in record:
            raise SchemaError(f"missing field {fld!r}", line)
        if not isinstance(record[fld], str):
            raise SchemaError(f"field {fld!r} must be a string", line)
    doc_id = record["id"]
    if not doc_id or any(ch not in _ID_ALLOWED for ch in doc_id):
        raise SchemaError(
            f"id {doc_id!r} must be non-empty over [A-Za-z0-9_.:-]", line
        )
    if not record["text"].strip():
        raise SchemaError("field 'text' is empty", line)
    return CorpusDocument(
        id=doc_id,
        title=record["title"],
        text=record["text"],
        source=str(record.get("source", "")),
    )


def ingest(lines: Iterable[str], strict: bool = True) -> CorpusIndex:
    """Build an index from line-delimited JSON records.

    Strict mode raises on the first bad or duplicate record; lenient mode
    skips it and counts it in the report.
    """
    index = CorpusIndex()
    report = IngestReport()
    for line_no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line_no) from None
            doc = _check_record(record, line_no)
            if doc.id in index.docs:
                raise DuplicateId(doc.id, line_no)
        except CorpusError:
            if strict:
                raise
            report.rejected += 1
            continue
        index.add(doc)
        report.accepted += 1
    index.ingest_report = report
    return index


def ingest_path(path: str, strict: bool = True) -> CorpusIndex:
    with open(path, encoding="utf-8") as fh:
        return ingest(fh, strict=strict)


def query_terms(keywords: list[str]) -> list[str]:
    """Join keywords into one lowercased bag of terms."""
    return tokens(" ".join(keywords).lower())


def search(
    index: CorpusIndex,
    keywords: list[str],
    top_k: int = DEFAULT_TOP_K,
    embedder: Embedder | None = None,
) -> list[SearchHit]:
    """Rank documents for the joined keyword bag; ties break on ascending id.

    With an embedder configured, ranking is cosine similarity between the
    query embedding and per-document embeddings; otherwise the query-scoped
    Okapi scoring described in the module docstring.
    """
    if len(index) == 0:
        raise EmptyIndex("search over an empty index")
    if top_k < 1:
        raise ValueError("top_k must be positive")
    if embedder is not None:
        return _search_dense(index, keywords, top_k, embedder)

    terms = query_terms(keywords)
    if not terms:
        return []
    # Matching set: every document containing at least one query term.
    matched: set[str] = set()
    for term in set(terms):
        matched.update(index.postings.get(term, {}))
    if not matched:
        return []
    n_matched = len(matched)
    avgdl = sum(index.doc_len[d] for d in matched) / n_matched

    scores: dict[str, float] = {d: 0.0 for d in matched}
    for term in terms:
        posting = index.postings.get(term)
        if not posting:
            continue
        df = len(posting)
        idf = math.log(1.0 + (n_matched - df + 0.5) / (df + 0.5))
        for doc_id, tf in posting.items():
            norm = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * index.doc_len[doc_id] / avgdl)
            scores[doc_id] += idf * tf * (BM25_K1 + 1.0) / norm

    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    return [
        SearchHit(doc_id=doc_id, score=score, rank=rank)
        for rank, (doc_id, score) in enumerate(ranked, 1)
    ]


def _search_dense(
    index: CorpusIndex, keywords: list[str], top_k: int, embedder: Embedder
) -> list[SearchHit]:
    query = " ".join(keywords)
    missing = [d for d in index.order if d not in index._doc_vectors]
    if missing:
        vectors = embedder([index.docs[d].body() for d in missing])
        for doc_id, vec in zip(missing, vectors):
            index._doc_vectors[doc_id] = vec
    (qvec,) = embedder([query])
    scored = [
        (doc_id, _cosine(qvec, index._doc_vectors[doc_id])) for doc_id in index.order
    ]
    ranked = sorted(scored, key=lambda kv: (-kv[1], kv[0]))[:top_k]
    return [
        SearchHit(doc_id=doc_id, score=max(score, 0.0), rank=rank)
        for rank, (doc_id, score) in enumerate(ranked, 1)
    ]


def _cosine(a: list[float], b: list[float]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def merge_context(
    ctx: RetrievalContext,
    pos: SectionPosition,
    hits: list[SearchHit],
    dedup: bool = False,
    index: CorpusIndex | None = None,
) -> RetrievalContext:
    """Fold search hits into a retrieval context under one section position.

    With an index supplied, unknown doc ids are rejected before any mutation.
    Returns the context for chaining.
    """
    if index is not None:
        for hit in hits:
            if hit.doc_id not in index.docs:
                raise UnknownDocId(hit.doc_id)
    ctx.add(pos, [hit.doc_id for hit in hits], dedup=dedup)
    return ctx
