from __future__ import annotations

import json
import random

import pytest

from draftloop.model import RetrievalContext, SectionPosition
from draftloop.retrieval import (
    CorpusDocument,
    CorpusIndex,
    DuplicateId,
    EmptyIndex,
    IndexFormatError,
    SchemaError,
    SearchHit,
    UnknownDocId,
    ingest,
    ingest_path,
    merge_context,
    query_terms,
    search,
)

from support import brute_force_search, corpus_lines


def doc_line(doc_id: str, title: str, text: str, source: str = "web") -> str:
    return json.dumps({"id": doc_id, "title": title, "text": text, "source": source})


def small_index() -> CorpusIndex:
    return ingest(
        [
            doc_line("a1", "Solar power", "solar panels convert sunlight into power"),
            doc_line("a2", "Wind power", "wind turbines convert wind into power"),
            doc_line("a3", "Coal history", "coal plants burn fuel for heat"),
            doc_line("a4", "Grid storage", "batteries store solar and wind power"),
        ]
    )


def test_ingest_accepts_valid_lines():
    index = small_index()
    assert len(index) == 4
    assert index.ingest_report.accepted == 4
    assert index.ingest_report.rejected == 0
    assert index.get("a3").title == "Coal history"
    assert index.get("nope") is None


def test_ingest_skips_blank_lines():
    index = ingest(["", doc_line("x", "T", "text body"), "   "])
    assert len(index) == 1


def test_ingest_strict_raises_on_bad_json():
    with pytest.raises(SchemaError) as exc:
        ingest([doc_line("x", "T", "body"), "{broken"])
    assert exc.value.line == 2


def test_ingest_strict_raises_on_missing_fields():
    with pytest.raises(SchemaError):
        ingest(['{"id": "x", "title": "T"}'])
    with pytest.raises(SchemaError):
        ingest(['{"id": "x", "text": "body"}'])
    with pytest.raises(SchemaError):
        ingest(['{"title": "T", "text": "body"}'])


def test_ingest_rejects_bad_ids_and_empty_text():
    with pytest.raises(SchemaError):
        ingest([doc_line("has space", "T", "body")])
    with pytest.raises(SchemaError):
        ingest([doc_line("", "T", "body")])
    with pytest.raises(SchemaError):
        ingest([doc_line("x", "T", "   ")])


def test_ingest_duplicate_id():
    with pytest.raises(DuplicateId) as exc:
        ingest([doc_line("x", "T", "one"), doc_line("x", "T", "two")])
    assert exc.value.doc_id == "x"
    assert exc.value.line == 2


def test_ingest_lenient_counts_rejects():
    index = ingest(
        [doc_line("x", "T", "one"), "{bad", doc_line("x", "T", "dup")],
        strict=False,
    )
    assert len(index) == 1
    assert index.ingest_report.accepted == 1
    assert index.ingest_report.rejected == 2


def test_ingest_path_and_save_load_roundtrip(tmp_path):
    raw = tmp_path / "corpus.jsonl"
    raw.write_text("\n".join(corpus_lines(10)), encoding="utf-8")
    index = ingest_path(str(raw))
    saved = tmp_path / "index.json"
    index.save(str(saved))
    loaded = CorpusIndex.load(str(saved))
    assert loaded.order == index.order
    assert loaded.to_dict() == index.to_dict()
    hits_a = search(index, ["tag3"])
    hits_b = search(loaded, ["tag3"])
    assert hits_a == hits_b


def test_load_rejects_wrong_format(tmp_path):
    bad = tmp_path / "other.json"
    bad.write_text('{"format": "something-else", "version": 1}', encoding="utf-8")
    with pytest.raises(IndexFormatError):
        CorpusIndex.load(str(bad))


def test_load_rejects_wrong_version(tmp_path):
    bad = tmp_path / "old.json"
    bad.write_text(
        '{"format": "draftloop-corpus-index", "version": 99, "docs": []}',
        encoding="utf-8",
    )
    with pytest.raises(IndexFormatError):
        CorpusIndex.load(str(bad))


def test_query_terms_joins_and_lowercases():
    assert query_terms(["Solar Power", "GRID"]) == ["solar", "power", "grid"]
    assert query_terms([]) == []


def test_search_empty_index_raises():
    with pytest.raises(EmptyIndex):
        search(CorpusIndex(), ["anything"])


def test_search_top_k_validation():
    with pytest.raises(ValueError):
        search(small_index(), ["solar"], top_k=0)


def test_search_no_matches_returns_empty():
    assert search(small_index(), ["xylophone"]) == []
    assert search(small_index(), [" , "]) == []


def test_search_ranks_matching_docs():
    hits = search(small_index(), ["solar"])
    ids = [h.doc_id for h in hits]
    assert set(ids) == {"a1", "a4"}
    assert hits[0].rank == 1
    assert hits[0].score >= hits[1].score


def test_search_title_terms_count():
    hits = search(small_index(), ["history"])
    assert [h.doc_id for h in hits] == ["a3"]


def test_search_tie_breaks_on_ascending_id():
    index = ingest(
        [
            doc_line("b2", "T", "alpha beta gamma"),
            doc_line("b1", "T", "alpha beta gamma"),
        ]
    )
    hits = search(index, ["alpha"])
    assert [h.doc_id for h in hits] == ["b1", "b2"]
    assert hits[0].score == hits[1].score


def test_search_duplicate_keyword_terms_add_weight():
    index = ingest(
        [
            doc_line("c1", "T", "alpha alpha beta common"),
            doc_line("c2", "T", "beta beta alpha common"),
        ]
    )
    single = search(index, ["alpha beta"])
    doubled = search(index, ["alpha alpha beta"])
    assert {h.doc_id for h in single} == {"c1", "c2"}
    by_id = {h.doc_id: h.score for h in doubled}
    single_by_id = {h.doc_id: h.score for h in single}
    assert by_id["c1"] > single_by_id["c1"]


def test_search_top_k_truncates():
    index = ingest(corpus_lines(30))
    hits = search(index, ["marker"], top_k=5)
    assert len(hits) == 5
    assert [h.rank for h in hits] == [1, 2, 3, 4, 5]


def test_search_matches_brute_force_on_random_queries():
    n = 60
    rng = random.Random(7)
    vocab = ["marker", "energy", "case", "study", "document", "unique"]
    vocab += [f"tag{i}" for i in range(n)]
    lines = corpus_lines(n)
    docs = [json.loads(line) for line in lines]
    index = ingest(lines)
    for _ in range(40):
        keywords = [rng.choice(vocab) for _ in range(rng.randint(1, 4))]
        got = search(index, keywords, top_k=10)
        want = brute_force_search(docs, keywords, top_k=10)
        assert [h.doc_id for h in got] == [d for d, _ in want]
        for hit, (_, score) in zip(got, want):
            assert hit.score == pytest.approx(score, rel=1e-9)


def test_irrelevant_insertions_do_not_reorder_hits():
    lines = corpus_lines(20)
    index = ingest(lines)
    keywords = ["marker", "energy"]
    baseline = search(index, keywords, top_k=10)
    assert baseline
    for i in range(30):
        lines.append(doc_line(f"zz{i:03d}", f"Filler {i}", f"qqq{i} rrr{i} sss{i}"))
        grown = ingest(lines)
        hits = search(grown, keywords, top_k=10)
        assert [h.doc_id for h in hits] == [h.doc_id for h in baseline]
        for new, old in zip(hits, baseline):
            assert new.score == pytest.approx(old.score, rel=1e-12)


def test_dense_search_hook():
    vectors = {
        "a1": [1.0, 0.0],
        "a2": [0.0, 1.0],
        "a3": [0.7, 0.7],
        "a4": [0.9, 0.1],
    }
    index = small_index()

    def embed(texts: list[str]) -> list[list[float]]:
        out = []
        for text in texts:
            if text == "solar":
                out.append([1.0, 0.0])
            else:
                for doc_id, doc in index.docs.items():
                    if doc.body() == text:
                        out.append(vectors[doc_id])
                        break
                else:
                    out.append([0.0, 0.0])
        return out

    hits = search(index, ["solar"], top_k=2, embedder=embed)
    assert [h.doc_id for h in hits] == ["a1", "a4"]
    assert hits[0].score == pytest.approx(1.0)


def test_merge_context_appends_and_validates():
    index = small_index()
    ctx = RetrievalContext()
    pos = SectionPosition((1,))
    hits = search(index, ["power"], top_k=3)
    merge_context(ctx, pos, hits, index=index)
    assert ctx.section_ids(pos) == [h.doc_id for h in hits]
    with pytest.raises(UnknownDocId):
        merge_context(ctx, pos, [SearchHit("ghost", 1.0, 1)], index=index)
    assert "ghost" not in ctx.registry


def test_merge_context_dedup_across_sections():
    ctx = RetrievalContext()
    merge_context(ctx, SectionPosition((1,)), [SearchHit("a1", 1.0, 1)])
    merge_context(
        ctx, SectionPosition((2,)), [SearchHit("a1", 1.0, 1), SearchHit("a2", 0.5, 2)],
        dedup=True,
    )
    assert ctx.section_ids(SectionPosition((2,))) == ["a2"]


def test_document_body_includes_title():
    doc = CorpusDocument(id="x", title="Heading", text="Body text")
    assert doc.body() == "Heading\nBody text"
