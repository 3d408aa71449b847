from __future__ import annotations

import json
import random
import shutil

import httpx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from algoforge.domain import Problem
from algoforge.errors import EmbeddingBackendMismatch, EmptyCorpus, ProviderError
from algoforge.llm import Gateway, ReplayBackend, ReplayScript
from algoforge.retrieval import (
    Chunk,
    Index,
    LexicalEmbedder,
    RemoteEmbedder,
    build_index,
    chunk_markdown,
    cosine,
    embed,
    ingest_kb,
    query_index,
    render_context,
    retrieve_similar_problems,
    summarize_knowledge,
)

from conftest import KB, golden_text


def write_bank(directory, entries):
    directory.mkdir(parents=True, exist_ok=True)
    for pid, statement, solution in entries:
        (directory / f"{pid}.json").write_text(json.dumps({"id": pid, "statement": statement, "solution": solution}))
    return directory


BANK = [
    ("b1", "Compute the largest Manhattan distance between two point sets.", "int main(){return 0;}"),
    ("b2", "Answer range sum queries with point updates.", "int main(){return 1;}"),
    ("b3", "Pack items into a knapsack of capacity W maximizing value.", "int main(){return 2;}"),
]


# --- chunking ----------------------------------------------------------------


def test_fixture_kb_has_distance_chunk():
    index = ingest_kb(KB)
    assert any("distance" in " ".join(c.heading_path).lower() and c.doc_id == "geometry/distance.md"
               for c in index.items)


def test_chunk_spans_match_source():
    for path in sorted(KB.rglob("*.md")):
        text = path.read_text()
        for c in chunk_markdown(path.name, text):
            assert text[c.char_span[0]:c.char_span[1]] == c.body
            assert c.body.strip()


def test_headings_inside_fences_do_not_split():
    text = "# Top\n\nIntro.\n\n```\n# not a heading\n```\n\n## Sub\n\nBody.\n"
    chunks = chunk_markdown("d", text)
    assert [c.heading_path for c in chunks] == [("Top",), ("Top", "Sub")]
    assert "# not a heading" in chunks[0].body


def test_long_sections_split_at_paragraphs():
    paragraphs = [("word%d " % i) * 60 for i in range(10)]
    text = "# Long\n\n" + "\n\n".join(paragraphs) + "\n"
    chunks = chunk_markdown("d", text, max_chars=1000)
    assert len(chunks) > 1
    assert all(len(c.body) <= 1000 for c in chunks)
    assert all(c.heading_path == ("Long",) for c in chunks)


markdown = st.lists(
    st.one_of(
        st.from_regex(r"#{1,3} [A-Za-z]{1,8}", fullmatch=True),
        st.text(st.characters(whitelist_categories=("L", "N", "Zs")), min_size=1, max_size=60),
        st.just(""),
    ),
    max_size=20,
).map("\n".join)


@given(markdown)
def test_chunking_invariants(text):
    chunks = chunk_markdown("doc", text, max_chars=80)
    for c in chunks:
        assert c.body.strip()
        assert text[c.char_span[0]:c.char_span[1]] == c.body
    spans = [c.char_span for c in chunks]
    assert spans == sorted(spans)


# --- embedding --------------------------------------------------------------------


def test_empty_text_is_zero_vector():
    v = embed("")
    assert len(v.values) == 256 and not any(v.values)
    assert v.backend_id == "lexical-tf-blake2b-256"


def test_identical_texts_embed_identically():
    assert embed("Manhattan distance") == embed("Manhattan distance")


def test_distinct_texts_less_similar_than_self():
    e = LexicalEmbedder()
    a, b = e.embed_array("Manhattan distance"), e.embed_array("segment tree lazy propagation")
    assert cosine(a, b) < cosine(a, a) == pytest.approx(1.0)
    assert cosine(b, b) == pytest.approx(1.0)


@given(st.text(max_size=80), st.text(max_size=80))
def test_cosine_bounds(x, y):
    e = LexicalEmbedder()
    a, b = e.embed_array(x), e.embed_array(y)
    assert -1.0 <= cosine(a, b) <= 1.0
    assert np.all(np.isfinite(a))
    if any(a):
        assert cosine(a, a) == pytest.approx(1.0)


def test_remote_embedder_contract():
    def handler(request):
        body = json.loads(request.content)
        data = [{"index": i, "embedding": [float(len(t)), 1.0]} for i, t in enumerate(body["input"])]
        return httpx.Response(200, json={"data": list(reversed(data))})

    e = RemoteEmbedder("http://emb.test/v1", "bge", transport=httpx.MockTransport(handler))
    rows = e.embed_many(["a", "abc"])
    assert rows.shape == (2, 2)
    assert np.allclose(np.linalg.norm(rows, axis=1), 1.0)
    assert rows[1][0] > rows[0][0]


def test_remote_embedder_failures_are_provider_errors():
    e = RemoteEmbedder("http://emb.test/v1", "bge", transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    with pytest.raises(ProviderError):
        e.embed_array("x")


# --- index & query -------------------------------------------------------------


def test_empty_corpus(tmp_path):
    with pytest.raises(EmptyCorpus):
        ingest_kb(tmp_path)


def test_golden_statement_retrieves_manhattan(golden_problem):
    hits = query_index(ingest_kb(KB), golden_problem.statement, k=3)
    assert "Manhattan" in hits[0].chunk.body
    assert hits[0].chunk.doc_id == "geometry/distance.md"


def test_hits_sorted_and_clamped(golden_problem):
    index = ingest_kb(KB)
    hits = query_index(index, golden_problem.statement, k=100)
    assert len(hits) == len(index)
    scores = [h.score for h in hits]
    assert scores == sorted(scores, reverse=True)
    keys = [(-h.score, h.chunk.sort_key) for h in hits]
    assert keys == sorted(keys)


def test_single_chunk_corpus(tmp_path):
    (tmp_path / "one.md").write_text("# Only\n\nManhattan distance sums absolute differences.\n")
    index = ingest_kb(tmp_path)
    [hit] = query_index(index, "absolute differences", k=1)
    assert hit.chunk.heading_path == ("Only",)
    assert 0 < hit.score <= 1


def test_ties_break_by_doc_and_span(tmp_path):
    for name in ("b.md", "a.md"):
        (tmp_path / name).write_text("same words here\n")
    hits = query_index(ingest_kb(tmp_path), "same words", k=2)
    assert [h.chunk.doc_id for h in hits] == ["a.md", "b.md"]
    assert hits[0].score == hits[1].score


def test_ingest_order_does_not_change_results(golden_problem, tmp_path):
    baseline = [(h.chunk.sort_key, h.score) for h in query_index(ingest_kb(KB), golden_problem.statement, k=5)]
    chunks = list(ingest_kb(KB).items)
    rng = random.Random(7)
    for _ in range(5):
        rng.shuffle(chunks)
        index = build_index(chunks, "wiki")
        assert [(h.chunk.sort_key, h.score) for h in query_index(index, golden_problem.statement, k=5)] == baseline


def test_index_persistence_and_idempotent_ingest(tmp_path):
    kb = tmp_path / "kb"
    shutil.copytree(KB, kb)
    cache = tmp_path / "index.json"
    first = ingest_kb(kb, cache=cache)
    stamp = cache.stat().st_mtime_ns
    again = ingest_kb(kb, cache=cache)
    assert cache.stat().st_mtime_ns == stamp
    assert again.content_hash == first.content_hash and again.items == first.items
    (kb / "extra.md").write_text("# Extra\n\nNew material.\n")
    changed = ingest_kb(kb, cache=cache)
    assert changed.content_hash != first.content_hash and len(changed) == len(first) + 1


def test_backend_mismatch_on_load(tmp_path):
    ingest_kb(KB).save(tmp_path / "i.json")
    with pytest.raises(EmbeddingBackendMismatch):
        Index.load(tmp_path / "i.json", LexicalEmbedder(dim=128))
    with pytest.raises(EmbeddingBackendMismatch):
        query_index(Index.load(tmp_path / "i.json"), "x", embedder=LexicalEmbedder(dim=64))


# --- problem bank ----------------------------------------------------------------


def test_bank_ingest(tmp_path):
    index = ingest_kb(write_bank(tmp_path / "bank", BANK), "problem_bank")
    assert len(index) == 3
    assert sorted(e.problem_id for e in index.items) == ["b1", "b2", "b3"]


def test_similar_problems_exclude_self(tmp_path):
    index = ingest_kb(write_bank(tmp_path / "bank", BANK), "problem_bank")
    me = Problem("b1", BANK[0][1])
    [nearest] = retrieve_similar_problems(index, me, k=1)
    assert nearest.problem_id != "b1"


def test_exact_statement_ranks_first(tmp_path):
    index = ingest_kb(write_bank(tmp_path / "bank", BANK), "problem_bank")
    other = Problem("query", BANK[2][1])
    assert retrieve_similar_problems(index, other, k=3)[0].problem_id == "b3"


def test_small_bank_clamps(tmp_path):
    index = ingest_kb(write_bank(tmp_path / "bank", BANK[:2]), "problem_bank")
    assert len(retrieve_similar_problems(index, Problem("q", "anything"), k=5)) == 2


# --- summarization --------------------------------------------------------------


def agent2_session(reply="summary"):
    script = ReplayScript()
    script.add("Agent2", 0, reply)
    return Gateway(ReplayBackend(script)).session()


def test_summary_is_one_verbatim_call(golden_problem):
    session = agent2_session(golden_text("Agent2-domain.txt"))
    hits = query_index(ingest_kb(KB), golden_problem.statement, k=5)
    assert summarize_knowledge(golden_problem, hits, session) == golden_text("Agent2-domain.txt")
    [ex] = session.exchanges
    assert ex.user.count("[Source ") == 5 or ex.system.count("[Source ") == 5
    rendered = ex.system + ex.user
    positions = [rendered.index(f"[Source {n}:") for n in range(1, 6)]
    assert positions == sorted(positions)


def test_zero_hits_still_calls(golden_problem):
    session = agent2_session()
    assert summarize_knowledge(golden_problem, [], session) == "summary"
    assert len(session.exchanges) == 1
    assert "[Source" not in session.exchanges[0].user


def test_context_lists_similar_solutions():
    from algoforge.retrieval import ProblemBankEntry

    similar = [ProblemBankEntry("x", "s1", "int main(){}"), ProblemBankEntry("y", "s2", "int main(){return 0;}")]
    ctx = render_context([], similar)
    assert ctx.count("Accepted solution:") == 2
    assert ctx.index("[Similar problem 1: x]") < ctx.index("[Similar problem 2: y]")


def test_chunk_dict_round_trip():
    c = Chunk("d", ("A", "B"), "body", (3, 7))
    assert Chunk.from_dict(c.to_dict()) == c
