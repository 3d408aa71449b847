from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from algoforge.domain import (
    Problem,
    ResourceLimits,
    SampleCase,
    category_of,
    coverage_gaps,
    dump_problem,
    load_category_map,
    load_dataset,
    load_label_catalog,
    load_problem,
    parse_label_catalog,
    problem_from_dict,
)
from algoforge.errors import DuplicateSampleIndex, MalformedCatalogLine, MalformedProblem, SampleIndexGap

from conftest import GOLDEN


def test_golden_problem_loads(golden_problem):
    assert golden_problem.id == "appendix-i"
    assert golden_problem.hidden_cases[0].expected == "7\n"
    assert golden_problem.limits.time_limit == 1.0


def test_empty_statement_is_rejected(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"id": "x", "statement": "  "}))
    with pytest.raises(MalformedProblem) as info:
        load_problem(path)
    assert info.value.field == "statement"


def test_index_gap_is_rejected(tmp_path):
    path = tmp_path / "p.json"
    cases = [{"index": 1, "input": "1", "expected": "1"}, {"index": 3, "input": "3", "expected": "3"}]
    path.write_text(json.dumps({"id": "x", "statement": "s", "cases": cases}))
    with pytest.raises(DuplicateSampleIndex):
        load_problem(path)
    with pytest.raises(SampleIndexGap):
        load_problem(path)


def test_duplicate_index_is_rejected():
    cases = [{"index": 1, "input": "1", "expected": "1"}, {"index": 1, "input": "2", "expected": "2"}]
    with pytest.raises(DuplicateSampleIndex):
        problem_from_dict({"id": "x", "statement": "s", "cases": cases})


def test_unknown_fields_are_preserved_but_ignored():
    p = problem_from_dict({"id": "x", "statement": "s", "origin": "contest 7"})
    assert p.extra["origin"] == "contest 7"


def test_absent_keys_take_defaults():
    p = problem_from_dict({"id": "x", "statement": "s"})
    assert p.hidden_cases is None and p.truth_tags is None
    assert p.limits.resolved() == ResourceLimits(2.0, 256 * 1024 * 1024, 64 * 1024 * 1024)


def test_negative_limits_rejected():
    with pytest.raises(ValueError):
        ResourceLimits(time_limit=-1)


def test_shipped_catalog():
    catalog = load_label_catalog()
    assert catalog.entries["dp"] == "Dynamic Programming - includes knapsack, tree DP, interval DP, digit DP."
    assert len(catalog) == 45


def test_catalog_edge_cases():
    assert len(parse_label_catalog("")) == 0
    with pytest.raises(MalformedCatalogLine):
        parse_label_catalog("not a tag line")


def test_catalog_count_equals_nonempty_lines():
    text = "a: one\n\nb: two\n# note\nc_3: three\n"
    assert parse_label_catalog(text).names() == ["a", "b", "c_3"]


def test_category_lookup():
    cmap = load_category_map()
    assert category_of("dijkstra", cmap) == {"Graph & Network"}
    assert category_of("patience_sorting", cmap) == {"DP & Optimization", "Sorting & Search"}
    assert category_of("nonexistent_tag", cmap) == set()


def test_coverage_gaps_are_reported():
    gaps = coverage_gaps(load_label_catalog(), load_category_map())
    # The catalog spells it brute_force; the map carries both spellings.
    assert "brute_force" not in gaps["uncategorized"]
    assert "bruteforce" in gaps["uncatalogued"]
    assert all(isinstance(v, list) for v in gaps.values())


def test_dataset_rejects_duplicate_ids(tmp_path):
    for name in ("a.json", "b.json"):
        (tmp_path / name).write_text(json.dumps({"id": "same", "statement": "s"}))
    with pytest.raises(MalformedProblem):
        load_dataset(tmp_path)


text_st = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=40).filter(lambda s: s.strip())
case_st = st.tuples(st.text(max_size=20), st.text(max_size=20))


@given(
    pid=st.from_regex(r"[a-z][a-z0-9-]{0,10}", fullmatch=True),
    statement=text_st,
    tags=st.none() | st.lists(st.from_regex(r"[a-z_]{1,8}", fullmatch=True), max_size=3).map(tuple),
    cases=st.none() | st.lists(case_st, min_size=1, max_size=4),
    tl=st.floats(0, 10, allow_nan=False),
)
def test_problem_round_trip(tmp_path_factory, pid, statement, tags, cases, tl):
    hidden = None if cases is None else tuple(SampleCase(i, a, b) for i, (a, b) in enumerate(cases, 1))
    problem = Problem(pid, statement, truth_tags=tags, hidden_cases=hidden, limits=ResourceLimits(time_limit=tl))
    path = tmp_path_factory.mktemp("rt") / "p.json"
    dump_problem(problem, path)
    assert load_problem(path) == problem


def test_fixture_round_trip(tmp_path, golden_problem):
    dump_problem(golden_problem, tmp_path / "p.json")
    assert load_problem(tmp_path / "p.json") == golden_problem
    assert json.loads((GOLDEN / "problem.json").read_text())["cases"][0]["expected"] == "7\n"
