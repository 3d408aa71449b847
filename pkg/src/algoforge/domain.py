"""Core data types, dataset loaders, the tag catalog and the category map."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import (
    DuplicateSampleIndex,
    IoFailure,
    MalformedCatalogLine,
    MalformedProblem,
    SampleIndexGap,
)

log = logging.getLogger(__name__)

SOURCE_FORMATS = ("generic", "nowcoder", "hdu", "jisuanke", "codeforces")

DEFAULT_TIME_LIMIT = 2.0
DEFAULT_MEMORY_LIMIT = 256 * 1024 * 1024
DEFAULT_OUTPUT_LIMIT = 64 * 1024 * 1024

TAG_NAME_RE = re.compile(r"[a-z0-9_]+")


def data_path(*parts: str) -> Path:
    """Path of a shipped data asset (prompts, rules, catalog, ...)."""
    node = resources.files("algoforge").joinpath("data")
    for part in parts:
        node = node.joinpath(part)
    return Path(str(node))


@dataclass(frozen=True)
class ResourceLimits:
    """Per-problem limits. A zero field means "use the global default"."""

    time_limit: float = 0.0
    memory_limit: int = 0
    output_limit: int = 0

    def __post_init__(self):
        if self.time_limit < 0 or self.memory_limit < 0 or self.output_limit < 0:
            raise ValueError("resource limits must be non-negative")

    def resolved(self) -> "ResourceLimits":
        return ResourceLimits(
            time_limit=self.time_limit or DEFAULT_TIME_LIMIT,
            memory_limit=self.memory_limit or DEFAULT_MEMORY_LIMIT,
            output_limit=self.output_limit or DEFAULT_OUTPUT_LIMIT,
        )


@dataclass(frozen=True)
class SampleCase:
    index: int
    input: str
    expected: str
    # Stored next to the sample files; never seen by the judge.
    explanation: str | None = None

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"sample index must be >= 1, got {self.index}")


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    source_format: str = "generic"
    truth_tags: tuple[str, ...] | None = None
    category: str | None = None
    hidden_cases: tuple[SampleCase, ...] | None = None
    limits: ResourceLimits = field(default_factory=ResourceLimits)
    # Samples supplied out-of-band, used when the statement has none to extract.
    samples: tuple[SampleCase, ...] | None = None
    extra: Mapping[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.id:
            raise MalformedProblem("must be a nonempty string", "id")
        if not self.statement or not self.statement.strip():
            raise MalformedProblem("must be a nonempty string", "statement")
        if self.source_format not in SOURCE_FORMATS:
            raise MalformedProblem(f"unknown format {self.source_format!r}", "source_format")
        for name in ("hidden_cases", "samples"):
            cases = getattr(self, name)
            if cases is not None:
                check_contiguous([c.index for c in cases], name)

    def with_statement(self, statement: str) -> "Problem":
        from dataclasses import replace

        return replace(self, statement=statement)

    def unknown_tags(self, catalog: "LabelCatalog") -> list[str]:
        return [t for t in (self.truth_tags or ()) if t not in catalog]


def check_contiguous(indices: list[int], where: str = "cases") -> None:
    seen = set()
    for idx in indices:
        if idx in seen:
            raise DuplicateSampleIndex(f"duplicate index {idx}", where)
        seen.add(idx)
    expected = set(range(1, len(indices) + 1))
    if seen != expected:
        missing = sorted(expected - seen)
        raise SampleIndexGap(f"indices must be contiguous from 1; missing {missing}", where)


@dataclass(frozen=True)
class LabelCatalog:
    """Ordered tag-name -> one-line description map."""

    entries: Mapping[str, str]

    def __contains__(self, tag: str) -> bool:
        return tag in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def render(self) -> str:
        return "".join(f"{name}: {desc}\n" for name, desc in self.entries.items())


@dataclass(frozen=True)
class CategoryMap:
    groups: Mapping[str, frozenset[str]]

    def tags(self) -> set[str]:
        out: set[str] = set()
        for members in self.groups.values():
            out |= members
        return out


def category_of(tag: str, cmap: CategoryMap) -> set[str]:
    """All groups containing ``tag``; empty for unknown tags."""
    return {name for name, members in cmap.groups.items() if tag in members}


def coverage_gaps(catalog: LabelCatalog, cmap: CategoryMap) -> dict[str, list[str]]:
    """Tags present in only one of the two sources.

    Returns ``{"uncategorized": [...], "uncatalogued": [...]}`` so that
    disagreements between the catalog and the map are reported, not dropped.
    """
    mapped = cmap.tags()
    return {
        "uncategorized": [t for t in catalog.names() if t not in mapped],
        "uncatalogued": sorted(t for t in mapped if t not in catalog),
    }


# --- loaders -------------------------------------------------------------


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(path, exc) from exc


def _parse_cases(raw, where: str) -> tuple[SampleCase, ...]:
    if not isinstance(raw, list):
        raise MalformedProblem("must be an array", where)
    cases = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise MalformedProblem("must be an object", f"{where}[{i}]")
        try:
            index = item["index"]
            inp = item["input"]
            exp = item["expected"]
        except KeyError as exc:
            raise MalformedProblem(f"missing key {exc.args[0]!r}", f"{where}[{i}]") from None
        if not isinstance(index, int) or isinstance(index, bool) or index < 1:
            raise MalformedProblem("must be a positive integer", f"{where}[{i}].index")
        if not isinstance(inp, str) or not isinstance(exp, str):
            raise MalformedProblem("input/expected must be strings", f"{where}[{i}]")
        explanation = item.get("explanation")
        cases.append(SampleCase(index, inp, exp, explanation))
    check_contiguous([c.index for c in cases], where)
    return tuple(sorted(cases, key=lambda c: c.index))


_KNOWN_KEYS = {"id", "statement", "source_format", "tags", "category", "cases", "limits", "samples"}


def problem_from_dict(doc: Mapping, catalog: LabelCatalog | None = None) -> Problem:
    if not isinstance(doc, Mapping):
        raise MalformedProblem("problem document must be a JSON object")
    pid = doc.get("id")
    if not isinstance(pid, str) or not pid:
        raise MalformedProblem("must be a nonempty string", "id")
    statement = doc.get("statement")
    if not isinstance(statement, str) or not statement.strip():
        raise MalformedProblem("must be a nonempty string", "statement")
    fmt = doc.get("source_format") or "generic"
    if fmt not in SOURCE_FORMATS:
        raise MalformedProblem(f"unknown format {fmt!r}", "source_format")

    tags = doc.get("tags")
    if tags is not None:
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise MalformedProblem("must be an array of strings", "tags")
        tags = tuple(tags)
    category = doc.get("category")
    if category is not None and not isinstance(category, str):
        raise MalformedProblem("must be a string", "category")

    hidden = _parse_cases(doc["cases"], "cases") if doc.get("cases") is not None else None
    samples = _parse_cases(doc["samples"], "samples") if doc.get("samples") is not None else None

    lim = doc.get("limits") or {}
    if not isinstance(lim, Mapping):
        raise MalformedProblem("must be an object", "limits")
    try:
        limits = ResourceLimits(
            time_limit=float(lim.get("time_s", 0) or 0),
            memory_limit=int(lim.get("memory_bytes", 0) or 0),
            output_limit=int(lim.get("output_bytes", 0) or 0),
        )
    except (TypeError, ValueError) as exc:
        raise MalformedProblem(str(exc), "limits") from None

    extra = {k: v for k, v in doc.items() if k not in _KNOWN_KEYS}
    problem = Problem(
        id=pid,
        statement=statement,
        source_format=fmt,
        truth_tags=tags,
        category=category,
        hidden_cases=hidden,
        limits=limits,
        samples=samples,
        extra=extra,
    )
    if catalog is not None:
        unknown = problem.unknown_tags(catalog)
        if unknown:
            log.warning("problem %s: tags not in catalog: %s", pid, ", ".join(unknown))
    return problem


def load_problem(path, catalog: LabelCatalog | None = None) -> Problem:
    text = _read_text(path)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedProblem(f"invalid JSON: {exc}") from None
    return problem_from_dict(doc, catalog)


def _cases_to_list(cases):
    out = []
    for c in cases:
        item = {"index": c.index, "input": c.input, "expected": c.expected}
        if c.explanation is not None:
            item["explanation"] = c.explanation
        out.append(item)
    return out


def problem_to_dict(problem: Problem) -> dict:
    doc: dict = dict(problem.extra)
    doc.update(
        id=problem.id,
        statement=problem.statement,
        source_format=problem.source_format,
        tags=list(problem.truth_tags) if problem.truth_tags is not None else None,
        category=problem.category,
        cases=_cases_to_list(problem.hidden_cases) if problem.hidden_cases is not None else None,
        limits={
            "time_s": problem.limits.time_limit,
            "memory_bytes": problem.limits.memory_limit,
            "output_bytes": problem.limits.output_limit,
        },
    )
    if problem.samples is not None:
        doc["samples"] = _cases_to_list(problem.samples)
    return doc


def dump_problem(problem: Problem, path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(problem), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_dataset(directory, catalog: LabelCatalog | None = None) -> list[Problem]:
    """Load every ``*.json`` problem file in ``directory``, sorted by id."""
    problems = [load_problem(p, catalog) for p in sorted(Path(directory).glob("*.json"))]
    ids = [p.id for p in problems]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise MalformedProblem(f"duplicate problem id(s): {dupes}", "id")
    return sorted(problems, key=lambda p: p.id)


def parse_label_catalog(text: str) -> LabelCatalog:
    entries: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        name, sep, desc = stripped.partition(":")
        name = name.strip()
        if not sep or not TAG_NAME_RE.fullmatch(name):
            raise MalformedCatalogLine(n, line)
        if name in entries:
            raise MalformedCatalogLine(n, line)
        entries[name] = desc.strip()
    return LabelCatalog(entries)


def load_label_catalog(path=None) -> LabelCatalog:
    return parse_label_catalog(_read_text(path or data_path("oi_wiki_tags.txt")))


def load_category_map(path=None) -> CategoryMap:
    doc = json.loads(_read_text(path or data_path("categories.json")))
    if not isinstance(doc, dict):
        raise MalformedProblem("category map must be a JSON object")
    groups = {}
    for name, tags in doc.items():
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise MalformedProblem("must be an array of tag names", name)
        groups[name] = frozenset(tags)
    return CategoryMap(groups)
