"""Deterministic extraction of sample cases from problem statements.

Each source format has a rule file (``data/rules/<format>.patterns``) listing
heading patterns for input, output and explanation blocks, plus which block
shapes may follow a heading (``fence``, ``indent``, ``paragraph``).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from .domain import SOURCE_FORMATS, SampleCase, data_path
from .errors import IoFailure, NoSamplesFound, UnbalancedSamples, UnknownFormat

BLOCK_KINDS = ("fence", "indent", "paragraph")
_FENCE_RE = re.compile(r"^\s*(`{3,}|~{3,})")


@dataclass(frozen=True)
class ExtractionRule:
    format: str
    input_markers: tuple[re.Pattern, ...]
    output_markers: tuple[re.Pattern, ...]
    block_delimiters: tuple[str, ...] = ("fence", "indent")
    explain_markers: tuple[re.Pattern, ...] = ()
    skip_lines: tuple[re.Pattern, ...] = ()

    def __post_init__(self):
        if not self.input_markers or not self.output_markers:
            raise ValueError(f"rule {self.format!r} needs at least one input and one output marker")
        bad = [b for b in self.block_delimiters if b not in BLOCK_KINDS]
        if bad or not self.block_delimiters:
            raise ValueError(f"rule {self.format!r}: invalid block delimiters {bad}")


def parse_rule(fmt: str, text: str) -> ExtractionRule:
    keys: dict[str, list] = {"input": [], "output": [], "explain": [], "skip": [], "block": []}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep or key not in keys:
            raise ValueError(f"{fmt}.patterns line {n}: expected '<input|output|explain|skip|block>: <value>'")
        value = value.strip()
        if key == "block":
            keys[key].append(value)
        else:
            try:
                keys[key].append(re.compile(value))
            except re.error as exc:
                raise ValueError(f"{fmt}.patterns line {n}: bad pattern {value!r}: {exc}") from None
    return ExtractionRule(
        format=fmt,
        input_markers=tuple(keys["input"]),
        output_markers=tuple(keys["output"]),
        block_delimiters=tuple(keys["block"]) or ("fence", "indent"),
        explain_markers=tuple(keys["explain"]),
        skip_lines=tuple(keys["skip"]),
    )


def load_rules(directory=None) -> dict[str, ExtractionRule]:
    directory = Path(directory) if directory else data_path("rules")
    rules = {}
    for path in sorted(directory.glob("*.patterns")):
        rules[path.stem] = parse_rule(path.stem, path.read_text(encoding="utf-8"))
    if "generic" not in rules:
        raise ValueError(f"{directory}: generic.patterns is required")
    return rules


_DEFAULT_RULES: dict[str, ExtractionRule] | None = None


def default_rules() -> dict[str, ExtractionRule]:
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = load_rules()
    return _DEFAULT_RULES


def _heading_text(line: str) -> str:
    s = line.strip()
    s = re.sub(r"^#{1,6}\s*", "", s)
    s = s.strip("*_ ").strip()
    s = re.sub(r"[:：]\s*$", "", s)
    return s.strip("*_ ").strip()


def _classify(line: str, rule: ExtractionRule) -> str | None:
    head = _heading_text(line)
    if not head:
        return None
    for kind, markers in (("input", rule.input_markers), ("output", rule.output_markers),
                          ("explain", rule.explain_markers)):
        if any(m.fullmatch(head) for m in markers):
            return kind
    return None


def _normalize_block(lines: list[str]) -> str:
    while lines and not lines[-1].strip():
        lines.pop()
    if lines and not lines[0].strip():
        lines.pop(0)
    return "\n".join(line.rstrip("\r") for line in lines)


def _read_fence(lines, start):
    """Return (body_lines, next_index) for a fence opening at ``start``."""
    opener = _FENCE_RE.match(lines[start]).group(1)
    i = start + 1
    body = []
    while i < len(lines):
        if lines[i].strip().startswith(opener[0] * len(opener)) and not lines[i].strip().strip(opener[0]):
            return body, i + 1
        body.append(lines[i])
        i += 1
    return body, i


def _is_indented(line: str) -> bool:
    return line.startswith("    ") or line.startswith("\t")


def _read_block(lines, i, rule, allowed, is_boundary):
    """Try to read a block at or after ``i``; return (text, next_index) or (None, i)."""
    j = i
    while j < len(lines) and (not lines[j].strip() or any(p.fullmatch(lines[j].strip()) for p in rule.skip_lines)):
        j += 1
    if j >= len(lines):
        return None, i
    line = lines[j]
    if "fence" in allowed and _FENCE_RE.match(line):
        body, nxt = _read_fence(lines, j)
        return _normalize_block(body), nxt
    if "indent" in allowed and _is_indented(line):
        body = []
        while j < len(lines) and (_is_indented(lines[j]) or not lines[j].strip()):
            body.append(lines[j])
            j += 1
        text = _normalize_block(body)
        stripped = [ln[4:] if ln.startswith("    ") else ln[1:] if ln.startswith("\t") else ln
                    for ln in text.split("\n")]
        return "\n".join(stripped), j
    if "paragraph" in allowed and not is_boundary(line):
        body = []
        while j < len(lines) and lines[j].strip() and not is_boundary(lines[j]):
            if not any(p.fullmatch(lines[j].strip()) for p in rule.skip_lines):
                body.append(lines[j])
            j += 1
        return _normalize_block(body), j
    return None, i


def extract_samples(statement: str, fmt: str = "generic", rules=None) -> list[SampleCase]:
    """Parse sample cases out of ``statement`` using the rule for ``fmt``.

    Inputs and outputs are paired positionally. Explanation blocks attach to
    the most recent output block.
    """
    if not statement or not statement.strip():
        raise ValueError("statement must be nonempty")
    rules = rules if rules is not None else default_rules()
    if fmt not in rules:
        if fmt in SOURCE_FORMATS:
            fmt = "generic"
        else:
            raise UnknownFormat(fmt)
    rule = rules[fmt]

    lines = statement.replace("\r\n", "\n").split("\n")

    def is_boundary(line):
        return _classify(line, rule) is not None or line.lstrip().startswith("#")

    inputs: list[str] = []
    outputs: list[str] = []
    explains: dict[int, str] = {}
    i = 0
    while i < len(lines):
        line = lines[i]
        if _FENCE_RE.match(line):
            # Skip fenced content that is not attached to a marker.
            _, i = _read_fence(lines, i)
            continue
        kind = _classify(line, rule)
        if kind is None:
            i += 1
            continue
        allowed = ("paragraph",) if kind == "explain" else rule.block_delimiters
        if kind == "explain" and "fence" in rule.block_delimiters:
            allowed = ("fence", "paragraph")
        text, nxt = _read_block(lines, i + 1, rule, allowed, is_boundary)
        if text is None:
            i += 1
            continue
        if kind == "input":
            inputs.append(text)
        elif kind == "output":
            outputs.append(text)
        elif outputs and len(outputs) not in explains:
            explains[len(outputs)] = text
        i = nxt

    if not inputs and not outputs:
        raise NoSamplesFound("no sample blocks found")
    if len(inputs) != len(outputs):
        raise UnbalancedSamples(len(inputs), len(outputs))
    return [
        SampleCase(k, inp, out, explains.get(k))
        for k, (inp, out) in enumerate(zip(inputs, outputs), 1)
    ]


def _with_newline(text: str) -> str:
    return text.rstrip("\n") + "\n"


def sample_files(cases) -> list[tuple[str, str]]:
    """(relative name, content) pairs in index order, without touching disk."""
    out = []
    for case in sorted(cases, key=lambda c: c.index):
        out.append((f"{case.index}.in", _with_newline(case.input)))
        out.append((f"{case.index}.ans", _with_newline(case.expected)))
        if case.explanation is not None:
            out.append((f"{case.index}-explain.txt", _with_newline(case.explanation)))
    return out


def write_sample_files(cases, directory) -> list[Path]:
    cases = list(cases)
    if not cases:
        raise ValueError("no cases to write")
    directory = Path(directory)
    written = []
    for name, content in sample_files(cases):
        path = directory / name
        try:
            directory.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(content)
        except OSError as exc:
            raise IoFailure(path, exc) from exc
        written.append(path)
    return written


def read_sample_files(directory) -> list[SampleCase]:
    """Inverse of :func:`write_sample_files`."""
    directory = Path(directory)
    cases = []
    k = 1
    while (directory / f"{k}.in").exists():
        inp = (directory / f"{k}.in").read_text(encoding="utf-8")
        ans_path = directory / f"{k}.ans"
        if not ans_path.exists():
            raise IoFailure(ans_path, "missing answer file")
        ans = ans_path.read_text(encoding="utf-8")
        explain_path = directory / f"{k}-explain.txt"
        explain = explain_path.read_text(encoding="utf-8").rstrip("\n") if explain_path.exists() else None
        cases.append(SampleCase(k, inp.rstrip("\n"), ans.rstrip("\n"), explain))
        k += 1
    return cases
