"""Agent stages: prompt construction, one gateway call per attempt, strict parsing.

Iteration numbers used as gateway keys: Agent0, Agent1 and Agent2 run at
iteration 0; Agent3 and Agent4 use the loop iteration whose plan or code they
produce; Agent5 uses the iteration it checks.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

from .domain import LabelCatalog, Problem, SampleCase
from .errors import (
    AlgoforgeError,
    CheckFailed,
    ImplementationFailed,
    MissingSection,
    NoCodeFound,
    NoOptionsParsed,
    NoPlanParsed,
    NoSignalParsed,
    ParseError,
    ReasoningFailed,
    SelectionFailed,
    UnknownSignal,
)
from .llm import PromptTemplate, Session, load_template, render_template

log = logging.getLogger(__name__)

R_PARSE = 2
NO_DOMAIN_TEXT = "(no domain knowledge provided)"


class ControlSignal(str, Enum):
    PASS = "PASS"
    FIX = "FIX"
    RETHINK = "RETHINK"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class BranchPlan:
    option_index: int
    tags: tuple[str, ...]
    rationale: str = ""

    def __post_init__(self):
        if not self.tags:
            raise ValueError("a branch needs at least one tag")
        if self.option_index < 1:
            raise ValueError("option indices start at 1")

    def render(self) -> str:
        return f"Option{self.option_index}: [{', '.join(self.tags)}]\nRationale: {self.rationale}"


@dataclass(frozen=True)
class SelectionResult:
    branches: tuple[BranchPlan, ...]
    raw: str = ""
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.branches:
            raise NoOptionsParsed("selection needs at least one branch")
        if [b.option_index for b in self.branches] != list(range(1, len(self.branches) + 1)):
            raise ValueError("option indices must be contiguous from 1")

    def render(self) -> str:
        return "\n\n".join(b.render() for b in self.branches) + "\n"

    def to_json(self) -> str:
        doc = {f"Option{b.option_index}": {"tags": list(b.tags), "rationale": b.rationale} for b in self.branches}
        return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SelectionResult":
        doc = json.loads(text)
        branches = []
        for n, (key, val) in enumerate(doc.items(), 1):
            branches.append(BranchPlan(n, tuple(val["tags"]), val.get("rationale", "")))
        return cls(tuple(branches))


@dataclass(frozen=True)
class SolutionPlan:
    analysis: str
    steps: tuple[str, ...]
    mode: str = "reasoning"
    raw: str = ""
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.steps:
            raise NoPlanParsed("a plan needs at least one step")
        if self.mode not in ("reasoning", "replanning", "distilled"):
            raise ValueError(f"unknown plan mode {self.mode!r}")

    @property
    def text(self) -> str:
        """Text handed to downstream prompts: the verbatim model output when available."""
        if self.raw:
            return self.raw
        steps = "\n".join(f"{n}. {s}" for n, s in enumerate(self.steps, 1))
        return f"Analyze: {self.analysis}\n\nSolve step:\n{steps}\n"


@dataclass(frozen=True)
class CodeArtifact:
    source: str
    mode: str = "implementation"
    raw: str = ""

    def __post_init__(self):
        if "main(" not in self.source:
            raise NoCodeFound("code has no main(")
        if "```" in self.source:
            raise NoCodeFound("code still contains a markdown fence")


@dataclass(frozen=True)
class FeedbackReport:
    analysis: str
    error: str
    fix: str
    signal: ControlSignal
    raw: str = ""


# --- parsers ---------------------------------------------------------------

_OPTION_RE = re.compile(r"^\s*\**\s*Option\s*(\d+)\s*\**\s*[:：]\s*\**\s*\[(.*)\]\s*\**\s*$", re.I)
_RATIONALE_RE = re.compile(r"^\s*\**\s*Rationale\s*\**\s*[:：]\s*\**\s*(.*)$", re.I)
_FENCE_LINE_RE = re.compile(r"^\s*(`{3,}|~{3,})")


def _clean_tag(tag: str) -> str:
    return tag.strip().strip("'\"`").strip()


def parse_selection(text: str) -> SelectionResult:
    """Parse ``OptionN: [tags]`` lines and the ``Rationale:`` line after each."""
    lines = text.replace("\r\n", "\n").split("\n")
    found: list[tuple[tuple[str, ...], str]] = []
    notes: list[str] = []
    i = 0
    while i < len(lines):
        m = _OPTION_RE.match(lines[i])
        if not m:
            i += 1
            continue
        tags = tuple(t for t in (_clean_tag(x) for x in m.group(2).split(",")) if t)
        rationale = ""
        j = i + 1
        while j < len(lines) and not lines[j].strip():
            j += 1
        if j < len(lines):
            rm = _RATIONALE_RE.match(lines[j])
            if rm:
                rationale = rm.group(1).strip()
                i = j
        if not tags:
            notes.append(f"Option{m.group(1)} dropped: empty tag list")
        else:
            if not rationale:
                notes.append(f"Option{m.group(1)} has no rationale")
            if int(m.group(1)) != len(found) + 1:
                notes.append(f"Option{m.group(1)} renumbered to Option{len(found) + 1}")
            found.append((tags, rationale))
        i += 1
    if not found:
        raise NoOptionsParsed("no 'OptionN: [...]' line with tags found")
    branches = tuple(BranchPlan(n, tags, rat) for n, (tags, rat) in enumerate(found, 1))
    return SelectionResult(branches, text, tuple(notes))


_ANALYZE_RE = re.compile(r"^\s*\**\s*Analy[sz]e\s*\**\s*[:：]", re.I | re.M)
_SOLVE_RE = re.compile(r"^\s*\**\s*Solve\s+steps?\s*\**\s*[:：]\s*\**", re.I | re.M)
_STEP_RE = re.compile(r"^\s*(\d+)\s*[.)、]\s*(.*)$")
_SEMI_TAIL_RE = re.compile(r";[\s.。,，!！]*$")


def _repair_step(step: str, n: int, notes: list[str]) -> str:
    step = step.strip()
    if step.endswith(";"):
        return step
    m = _SEMI_TAIL_RE.search(step)
    if m:
        notes.append(f"step {n}: trailing {step[m.start() + 1:].strip()!r} after ';' removed")
        return step[: m.start() + 1]
    notes.append(f"step {n}: missing ';' appended")
    return step + ";"


def parse_plan(text: str, mode: str = "reasoning") -> SolutionPlan:
    a = _ANALYZE_RE.search(text)
    s = _SOLVE_RE.search(text)
    if s is None:
        raise NoPlanParsed("no 'Solve step:' section" + ("" if a else " and no 'Analyze:' section"))
    notes: list[str] = []
    if a is not None and a.start() < s.start():
        analysis = text[a.end():s.start()].strip()
    else:
        analysis = ""
        notes.append("no 'Analyze:' section before the steps")

    steps: list[str] = []
    numbers: list[int] = []
    for line in text[s.end():].split("\n"):
        if _FENCE_LINE_RE.match(line):
            break
        m = _STEP_RE.match(line)
        if m:
            numbers.append(int(m.group(1)))
            steps.append(m.group(2).strip())
        elif line.strip() and steps:
            steps[-1] = f"{steps[-1]} {line.strip()}".strip()
    steps = [st for st in steps]
    if not steps:
        raise NoPlanParsed("'Solve step:' section has no numbered steps")
    if numbers != list(range(1, len(numbers) + 1)):
        notes.append(f"steps renumbered from {numbers}")
    repaired = tuple(_repair_step(st, n, notes) for n, st in enumerate(steps, 1))
    if any(st == ";" for st in repaired):
        raise NoPlanParsed("plan contains an empty step")
    return SolutionPlan(analysis, repaired, mode, text, tuple(notes))


_FENCE_BLOCK_RE = re.compile(r"^[ \t]*(`{3,})[ \t]*([^\n`]*)\n(.*?)^[ \t]*\1[ \t]*$", re.M | re.S)
_CPP_TAGS = {"cpp", "c++", "cc", "cxx", "c"}


def extract_code(text: str) -> str:
    """Return C++ source from a model reply, stripping markdown fences."""
    blocks = [(m.group(2).strip().lower(), m.group(3)) for m in _FENCE_BLOCK_RE.finditer(text)]
    if blocks:
        tagged = [b for tag, b in blocks if tag.split()[0:1] and tag.split()[0] in _CPP_TAGS]
        pool = tagged or [b for _, b in blocks]
        code = max(pool, key=len)
        code = code.rstrip("\n") + "\n"
    else:
        code = text
        stripped = text.strip()
        if stripped.startswith("```"):
            # An unterminated fence: drop the opener line.
            code = stripped.split("\n", 1)[1] if "\n" in stripped else ""
            code = code.rstrip("`\n ") + "\n"
    if "```" in code:
        code = "\n".join(line for line in code.split("\n") if not line.strip().startswith("```"))
    if "main(" not in code:
        raise NoCodeFound("no C++ program with main( found")
    return code


_SECTION_RE = re.compile(r"^(analy[sz]e|error|fix|signal)\s*[:：]", re.I)
_SIGNAL_WORD_RE = re.compile(r"[A-Za-z]+")


def parse_feedback(text: str) -> FeedbackReport:
    """Split at column-0 ``analyze:``/``error:``/``fix:``/``signal:`` markers outside code fences."""
    lines = text.replace("\r\n", "\n").split("\n")
    wanted = ["analyze", "error", "fix", "signal"]
    found: dict[str, tuple[int, str]] = {}
    in_fence = None
    for n, line in enumerate(lines):
        fm = _FENCE_LINE_RE.match(line)
        if in_fence is not None:
            if fm and fm.group(1)[0] == in_fence[0] and line.strip().strip(in_fence[0]) == "":
                in_fence = None
            continue
        if fm:
            in_fence = fm.group(1)
            continue
        m = _SECTION_RE.match(line)
        if not m:
            continue
        name = m.group(1).lower().replace("analyse", "analyze")
        # Markers must follow the documented order.
        pos = len(found)
        if pos < len(wanted) and name == wanted[pos]:
            found[name] = (n, line[m.end():])
        elif name == "signal" and "signal" not in found:
            found[name] = (n, line[m.end():])
    if "signal" not in found:
        raise NoSignalParsed("no 'signal:' line")
    sig_line, sig_rest = found["signal"]
    value = sig_rest.strip()
    if not value:
        nxt = next((ln.strip() for ln in lines[sig_line + 1:] if ln.strip()), "")
        value = nxt
    words = [w.upper() for w in _SIGNAL_WORD_RE.findall(value.replace("*", "").replace("`", ""))]
    if not words:
        raise NoSignalParsed("'signal:' line carries no token")
    members = {s.value for s in ControlSignal}
    named = [w for w in words if w in members]
    if words[0] not in members:
        raise UnknownSignal(value.strip("*` ").split()[0] if value.strip("*` ") else value)
    if len(set(named)) > 1:
        raise UnknownSignal(value)
    signal = ControlSignal(words[0])

    for name in ("analyze", "error", "fix"):
        if name not in found:
            raise MissingSection(name)

    def body(name, nxt):
        start, rest = found[name]
        end = found[nxt][0]
        return "\n".join([rest] + lines[start + 1:end]).strip()

    report = FeedbackReport(body("analyze", "error"), body("error", "fix"), body("fix", "signal"), signal, text)
    if report.signal != ControlSignal.PASS:
        for name, val in (("error", report.error), ("fix", report.fix)):
            if not val:
                raise MissingSection(name)
    if not report.analysis:
        raise MissingSection("analyze")
    return report


# --- stages ----------------------------------------------------------------


def _attempt(session: Session, request, agent: str, iteration: int, parse: Callable[[str], object],
             failure: type, r_parse: int = R_PARSE):
    """Call with an identical prompt until the parser accepts (at most ``1 + r_parse`` calls)."""
    last: ParseError | None = None
    for attempt in range(1 + r_parse):
        reply = session.complete(request, agent, iteration)
        try:
            return parse(reply)
        except ParseError as exc:
            last = exc
            log.warning("%s iteration %d attempt %d unparseable: %s", agent, iteration, attempt + 1, exc)
    raise failure(agent, 1 + r_parse, last)


def _tpl(templates, name: str) -> PromptTemplate:
    if templates and name in templates:
        return templates[name]
    return load_template(name)


def rewrite_statement(problem: Problem, session: Session, templates=None) -> str:
    """Agent0: on any failure the original statement is kept and a warning logged."""
    request = render_template(_tpl(templates, "agent0"), {"statement": problem.statement})
    try:
        text = session.complete(request, "Agent0", 0)
    except AlgoforgeError as exc:
        log.warning("statement rewrite failed for %s, keeping original: %s", problem.id, exc)
        return problem.statement
    if not text.strip():
        log.warning("statement rewrite for %s returned nothing, keeping original", problem.id)
        return problem.statement
    return text


def select_algorithms(problem: Problem, catalog: LabelCatalog, session: Session, templates=None,
                      r_parse: int = R_PARSE) -> SelectionResult:
    request = render_template(_tpl(templates, "agent1"), {"STATEMENT": problem.statement,
                                                            "TAG_FILE": catalog.render()})
    result = _attempt(session, request, "Agent1", 0, parse_selection, SelectionFailed, r_parse)
    for note in result.notes:
        log.info("Agent1 %s: %s", problem.id, note)
    unknown = sorted({t for b in result.branches for t in b.tags if t not in catalog})
    if unknown:
        log.warning("Agent1 %s: tags outside the catalog: %s", problem.id, ", ".join(unknown))
    return result


@dataclass
class KnowledgeBase:
    """Retrieval resources shared read-only across solves."""

    wiki: object | None = None
    bank: object | None = None
    embedder: object | None = None
    k: int = 5


def knowledge_query(problem: Problem, branch: BranchPlan) -> str:
    return problem.statement + "\n" + " ".join(t.replace("_", " ") for t in branch.tags)


def provide_knowledge(problem: Problem, branch: BranchPlan, kb: KnowledgeBase | None, session: Session,
                      enhanced: bool = False, templates=None) -> str:
    from .retrieval import query_index, retrieve_similar_problems, summarize_knowledge

    hits = []
    similar = []
    if kb is not None and kb.wiki is not None and len(kb.wiki):
        hits = query_index(kb.wiki, knowledge_query(problem, branch), kb.k, kb.embedder)
    if enhanced and kb is not None and kb.bank is not None and len(kb.bank):
        similar = retrieve_similar_problems(kb.bank, problem, kb.k, kb.embedder)
    template = templates.get("agent2") if templates else None
    return summarize_knowledge(problem, hits, session, template, similar)


@dataclass(frozen=True)
class FailureContext:
    plan: SolutionPlan
    code: CodeArtifact
    feedback: FeedbackReport


def reason(problem: Problem, branch: BranchPlan, knowledge: str, mode: str, session: Session, iteration: int = 1,
           failure_context: FailureContext | None = None, templates=None, r_parse: int = R_PARSE) -> SolutionPlan:
    if mode == "reasoning":
        request = render_template(_tpl(templates, "agent3_reasoning"), {
            "statement": problem.statement,
            "tags_block": branch.render(),
            "domain_text": knowledge or NO_DOMAIN_TEXT,
        })
    elif mode == "replanning":
        if failure_context is None:
            raise ValueError("replanning needs the previous plan, code and checker feedback")
        request = render_template(_tpl(templates, "agent3_replanning"), {
            "statement": problem.statement,
            "prev_reasoning": failure_context.plan.text,
            "code": failure_context.code.source.rstrip("\n"),
            "checker_feedback": failure_context.feedback.raw,
        })
    else:
        raise ValueError(f"unknown reasoning mode {mode!r}")
    plan = _attempt(session, request, "Agent3", iteration, lambda t: parse_plan(t, mode), ReasoningFailed, r_parse)
    for note in plan.notes:
        log.info("Agent3 %s: %s", problem.id, note)
    return plan


def implement(problem: Problem, plan: SolutionPlan | None, mode: str, session: Session, iteration: int = 1,
              prior_code: CodeArtifact | None = None, feedback: FeedbackReport | None = None, templates=None,
              r_parse: int = R_PARSE) -> CodeArtifact:
    reasoner_text = plan.text if plan is not None else ""
    if mode == "implementation":
        request = render_template(_tpl(templates, "agent4_implementing"),
                                  {"statement": problem.statement, "reasoner_text": reasoner_text})
    elif mode == "revision":
        if prior_code is None or feedback is None:
            raise ValueError("revision needs the prior code and checker feedback")
        request = render_template(_tpl(templates, "agent4_revising"), {
            "statement": problem.statement,
            "reasoner_text": reasoner_text,
            "wrong_code": prior_code.source.rstrip("\n"),
            "checker_feedback": feedback.raw,
        })
    else:
        raise ValueError(f"unknown implementation mode {mode!r}")
    return _attempt(session, request, "Agent4", iteration,
                    lambda t: CodeArtifact(extract_code(t), mode, t), ImplementationFailed, r_parse)


def direct_ask(problem: Problem, session: Session, variant: str = "direct_ask", templates=None,
               r_parse: int = R_PARSE) -> CodeArtifact:
    """Single Agent4-style call without any plan (baseline modes)."""
    request = render_template(_tpl(templates, variant), {"statement": problem.statement})
    return _attempt(session, request, "Agent4", 1,
                    lambda t: CodeArtifact(extract_code(t), "implementation", t), ImplementationFailed, r_parse)


def render_samples(samples: Sequence[SampleCase]) -> str:
    parts = []
    for c in samples:
        parts.append(f"\nSample {c.index} input:\n{c.input.rstrip(chr(10))}\nSample {c.index} output:\n"
                     f"{c.expected.rstrip(chr(10))}")
    return "".join(parts)


def judge_bindings(judge_result) -> dict[str, str]:
    info = judge_result.info_value()
    return {
        "judge_status": judge_result.status.value,
        "judge_passed": str(judge_result.passed),
        "judge_total": str(judge_result.total),
        "judge_info": json.dumps(info) if isinstance(info, dict) else info,
    }


def check(problem: Problem, plan: SolutionPlan | None, code: CodeArtifact, samples: Sequence[SampleCase],
          judge_result, session: Session, iteration: int = 1, checklist: str | None = None, templates=None,
          r_parse: int = R_PARSE) -> FeedbackReport:
    if judge_result is None:
        raise ValueError("the checker always needs a judge result")
    template = _tpl(templates, "agent5")
    bindings = {
        "problem_statement": problem.statement,
        "reasoning_text": plan.text if plan is not None else "",
        "cpp_code": code.source.rstrip("\n"),
        "samples_text": render_samples(samples),
        **judge_bindings(judge_result),
    }
    system, user = render_template(template, bindings)
    if checklist:
        system = f"{system}\n\n{checklist.rstrip()}"
    return _attempt(session, (system, user), "Agent5", iteration, parse_feedback, CheckFailed, r_parse)
