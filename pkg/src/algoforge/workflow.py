"""The solve loop: extraction, selection, knowledge, planning, coding, judging, checking.

Every artifact is appended to a :class:`Transcript` under its canonical file
name as soon as it is produced. Branches after the first are stored under
``branch-<k>/``.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from . import agents
from .agents import (
    BranchPlan,
    CodeArtifact,
    ControlSignal,
    FailureContext,
    KnowledgeBase,
    SelectionResult,
    SolutionPlan,
)
from .domain import LabelCatalog, Problem, ResourceLimits, data_path, load_label_catalog
from .errors import AlgoforgeError, IoFailure, MissingOverrideFixture
from .judge import Judge, JudgeResult, Verdict
from .llm import Gateway, ReplayScript
from .samples import extract_samples, sample_files, read_sample_files

log = logging.getLogger(__name__)

BRANCH_POLICIES = ("sequential_first_pass", "all_then_best")


class NextState(str, Enum):
    TERMINATE = "Terminate"
    REVISE_CODE = "ReviseCode"
    REPLAN = "Replan"


def route(signal: ControlSignal, iteration: int, config) -> NextState:
    """Next loop state; the iteration cap dominates every signal."""
    if iteration < 1:
        raise ValueError("iteration must be >= 1")
    cap = config if isinstance(config, int) else config.max_iterations
    signal = ControlSignal(signal)
    if signal == ControlSignal.PASS or iteration >= cap:
        return NextState.TERMINATE
    if signal == ControlSignal.FIX:
        return NextState.REVISE_CODE
    return NextState.REPLAN


_OVERRIDE_CHOICES = {
    "statement_rewriter": ("off", "agent0", "fixture"),
    "labels": ("predicted", "oracle"),
    "kb_mode": ("wiki", "enhanced"),
    "plan": ("generated", "distilled-fixture"),
    "checklist": ("none", "generic", "per-problem"),
}


@dataclass(frozen=True)
class OverrideSet:
    statement_rewriter: str = "off"
    labels: str = "predicted"
    kb_mode: str = "wiki"
    plan: str = "generated"
    checklist: str = "none"

    def __post_init__(self):
        for name, choices in _OVERRIDE_CHOICES.items():
            if getattr(self, name) not in choices:
                raise ValueError(f"override {name} must be one of {choices}, got {getattr(self, name)!r}")

    @property
    def needs_fixtures(self) -> bool:
        return self.statement_rewriter == "fixture" or self.plan == "distilled-fixture" or self.checklist == "per-problem"


@dataclass(frozen=True)
class WorkflowConfig:
    max_iterations: int = 3
    branch_policy: str = "sequential_first_pass"
    overrides: OverrideSet = field(default_factory=OverrideSet)
    limits: ResourceLimits | None = None
    checklist_path: Path | None = None
    override_dir: Path | None = None
    fail_fast: bool = False
    r_parse: int = agents.R_PARSE
    kb_dir: Path | None = None
    bank_dir: Path | None = None
    kb_k: int = 5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.branch_policy not in BRANCH_POLICIES:
            raise ValueError(f"branch_policy must be one of {BRANCH_POLICIES}")
        if self.r_parse < 0:
            raise ValueError("r_parse must be >= 0")

    @classmethod
    def from_dict(cls, doc: Mapping, base: Path | None = None) -> "WorkflowConfig":
        base = base or Path(".")
        known = {"max_iterations", "branch_policy", "overrides", "limits", "checklist_path", "override_dir",
                 "fail_fast", "r_parse", "kb_dir", "bank_dir", "kb_k", "provider", "sandbox"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        kwargs: dict = {}
        for key in ("max_iterations", "branch_policy", "fail_fast", "r_parse", "kb_k"):
            if key in doc:
                kwargs[key] = doc[key]
        if "overrides" in doc:
            kwargs["overrides"] = OverrideSet(**doc["overrides"])
        if doc.get("limits"):
            lim = doc["limits"]
            kwargs["limits"] = ResourceLimits(float(lim.get("time_s", 0) or 0), int(lim.get("memory_bytes", 0) or 0),
                                              int(lim.get("output_bytes", 0) or 0))
        for key in ("checklist_path", "override_dir", "kb_dir", "bank_dir"):
            if doc.get(key):
                kwargs[key] = (base / doc[key]).resolve()
        return cls(**kwargs)


def load_config(path) -> WorkflowConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(path, exc) from exc
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return WorkflowConfig.from_dict(doc, path.parent)


@dataclass(frozen=True)
class Artifact:
    name: str
    content: bytes
    timestamp: float


class Transcript:
    """Ordered artifacts of one solve, keyed by canonical relative file name."""

    def __init__(self):
        self.artifacts: list[Artifact] = []
        self.exchanges: list = []

    def add(self, name: str, content) -> None:
        data = content.encode("utf-8") if isinstance(content, str) else bytes(content)
        self.artifacts.append(Artifact(name, data, time.time()))

    def names(self) -> list[str]:
        return [a.name for a in self.artifacts]

    def get(self, name: str) -> bytes | None:
        for a in reversed(self.artifacts):
            if a.name == name:
                return a.content
        return None

    def text(self, name: str) -> str | None:
        data = self.get(name)
        return None if data is None else data.decode("utf-8")

    def __len__(self):
        return len(self.artifacts)


def persist_transcript(transcript: Transcript, directory) -> list[Path]:
    """Write every artifact under its canonical name; returns the paths in emission order."""
    directory = Path(directory)
    written = []
    for art in transcript.artifacts:
        path = directory / art.name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(art.content)
        except OSError as exc:
            raise IoFailure(path, exc) from exc
        written.append(path)
    return written


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    plan_version: int
    code_version: int
    sample_judge: JudgeResult
    signal: ControlSignal


@dataclass
class Outcome:
    problem_id: str
    final_code: CodeArtifact | None
    sample_status: Verdict
    final_status: Verdict | None = None
    iterations: list[IterationRecord] = field(default_factory=list)
    transcript: Transcript = field(default_factory=Transcript)
    branch_index: int = 1
    sample_passed: int = 0
    sample_total: int = 0
    final_judge: JudgeResult | None = None
    plans: list[SolutionPlan] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    error: str | None = None
    branches: list["Outcome"] = field(default_factory=list)

    @property
    def sample_ratio(self) -> float:
        return self.sample_passed / self.sample_total if self.sample_total else 0.0

    def summary(self) -> dict:
        doc = {
            "problem_id": self.problem_id,
            "branch": self.branch_index,
            "sample_status": self.sample_status.value,
            "sample_passed": self.sample_passed,
            "sample_total": self.sample_total,
            "final_status": self.final_status.value if self.final_status else None,
            "iterations": [{"iteration": r.iteration, "plan_version": r.plan_version, "code_version": r.code_version,
                            "status": r.sample_judge.status.value, "signal": r.signal.value}
                           for r in self.iterations],
            "cot_lengths": [len(p.steps) for p in self.plans],
            "notes": list(self.notes),
            "error": self.error,
        }
        if self.final_judge is not None:
            doc["final_judge"] = self.final_judge.to_dict()
        return doc


def select_final(branch_outcomes: Sequence[Outcome], policy: str = "sequential_first_pass") -> Outcome:
    if not branch_outcomes:
        raise ValueError("need at least one branch outcome")
    if policy not in BRANCH_POLICIES:
        raise ValueError(f"unknown branch policy {policy!r}")
    if policy == "sequential_first_pass":
        for o in branch_outcomes:
            if o.sample_status == Verdict.AC:
                return o
    best = branch_outcomes[0]
    for o in branch_outcomes[1:]:
        if o.sample_ratio > best.sample_ratio:
            best = o
    return best


# --- override fixtures ------------------------------------------------------


def _fixture(config: WorkflowConfig, problem: Problem, name: str) -> Path:
    if config.override_dir is None:
        raise MissingOverrideFixture(f"override {name} needs override_dir in the config")
    path = Path(config.override_dir) / problem.id / name
    if not path.is_file():
        raise MissingOverrideFixture(f"{path} not found")
    return path


def _resolve_overrides(problem: Problem, config: WorkflowConfig) -> dict:
    """Load every fixture the overrides need, failing before any model call."""
    ov = config.overrides
    out: dict = {}
    if ov.statement_rewriter == "fixture":
        out["statement"] = _fixture(config, problem, "statement.md").read_text(encoding="utf-8")
    if ov.plan == "distilled-fixture":
        out["plan"] = _fixture(config, problem, "plan.txt").read_text(encoding="utf-8")
    if ov.checklist == "per-problem":
        out["checklist"] = _fixture(config, problem, "checklist.md").read_text(encoding="utf-8")
    elif ov.checklist == "generic":
        path = config.checklist_path or data_path("failure_report.md")
        out["checklist"] = Path(path).read_text(encoding="utf-8")
    if ov.labels == "oracle" and not problem.truth_tags:
        raise MissingOverrideFixture(f"oracle labels requested but problem {problem.id} has no tags")
    return out


# --- solve ------------------------------------------------------------------


@dataclass
class _Context:
    problem: Problem
    config: WorkflowConfig
    session: object
    judge: Judge
    kb: KnowledgeBase | None
    templates: Mapping | None
    samples: list
    limits: ResourceLimits
    transcript: Transcript
    fixtures: dict


class _BranchRun:
    def __init__(self, ctx: _Context, branch: BranchPlan):
        self.ctx = ctx
        self.branch = branch
        self.prefix = "" if branch.option_index == 1 else f"branch-{branch.option_index}/"
        self.outcome = Outcome(ctx.problem.id, None, Verdict.SE, transcript=ctx.transcript,
                               branch_index=branch.option_index)
        # (ratio, code, judge) of the best judged attempt; later attempts win ties.
        self.best: tuple[float, CodeArtifact, JudgeResult] | None = None
        self.plan_version = 0
        self.impl_version = 0
        self.revise_version = 0
        self.code_version = 0

    def emit(self, name: str, content) -> None:
        self.ctx.transcript.add(self.prefix + name, content)

    def _plan(self, plan: SolutionPlan) -> SolutionPlan:
        self.plan_version += 1
        self.outcome.plans.append(plan)
        self.emit(f"Agent3-reasoning-{self.plan_version}.txt", plan.raw)
        return plan

    def _implemented(self, code: CodeArtifact) -> CodeArtifact:
        self.impl_version += 1
        self.code_version += 1
        self.emit(f"Agent4-implenment-raw-{self.impl_version}.txt", code.raw)
        name = "Agent4-solution.cpp" if self.impl_version == 1 else f"Agent4-solution-{self.impl_version}.cpp"
        self.emit(name, code.source)
        return code

    def _revised(self, code: CodeArtifact) -> CodeArtifact:
        self.revise_version += 1
        self.code_version += 1
        self.emit(f"Agent4-revise-raw-{self.revise_version}.txt", code.raw)
        self.emit(f"Agent4-revise-{self.revise_version}.cpp", code.source)
        return code

    def run(self) -> Outcome:
        ctx, out = self.ctx, self.outcome
        cfg, problem, session = ctx.config, ctx.problem, ctx.session
        kw = {"templates": ctx.templates}
        try:
            knowledge = agents.provide_knowledge(problem, self.branch, ctx.kb, session,
                                                 enhanced=cfg.overrides.kb_mode == "enhanced", **kw)
            self.emit("Agent2-domain.txt", knowledge)

            if "plan" in ctx.fixtures:
                raw = ctx.fixtures["plan"]
                plan = self._plan(replace(agents.parse_plan(raw, "distilled"), raw=raw))
            else:
                plan = self._plan(agents.reason(problem, self.branch, knowledge, "reasoning", session, 1,
                                                r_parse=cfg.r_parse, **kw))
            code = self._implemented(agents.implement(problem, plan, "implementation", session, 1,
                                                      r_parse=cfg.r_parse, **kw))
            for it in range(1, cfg.max_iterations + 1):
                jr = ctx.judge.judge(code.source, ctx.samples, ctx.limits, fail_fast=cfg.fail_fast)
                self.emit(f"judge-result-{it}.json", json.dumps(jr.to_dict(), indent=2, ensure_ascii=False) + "\n")
                self._track(code, jr)
                fb = agents.check(problem, plan, code, ctx.samples, jr, session, it,
                                  checklist=ctx.fixtures.get("checklist"), r_parse=cfg.r_parse, **kw)
                self.emit(f"Agent5-analysis-{it}.txt", fb.raw)
                signal = fb.signal
                if signal == ControlSignal.PASS and jr.status != Verdict.AC:
                    out.notes.append(f"iteration {it}: PASS on {jr.status.value} sample result treated as FIX")
                    signal = ControlSignal.FIX
                out.iterations.append(IterationRecord(it, self.plan_version, self.code_version, jr, signal))
                nxt = route(signal, it, cfg)
                if nxt == NextState.TERMINATE:
                    break
                if nxt == NextState.REVISE_CODE:
                    code = self._revised(agents.implement(problem, plan, "revision", session, it + 1,
                                                          prior_code=code, feedback=fb, r_parse=cfg.r_parse, **kw))
                else:
                    ctx_fail = FailureContext(plan, code, fb)
                    plan = self._plan(agents.reason(problem, self.branch, knowledge, "replanning", session, it + 1,
                                                    failure_context=ctx_fail, r_parse=cfg.r_parse, **kw))
                    code = self._implemented(agents.implement(problem, plan, "implementation", session, it + 1,
                                                              r_parse=cfg.r_parse, **kw))
        except AlgoforgeError as exc:
            log.warning("%s branch %d stopped: %s", problem.id, self.branch.option_index, exc)
            out.error = f"{type(exc).__name__}: {exc}"
        self._finish()
        return out

    def _track(self, code: CodeArtifact, jr: JudgeResult) -> None:
        ratio = jr.passed / jr.total if jr.total else 0.0
        if self.best is None or ratio >= self.best[0]:
            self.best = (ratio, code, jr)

    def _finish(self) -> None:
        # A PASS implies an AC sample run, and later attempts win ratio ties,
        # so the best attempt is also the one Agent5 accepted.
        out = self.outcome
        if self.best is not None:
            _, code, jr = self.best
            out.final_code = code
            out.sample_status = jr.status
            out.sample_passed, out.sample_total = jr.passed, jr.total
        else:
            out.sample_status = Verdict.SE
            out.sample_total = len(self.ctx.samples)


def solve(problem: Problem, config: WorkflowConfig | None = None, gateway: Gateway | None = None,
          judge: Judge | None = None, kb: KnowledgeBase | None = None, catalog: LabelCatalog | None = None,
          templates: Mapping | None = None) -> Outcome:
    config = config or WorkflowConfig()
    if gateway is None:
        raise ValueError("solve needs a configured gateway")
    judge = judge or _default_judge()
    transcript = Transcript()
    fixtures = _resolve_overrides(problem, config)
    session = gateway.session(problem.id)
    transcript.exchanges = session.exchanges

    try:
        samples = list(problem.samples) if problem.samples else extract_samples(problem.statement,
                                                                                problem.source_format)
    except AlgoforgeError as exc:
        return Outcome(problem.id, None, Verdict.SE, transcript=transcript,
                       error=f"{type(exc).__name__}: {exc}",
                       final_status=Verdict.SE if problem.hidden_cases else None)
    for name, content in sample_files(samples):
        transcript.add(f"samples/{name}", content)

    limits = (config.limits or problem.limits).resolved()
    working = problem
    ov = config.overrides
    if ov.statement_rewriter == "agent0":
        rewritten = agents.rewrite_statement(problem, session, templates)
        transcript.add("Agent0-rewrite.txt", rewritten)
        working = problem.with_statement(rewritten)
    elif ov.statement_rewriter == "fixture":
        transcript.add("Agent0-rewrite.txt", fixtures["statement"])
        working = problem.with_statement(fixtures["statement"])

    try:
        if ov.labels == "oracle":
            selection = SelectionResult((BranchPlan(1, tuple(problem.truth_tags), "ground-truth labels"),))
        else:
            selection = agents.select_algorithms(working, catalog or load_label_catalog(), session, templates,
                                                 r_parse=config.r_parse)
            transcript.add("Agent1-raw.txt", selection.raw)
        transcript.add("Agent1-tags.json", selection.to_json())
    except AlgoforgeError as exc:
        log.warning("%s: selection failed: %s", problem.id, exc)
        return Outcome(problem.id, None, Verdict.SE, transcript=transcript, sample_total=len(samples),
                       error=f"{type(exc).__name__}: {exc}",
                       final_status=Verdict.SE if problem.hidden_cases else None)

    ctx = _Context(working, config, session, judge, kb, templates, samples, limits, transcript, fixtures)
    results: list[Outcome] = []
    for branch in selection.branches:
        results.append(_BranchRun(ctx, branch).run())
        if config.branch_policy == "sequential_first_pass" and results[-1].sample_status == Verdict.AC:
            break
    chosen = select_final(results, config.branch_policy)
    outcome = replace(chosen, branches=results, notes=[n for r in results for n in r.notes])
    if outcome.final_code is not None:
        transcript.add("solution-final.cpp", outcome.final_code.source)

    if problem.hidden_cases:
        if outcome.final_code is None:
            outcome.final_status = Verdict.SE
        else:
            final = judge.judge(outcome.final_code.source, problem.hidden_cases, limits)
            outcome.final_judge = final
            outcome.final_status = final.status
    return outcome


def _default_judge() -> Judge:
    from .judge import default_judge

    return default_judge()


# --- replay from a persisted transcript --------------------------------------


def script_from_transcript(directory, config: WorkflowConfig | None = None) -> ReplayScript:
    """Rebuild the replay script a persisted transcript implies.

    The loop is re-walked from the persisted Agent5 signals (and judge
    results, for the PASS-on-failure downgrade) to recover which file
    answered which call.
    """
    config = config or WorkflowConfig()
    directory = Path(directory)
    script = ReplayScript()

    def read(rel: str) -> str | None:
        p = directory / rel
        return p.read_text(encoding="utf-8") if p.is_file() else None

    if config.overrides.statement_rewriter == "agent0" and read("Agent0-rewrite.txt") is not None:
        script.add("Agent0", 0, read("Agent0-rewrite.txt"))
    if read("Agent1-raw.txt") is not None:
        script.add("Agent1", 0, read("Agent1-raw.txt"))

    k = 1
    while True:
        prefix = "" if k == 1 else f"branch-{k}/"
        domain = read(prefix + "Agent2-domain.txt")
        if domain is None:
            break
        script.add("Agent2", 0, domain)
        plan_v = impl_v = rev_v = 1
        if config.overrides.plan != "distilled-fixture":
            text = read(prefix + "Agent3-reasoning-1.txt")
            if text is not None:
                script.add("Agent3", 1, text)
        plan_v = 2
        impl = read(prefix + "Agent4-implenment-raw-1.txt")
        if impl is not None:
            script.add("Agent4", 1, impl)
        impl_v = 2
        it = 1
        while True:
            analysis = read(prefix + f"Agent5-analysis-{it}.txt")
            if analysis is None:
                break
            script.add("Agent5", it, analysis)
            try:
                signal = agents.parse_feedback(analysis).signal
            except AlgoforgeError:
                break
            jr_text = read(prefix + f"judge-result-{it}.json")
            if signal == ControlSignal.PASS and jr_text and json.loads(jr_text).get("status") != "AC":
                signal = ControlSignal.FIX
            if route(signal, it, config) == NextState.TERMINATE:
                break
            if signal == ControlSignal.FIX:
                text = read(prefix + f"Agent4-revise-raw-{rev_v}.txt")
                if text is None:
                    break
                script.add("Agent4", it + 1, text)
                rev_v += 1
            else:
                plan = read(prefix + f"Agent3-reasoning-{plan_v}.txt")
                if plan is None:
                    break
                script.add("Agent3", it + 1, plan)
                plan_v += 1
                impl = read(prefix + f"Agent4-implenment-raw-{impl_v}.txt")
                if impl is None:
                    break
                script.add("Agent4", it + 1, impl)
                impl_v += 1
            it += 1
        k += 1
    return script


def problem_from_transcript(directory, problem_id: str = "replay") -> Problem:
    samples = read_sample_files(Path(directory) / "samples")
    statement = "(statement not stored in the transcript)"
    return Problem(problem_id, statement, samples=tuple(samples) if samples else None)
