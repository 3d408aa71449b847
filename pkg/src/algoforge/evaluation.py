"""Batch runs, corpus metrics, iteration analytics and report rendering."""
from __future__ import annotations

import json
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import agents
from .domain import CategoryMap, LabelCatalog, Problem, category_of
from .errors import EmptyCorpus, IoFailure, ZeroTotal
from .judge import MIB, Judge, JudgeResult, Verdict
from .workflow import Outcome, WorkflowConfig, solve

log = logging.getLogger(__name__)

MODES = ("direct_ask", "workflow", "brute_force")
MODE_ALIASES = {"brute_force_prompt": "brute_force"}
UNCATEGORIZED = "uncategorized"
REPORT_FORMAT = "algoforge-report"
TABLE_COLUMNS = ("Run", "Type", "AC rate", "case pass rate", "case pass rate (with weight)",
                 "time aver (s)", "mem aver (MB)", "AC & TLE rate")


@dataclass(frozen=True)
class EvalRecord:
    problem_id: str
    status: Verdict
    passed: int
    total: int
    time: float = 0.0
    memory: int = 0
    category: str | None = None
    iteration_statuses: tuple[Verdict, ...] = ()
    cot_lengths: tuple[int, ...] = ()
    tags: tuple[str, ...] = ()
    error: str | None = None

    def __post_init__(self):
        if not 0 <= self.passed <= self.total:
            raise ValueError(f"{self.problem_id}: passed={self.passed} total={self.total}")

    def to_dict(self) -> dict:
        return {
            "id": self.problem_id,
            "status": self.status.value,
            "passed": self.passed,
            "total": self.total,
            "time": self.time,
            "memory": self.memory,
            "category": self.category,
            "iteration_statuses": [s.value for s in self.iteration_statuses],
            "cot_lengths": list(self.cot_lengths),
            "tags": list(self.tags),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalRecord":
        return cls(
            problem_id=d["id"],
            status=Verdict(d["status"]),
            passed=int(d["passed"]),
            total=int(d["total"]),
            time=float(d.get("time") or 0.0),
            memory=int(d.get("memory") or 0),
            category=d.get("category"),
            iteration_statuses=tuple(Verdict(s) for s in d.get("iteration_statuses") or ()),
            cot_lengths=tuple(int(n) for n in d.get("cot_lengths") or ()),
            tags=tuple(d.get("tags") or ()),
            error=d.get("error"),
        )


# --- metrics -----------------------------------------------------------------


def _nonempty(records) -> list[EvalRecord]:
    records = list(records)
    if not records:
        raise EmptyCorpus("no records")
    return records


def ac_rate(records: Iterable[EvalRecord]) -> Fraction:
    records = _nonempty(records)
    return Fraction(sum(r.status == Verdict.AC for r in records), len(records))


def case_pass_rate(records: Iterable[EvalRecord]) -> Fraction:
    records = _nonempty(records)
    total = sum(r.total for r in records)
    if total == 0:
        raise EmptyCorpus("no test cases in any record")
    return Fraction(sum(r.passed for r in records), total)


def weighted_case_pass_rate(records: Iterable[EvalRecord]) -> Fraction:
    records = _nonempty(records)
    for r in records:
        if r.total == 0:
            raise ZeroTotal(r.problem_id)
    return sum((Fraction(r.passed, r.total) for r in records), Fraction(0)) / len(records)


def relaxed_accept_rate(records: Iterable[EvalRecord]) -> Fraction:
    records = _nonempty(records)
    return Fraction(sum(r.status in (Verdict.AC, Verdict.TLE) for r in records), len(records))


@dataclass(frozen=True)
class Efficiency:
    """Means over accepted records; both fields are None when nothing was accepted."""

    time_aver: float | None
    mem_aver_mb: float | None


def efficiency_averages(records: Iterable[EvalRecord]) -> Efficiency:
    accepted = [r for r in records if r.status == Verdict.AC]
    if not accepted:
        return Efficiency(None, None)
    n = len(accepted)
    t = sum((Fraction(r.time) for r in accepted), Fraction(0)) / n
    m = sum((Fraction(r.memory) for r in accepted), Fraction(0)) / n / MIB
    return Efficiency(float(t), float(m))


def transition_counts(records: Iterable[EvalRecord], base_statuses: Mapping[str, Verdict] | None = None) -> dict:
    """Count problems flipping from non-AC to AC between consecutive iterations."""
    records = list(records)
    counts: dict[str, int] = {}
    if base_statuses is not None:
        key = "Base->Iter1"
        counts[key] = 0
        for r in records:
            base = base_statuses.get(r.problem_id)
            if base is not None and r.iteration_statuses and base != Verdict.AC \
                    and r.iteration_statuses[0] == Verdict.AC:
                counts[key] += 1
    depth = max((len(r.iteration_statuses) for r in records), default=0)
    for k in range(1, depth):
        key = f"Iter{k}->Iter{k + 1}"
        counts[key] = sum(
            1 for r in records
            if len(r.iteration_statuses) > k
            and r.iteration_statuses[k - 1] != Verdict.AC and r.iteration_statuses[k] == Verdict.AC
        )
    return counts


def sample_ac_final_fail(records: Iterable[EvalRecord]) -> int:
    """Problems whose last sample iteration was AC but whose final verdict is not."""
    return sum(1 for r in records
               if r.iteration_statuses and r.iteration_statuses[-1] == Verdict.AC and r.status != Verdict.AC)


def cot_length(plan) -> int:
    return len(plan.steps)


def cot_statistics(records: Iterable[EvalRecord], base_lengths: Sequence[int] | None = None) -> dict:
    """Mean and population standard deviation of step counts per plan version."""
    records = list(records)
    out: dict[str, dict] = {}

    def stats(values):
        return {"n": len(values), "mean": statistics.fmean(values), "std": statistics.pstdev(values)}

    if base_lengths:
        out["Base"] = stats([float(v) for v in base_lengths])
    depth = max((len(r.cot_lengths) for r in records), default=0)
    for k in range(depth):
        values = [float(r.cot_lengths[k]) for r in records if len(r.cot_lengths) > k]
        out[f"Plan{k + 1}"] = stats(values)
    return out


def metrics(records: Sequence[EvalRecord]) -> dict:
    """Every table column for one partition; rates as floats plus exact fractions."""
    rates = {
        "ac_rate": ac_rate(records),
        "case_pass_rate": case_pass_rate(records),
        "weighted_case_pass_rate": weighted_case_pass_rate(records),
        "relaxed_accept_rate": relaxed_accept_rate(records),
    }
    eff = efficiency_averages(records)
    doc: dict = {"n": len(records)}
    doc.update({k: float(v) for k, v in rates.items()})
    doc["time_aver_s"] = eff.time_aver
    doc["mem_aver_mb"] = eff.mem_aver_mb
    doc["exact"] = {k: f"{v.numerator}/{v.denominator}" for k, v in rates.items()}
    return doc


def record_categories(record: EvalRecord, cmap: CategoryMap) -> list[str]:
    if record.category:
        return [record.category]
    if record.tags:
        groups = category_of(record.tags[0], cmap)
        if groups:
            return sorted(groups)
    return [UNCATEGORIZED]


def category_report(records: Iterable[EvalRecord], cmap: CategoryMap) -> dict[str, dict]:
    """Metrics per category; a record whose first tag sits in several groups counts in each."""
    parts: dict[str, list[EvalRecord]] = {}
    for r in records:
        for cat in record_categories(r, cmap):
            parts.setdefault(cat, []).append(r)
    return {cat: metrics(parts[cat]) for cat in sorted(parts)}


@dataclass
class EvalReport:
    label: str
    mode: str
    overall: dict
    by_category: dict | None = None
    transitions: dict = field(default_factory=dict)
    cot: dict = field(default_factory=dict)
    sample_ac_final_fail: int = 0

    def to_dict(self) -> dict:
        doc = {
            "format": REPORT_FORMAT,
            "version": 1,
            "label": self.label,
            "mode": self.mode,
            "columns": list(TABLE_COLUMNS),
            "overall": self.overall,
            "transitions": self.transitions,
            "sample_ac_final_fail": self.sample_ac_final_fail,
            "cot": self.cot,
        }
        if self.by_category is not None:
            doc["by_category"] = self.by_category
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False, sort_keys=False) + "\n"


def build_report(records: Sequence[EvalRecord], label: str = "", mode: str = "workflow",
                 cmap: CategoryMap | None = None, base_statuses: Mapping[str, Verdict] | None = None,
                 base_cot: Sequence[int] | None = None) -> EvalReport:
    records = sorted(records, key=lambda r: r.problem_id)
    return EvalReport(
        label=label,
        mode=mode,
        overall=metrics(records),
        by_category=category_report(records, cmap) if cmap is not None else None,
        transitions=transition_counts(records, base_statuses),
        cot=cot_statistics(records, base_cot),
        sample_ac_final_fail=sample_ac_final_fail(records),
    )


def _pct(v) -> str:
    return "-" if v is None else f"{100 * v:.2f}%"


def _num(v, digits) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def _row(name: str, mode: str, m: dict) -> list[str]:
    return [name, mode, _pct(m["ac_rate"]), _pct(m["case_pass_rate"]), _pct(m["weighted_case_pass_rate"]),
            _num(m["time_aver_s"], 4), _num(m["mem_aver_mb"], 3), _pct(m["relaxed_accept_rate"])]


def render_table(report: EvalReport) -> str:
    rows = [list(TABLE_COLUMNS), _row(report.label or "run", report.mode, report.overall)]
    if report.by_category:
        for cat, m in report.by_category.items():
            rows.append(_row(cat, report.mode, m))
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_COLUMNS))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# --- batch runner ------------------------------------------------------------


def _record_from_outcome(problem: Problem, outcome: Outcome) -> EvalRecord:
    jr: JudgeResult | None = outcome.final_judge
    if jr is not None:
        status, passed, total = jr.status, jr.passed, jr.total
        t, mem = jr.max_time, jr.max_memory
    else:
        status = outcome.final_status or outcome.sample_status
        passed, total = outcome.sample_passed, outcome.sample_total
        best = next((r.sample_judge for r in reversed(outcome.iterations)
                     if r.sample_judge.passed == passed and r.sample_judge.status == status), None)
        t, mem = (best.max_time, best.max_memory) if best else (0.0, 0)
        if total == 0:
            total = len(problem.hidden_cases or ()) or 1
    return EvalRecord(
        problem_id=problem.id,
        status=status,
        passed=passed,
        total=total,
        time=t,
        memory=mem,
        category=problem.category,
        iteration_statuses=tuple(r.sample_judge.status for r in outcome.iterations),
        cot_lengths=tuple(cot_length(p) for p in outcome.plans),
        tags=tuple(problem.truth_tags or ()),
        error=outcome.error,
    )


def _error_record(problem: Problem, exc: BaseException) -> EvalRecord:
    total = len(problem.hidden_cases or problem.samples or ()) or 1
    return EvalRecord(problem.id, Verdict.SE, 0, total, category=problem.category,
                      tags=tuple(problem.truth_tags or ()), error=f"{type(exc).__name__}: {exc}")


def _direct(problem: Problem, gateway, judge: Judge, variant: str, templates,
            limits=None) -> tuple[EvalRecord, Outcome]:
    from .samples import extract_samples

    session = gateway.session(problem.id)
    outcome = Outcome(problem.id, None, Verdict.SE)
    outcome.transcript.exchanges = session.exchanges
    code = agents.direct_ask(problem, session, variant, templates)
    outcome.final_code = code
    outcome.transcript.add("Agent4-implenment-raw-1.txt", code.raw)
    outcome.transcript.add("Agent4-solution.cpp", code.source)
    cases = problem.hidden_cases or problem.samples or tuple(extract_samples(problem.statement, problem.source_format))
    jr = judge.judge(code.source, cases, limits or problem.limits)
    outcome.final_judge = jr
    outcome.final_status = jr.status
    outcome.sample_status = jr.status
    outcome.sample_passed, outcome.sample_total = jr.passed, jr.total
    record = EvalRecord(problem.id, jr.status, jr.passed, jr.total, jr.max_time, jr.max_memory, problem.category,
                        tags=tuple(problem.truth_tags or ()))
    return record, outcome


def evaluate_problem(problem: Problem, mode: str, config: WorkflowConfig, gateway, judge: Judge, kb=None,
                     catalog: LabelCatalog | None = None, templates=None) -> tuple[EvalRecord, Outcome | None]:
    try:
        if mode == "workflow":
            outcome = solve(problem, config, gateway, judge, kb, catalog, templates)
            return _record_from_outcome(problem, outcome), outcome
        variant = "direct_ask" if mode == "direct_ask" else "brute_force"
        return _direct(problem, gateway, judge, variant, templates, config.limits)
    except Exception as exc:  # a batch never aborts on one problem
        log.warning("%s failed: %s", problem.id, exc)
        return _error_record(problem, exc), None


def evaluate_batch(problems: Sequence[Problem], config: WorkflowConfig | None = None, pool_size: int = 8,
                   mode: str = "workflow", gateway=None, judge: Judge | None = None, kb=None,
                   catalog: LabelCatalog | None = None, cmap: CategoryMap | None = None, label: str = "",
                   templates=None) -> tuple[EvalReport, list[EvalRecord], list[Outcome | None]]:
    """Run every problem (``pool_size`` at a time) and aggregate in problem-id order."""
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    if gateway is None:
        raise ValueError("evaluate_batch needs a gateway")
    config = config or WorkflowConfig()
    if judge is None:
        from .judge import default_judge

        judge = default_judge()
    problems = sorted(problems, key=lambda p: p.id)
    if not problems:
        raise EmptyCorpus("dataset is empty")
    with ThreadPoolExecutor(max_workers=pool_size) as pool:
        results = list(pool.map(
            lambda p: evaluate_problem(p, mode, config, gateway, judge, kb, catalog, templates), problems))
    records = [r for r, _ in results]
    outcomes = [o for _, o in results]
    report = build_report(records, label, mode, cmap)
    return report, records, outcomes


def write_records(records: Iterable[EvalRecord], path) -> None:
    path = Path(path)
    lines = [json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) for r in records]
    try:
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(path, exc) from exc


def read_records(path) -> list[EvalRecord]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(path, exc) from exc
    return [EvalRecord.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


def write_report(report: EvalReport, records: Sequence[EvalRecord], directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {"report": directory / "report.json", "records": directory / "records.jsonl",
           "table": directory / "table.txt"}
    out["report"].write_text(report.to_json(), encoding="utf-8")
    write_records(sorted(records, key=lambda r: r.problem_id), out["records"])
    out["table"].write_text(render_table(report), encoding="utf-8")
    return out
