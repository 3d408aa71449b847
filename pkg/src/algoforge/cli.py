"""Command-line entry point: ``algoforge <subcommand> ...``.

Exit status: 0 on success (including non-AC verdicts), 1 on domain errors,
2 on usage errors. Diagnostics go to stderr; data to stdout or files.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .errors import AlgoforgeError

log = logging.getLogger("algoforge")


@dataclass
class GlobalConfig:
    api_base: str | None = None
    model: str | None = None
    api_key: str | None = field(default=None, repr=False)
    sandbox: str = "local"
    prompts_dir: Path | None = None
    rules_dir: Path | None = None
    replay: Path | None = None

    @classmethod
    def from_env(cls, args) -> "GlobalConfig":
        env = os.environ
        return cls(
            api_base=env.get("ALGOFORGE_API_BASE"),
            model=env.get("ALGOFORGE_MODEL"),
            api_key=env.get("ALGOFORGE_API_KEY"),
            sandbox=getattr(args, "sandbox", None) or env.get("ALGOFORGE_SANDBOX", "local"),
            prompts_dir=Path(args.prompts) if getattr(args, "prompts", None) else None,
            rules_dir=Path(args.rules) if getattr(args, "rules", None) else None,
            replay=Path(args.replay) if getattr(args, "replay", None) else None,
        )

    def templates(self):
        if self.prompts_dir is None:
            return None
        from .llm import load_template

        return {p.stem: load_template(p.stem, self.prompts_dir) for p in sorted(self.prompts_dir.glob("*.txt"))}

    def rules(self):
        if self.rules_dir is None:
            return None
        from .samples import load_rules

        return load_rules(self.rules_dir)

    def judge(self):
        from .judge import Judge, make_sandbox

        return Judge(make_sandbox(self.sandbox))

    def gateway(self, per_problem: bool = False):
        from .llm import Gateway, OpenAIBackend, ReplayBackend, ReplayScript

        if self.replay is not None:
            if per_problem:
                scripts = {d.name: ReplayScript.load(d) for d in sorted(self.replay.iterdir()) if d.is_dir()}
                return Gateway(ReplayBackend(scripts), offline=True)
            return Gateway(ReplayBackend(ReplayScript.load(self.replay)), offline=True)
        return Gateway(OpenAIBackend.from_env())


# --- helpers -------------------------------------------------------------------


def _limits(args, base=None):
    from .domain import ResourceLimits

    base = base or ResourceLimits()
    return ResourceLimits(
        time_limit=args.time_limit if args.time_limit is not None else base.time_limit,
        memory_limit=int(args.memory_limit * 1024 * 1024) if args.memory_limit is not None else base.memory_limit,
        output_limit=int(args.output_limit * 1024 * 1024) if args.output_limit is not None else base.output_limit,
    )


def _print_json(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, ensure_ascii=False) + "\n")


def _knowledge(args, config):
    from .agents import KnowledgeBase
    from .retrieval import Index, LexicalEmbedder, ingest_kb

    embedder = LexicalEmbedder()
    wiki = bank = None
    if getattr(args, "index", None):
        wiki = Index.load(args.index, embedder)
    else:
        kb_dir = getattr(args, "kb", None) or config.kb_dir
        if kb_dir:
            wiki = ingest_kb(kb_dir, "wiki", embedder)
    bank_dir = getattr(args, "bank", None) or config.bank_dir
    if bank_dir:
        bank = ingest_kb(bank_dir, "problem_bank", embedder)
    if wiki is None and bank is None:
        return None
    return KnowledgeBase(wiki, bank, embedder, config.kb_k)


def _workflow_config(args):
    from dataclasses import replace

    from .workflow import WorkflowConfig, load_config

    config = load_config(args.config) if getattr(args, "config", None) else WorkflowConfig()
    if getattr(args, "max_iterations", None):
        config = replace(config, max_iterations=args.max_iterations)
    if getattr(args, "branch_policy", None):
        config = replace(config, branch_policy=args.branch_policy)
    if getattr(args, "fail_fast", False):
        config = replace(config, fail_fast=True)
    return config


# --- subcommands -----------------------------------------------------------------


def cmd_extract(args, g: GlobalConfig) -> int:
    from .domain import load_problem
    from .samples import extract_samples, write_sample_files

    if args.problem:
        problem = load_problem(args.problem)
        statement, fmt = problem.statement, args.format or problem.source_format
    else:
        statement = Path(args.statement).read_text(encoding="utf-8")
        fmt = args.format or "generic"
    cases = extract_samples(statement, fmt, g.rules())
    paths = write_sample_files(cases, args.out)
    _print_json({"cases": len(cases), "files": [str(p) for p in paths]})
    return 0


def _load_cases(path: Path):
    from .domain import load_problem
    from .samples import read_sample_files

    if path.is_dir():
        cases = read_sample_files(path)
        if not cases:
            raise AlgoforgeError(f"{path}: no <k>.in / <k>.ans files")
        return cases, None
    problem = load_problem(path)
    cases = problem.hidden_cases or problem.samples
    if not cases:
        raise AlgoforgeError(f"{path}: problem has no cases")
    return list(cases), problem.limits


def cmd_judge(args, g: GlobalConfig) -> int:
    source = Path(args.source).read_text(encoding="utf-8")
    cases, plimits = _load_cases(Path(args.cases))
    with g.judge() as judge:
        result = judge.judge(source, cases, _limits(args, plimits), fail_fast=args.fail_fast)
    _print_json(result.to_dict())
    return 0


def cmd_solve(args, g: GlobalConfig) -> int:
    from .domain import load_label_catalog, load_problem
    from .workflow import persist_transcript, solve

    catalog = load_label_catalog(args.catalog) if args.catalog else load_label_catalog()
    problem_path = args.problem
    if problem_path is None and g.replay is not None and (g.replay / "problem.json").is_file():
        problem_path = g.replay / "problem.json"
    if problem_path is None:
        raise AlgoforgeError("--problem is required unless the replay directory holds problem.json")
    problem = load_problem(problem_path, catalog)
    config = _workflow_config(args)
    gateway = g.gateway()
    kb = _knowledge(args, config)
    with g.judge() as judge:
        outcome = solve(problem, config, gateway, judge, kb, catalog, g.templates())
    out = Path(args.out) if args.out else Path(f"transcript-{problem.id}")
    persist_transcript(outcome.transcript, out)
    summary = outcome.summary()
    summary["transcript"] = str(out)
    _print_json(summary)
    return 0


def cmd_replay(args, g: GlobalConfig) -> int:
    from .domain import load_label_catalog, load_problem
    from .llm import Gateway, ReplayBackend
    from .workflow import persist_transcript, problem_from_transcript, script_from_transcript, solve

    src = Path(args.transcript)
    config = _workflow_config(args)
    problem = load_problem(args.problem) if args.problem else problem_from_transcript(src)
    script = script_from_transcript(src, config)
    gateway = Gateway(ReplayBackend(script), offline=True)
    with g.judge() as judge:
        outcome = solve(problem, config, gateway, judge, _knowledge(args, config), load_label_catalog(),
                        g.templates())
    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="algoforge-replay-"))
    persist_transcript(outcome.transcript, out)
    differences = []
    for art in outcome.transcript.artifacts:
        original = src / art.name
        if not original.is_file():
            differences.append({"file": art.name, "problem": "missing from the original transcript"})
        elif art.name.startswith("judge-result-"):
            # Timing and memory are re-measured; compare the verdict fields only.
            a, b = json.loads(original.read_text(encoding="utf-8")), json.loads(art.content)
            keys = ("status", "passed", "total")
            if any(a.get(k) != b.get(k) for k in keys) or (a["status"] != "AC" and a.get("info") != b.get("info")):
                differences.append({"file": art.name, "problem": "verdict differs"})
        elif original.read_bytes() != art.content:
            differences.append({"file": art.name, "problem": "content differs"})
    summary = outcome.summary()
    summary.update(replayed_to=str(out), matches=not differences, differences=differences,
                   calls=len(outcome.transcript.exchanges))
    _print_json(summary)
    return 0 if not differences else 1


def cmd_eval(args, g: GlobalConfig) -> int:
    from .domain import load_category_map, load_dataset, load_label_catalog
    from .evaluation import evaluate_batch, render_table, write_report
    from .workflow import persist_transcript

    catalog = load_label_catalog()
    problems = load_dataset(args.dataset, catalog)
    config = _workflow_config(args)
    gateway = g.gateway(per_problem=True)
    cmap = load_category_map(args.categories) if args.by_category else None
    with g.judge() as judge:
        report, records, outcomes = evaluate_batch(
            problems, config, args.pool, args.mode, gateway, judge, _knowledge(args, config), catalog, cmap,
            args.label or args.mode, g.templates())
    paths = write_report(report, records, args.out)
    if args.save_transcripts:
        for o in outcomes:
            if o is not None:
                persist_transcript(o.transcript, Path(args.out) / "transcripts" / o.problem_id)
    sys.stdout.write(render_table(report))
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_report(args, g: GlobalConfig) -> int:
    from .domain import load_category_map
    from .evaluation import build_report, read_records, render_table, write_report

    records = read_records(args.records)
    cmap = load_category_map(args.categories) if args.by_category else None
    base = None
    if args.baseline:
        base = {r.problem_id: r.status for r in read_records(args.baseline)}
    base_cot = None
    if args.base_cot:
        doc = json.loads(Path(args.base_cot).read_text(encoding="utf-8"))
        base_cot = list(doc.values()) if isinstance(doc, dict) else list(doc)
    report = build_report(records, args.label, args.mode, cmap, base, base_cot)
    if args.out:
        write_report(report, records, args.out)
    if args.json:
        sys.stdout.write(report.to_json())
    else:
        sys.stdout.write(render_table(report))
    return 0


def cmd_kb_build(args, g: GlobalConfig) -> int:
    from .retrieval import ingest_kb

    index = ingest_kb(args.dir, args.mode, cache=args.out)
    _print_json({"items": len(index), "mode": index.mode, "backend_id": index.backend_id, "index": str(args.out)})
    return 0


def cmd_kb_query(args, g: GlobalConfig) -> int:
    from .retrieval import Chunk, Index, LexicalEmbedder, query_index

    embedder = LexicalEmbedder()
    index = Index.load(args.index, embedder)
    query = Path(args.query_file).read_text(encoding="utf-8") if args.query_file else args.query
    if not query:
        raise AlgoforgeError("give --query or --query-file")
    hits = []
    for h in query_index(index, query, args.k, embedder):
        item = h.item
        if isinstance(item, Chunk):
            hits.append({"score": h.score, "doc_id": item.doc_id, "heading_path": list(item.heading_path),
                         "char_span": list(item.char_span), "body": item.body})
        else:
            hits.append({"score": h.score, "id": item.problem_id, "statement": item.statement})
    _print_json(hits)
    return 0


# --- parser ------------------------------------------------------------------------


def _add_limits(p):
    p.add_argument("--time-limit", type=float, help="seconds per case (default: problem or 2.0)")
    p.add_argument("--memory-limit", type=float, help="MiB per case (default: problem or 256)")
    p.add_argument("--output-limit", type=float, help="MiB of output per case (default: 64)")


def _add_workflow(p):
    p.add_argument("--config", help="workflow config JSON")
    p.add_argument("--replay", help="replay script directory or manifest; disables network access")
    p.add_argument("--kb", help="knowledge-base directory of markdown files")
    p.add_argument("--index", help="prebuilt knowledge-base index file")
    p.add_argument("--bank", help="problem-bank directory (enhanced knowledge mode)")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--branch-policy", choices=["sequential_first_pass", "all_then_best"])
    p.add_argument("--fail-fast", action="store_true", help="stop judging a submission at its first failing case")
    p.add_argument("--prompts", help="directory of prompt templates overriding the shipped ones")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="algoforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--sandbox", choices=["local", "container"], help="judge backend (env ALGOFORGE_SANDBOX)")
    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True

    p = sub.add_parser("extract", help="parse sample cases out of a statement")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--statement", help="statement text file")
    src.add_argument("--problem", help="problem JSON file")
    p.add_argument("--format", choices=["generic", "nowcoder", "hdu", "jisuanke", "codeforces"])
    p.add_argument("--rules", help="directory of <format>.patterns files")
    p.add_argument("--out", required=True, help="directory for <k>.in / <k>.ans files")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("judge", help="compile and judge one C++17 source")
    p.add_argument("--source", required=True)
    p.add_argument("--cases", required=True, help="samples directory or problem JSON file")
    p.add_argument("--fail-fast", action="store_true")
    _add_limits(p)
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("solve", help="run the full workflow on one problem")
    p.add_argument("--problem", help="problem JSON (default: problem.json inside --replay)")
    p.add_argument("--out", help="transcript directory (default transcript-<id>)")
    p.add_argument("--catalog", help="tag catalog file")
    _add_workflow(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("replay", help="re-drive the workflow from a persisted transcript and compare")
    p.add_argument("--transcript", required=True)
    p.add_argument("--problem", help="problem JSON (default: rebuilt from the transcript samples)")
    p.add_argument("--out", help="where to write the replayed transcript")
    p.add_argument("--config")
    p.add_argument("--kb")
    p.add_argument("--index")
    p.add_argument("--bank")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--prompts")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("eval", help="evaluate a dataset")
    p.add_argument("--dataset", required=True, help="directory of problem JSON files")
    p.add_argument("--mode", choices=["direct_ask", "workflow", "brute_force"], default="workflow")
    p.add_argument("--pool", type=int, default=8, help="concurrent solves")
    p.add_argument("--out", required=True)
    p.add_argument("--label", help="run name shown in the table")
    p.add_argument("--by-category", action="store_true")
    p.add_argument("--categories", help="category map JSON (default: shipped map)")
    p.add_argument("--save-transcripts", action="store_true")
    _add_workflow(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="recompute a report from records.jsonl")
    p.add_argument("--records", required=True)
    p.add_argument("--by-category", action="store_true")
    p.add_argument("--categories")
    p.add_argument("--baseline", help="direct-ask records.jsonl for Base->Iter1 transitions")
    p.add_argument("--base-cot", help="JSON list (or id map) of baseline CoT lengths")
    p.add_argument("--label", default="")
    p.add_argument("--mode", default="workflow")
    p.add_argument("--out", help="also write report.json / records.jsonl / table.txt here")
    p.add_argument("--json", action="store_true", help="print report JSON instead of the table")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("kb", help="knowledge-base index tools")
    kb = p.add_subparsers(dest="kb_command", metavar="<kb-command>")
    kb.required = True
    b = kb.add_parser("build", help="chunk, embed and index a directory")
    b.add_argument("--dir", required=True)
    b.add_argument("--mode", choices=["wiki", "problem_bank"], default="wiki")
    b.add_argument("--out", required=True, help="index file to write")
    b.set_defaults(func=cmd_kb_build)
    q = kb.add_parser("query", help="top-k retrieval against an index")
    q.add_argument("--index", required=True)
    q.add_argument("--query")
    q.add_argument("--query-file")
    q.add_argument("-k", type=int, default=5)
    q.set_defaults(func=cmd_kb_query)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args, GlobalConfig.from_env(args))
    except (AlgoforgeError, ValueError, OSError) as exc:
        print(f"algoforge {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
