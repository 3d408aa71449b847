from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from algoforge.domain import ResourceLimits, SampleCase
from algoforge.errors import CompilationError, SandboxUnavailable
from algoforge.judge import (
    CaseResult,
    ContainerSandbox,
    JudgeResult,
    Verdict,
    compare_outputs,
    format_case_info,
    make_sandbox,
    summarize,
)

from conftest import FIXTURES, golden_json, golden_text, needs_gxx

VERDICTS = FIXTURES / "verdicts"
CASE = SampleCase(1, (VERDICTS / "case.in").read_text(), (VERDICTS / "case.ans").read_text())
ONE_SECOND = ResourceLimits(time_limit=1.0)


def fixture_source(name: str) -> str:
    return (VERDICTS / f"{name}.cpp").read_text()


# --- pure parts --------------------------------------------------------------


@pytest.mark.parametrize("expected, actual, same", [
    ("7\n", "7", True),
    ("7", "1", False),
    ("a b \n", "a b\n", True),
    ("1\n2\n", "1\n2\n\n\n", True),
    ("1\n\n2", "1\n2", False),
    ("", "\n\n", True),
])
def test_compare_outputs(expected, actual, same):
    assert compare_outputs(expected, actual) is same


printable = st.text(st.characters(blacklist_categories=("Cs",)), max_size=30)


@given(printable, printable)
def test_compare_is_symmetric(a, b):
    assert compare_outputs(a, b) == compare_outputs(b, a)
    assert compare_outputs(a, a)


@given(st.lists(st.sampled_from([Verdict.AC, Verdict.WA, Verdict.TLE, Verdict.RE, Verdict.MLE]), min_size=1,
                max_size=8))
def test_summary_invariants(verdicts):
    results = [CaseResult(i, v, 0.01 * i, 1000 * i, "e", "a", "d") for i, v in enumerate(verdicts, 1)]
    jr = summarize(results, len(results))
    assert 0 <= jr.passed <= jr.total
    assert (jr.status == Verdict.AC) == (jr.passed == jr.total)
    first_bad = next((v for v in verdicts if v != Verdict.AC), Verdict.AC)
    assert jr.status == first_bad
    if jr.status != Verdict.AC:
        assert jr.info
    assert jr.max_time == pytest.approx(0.01 * len(verdicts))


def test_result_rejects_inconsistent_status():
    with pytest.raises(ValueError):
        JudgeResult(Verdict.AC, 0, 1)
    with pytest.raises(ValueError):
        JudgeResult(Verdict.WA, 2, 1)


def test_wa_info_shape_and_round_trip():
    res = CaseResult(1, Verdict.WA, expected_excerpt="7", actual_excerpt="1")
    assert format_case_info(res) == '[Case 1] Expected "7", Find "1"'
    jr = summarize([res], 1)
    assert jr.to_dict() == golden_json("judge-result-1.json")
    assert JudgeResult.from_dict(jr.to_dict()).to_dict() == jr.to_dict()


def test_wa_excerpt_is_capped():
    res = CaseResult(1, Verdict.WA, expected_excerpt="x" * 500, actual_excerpt="y")
    assert len(format_case_info(res)) < 100


def test_ac_info_carries_time_and_memory():
    doc = JudgeResult(Verdict.AC, 1, 1, max_time=0.001175, max_memory=int(3.449 * 1024 * 1024)).to_dict()
    assert set(doc["info"]) == {"max_time_sec", "max_memory_mb"}
    assert doc["info"]["max_memory_mb"] == 3.449
    assert set(golden_json("judge-result-2.json")["info"]) == set(doc["info"])


def test_make_sandbox_rejects_unknown(monkeypatch):
    monkeypatch.setenv("ALGOFORGE_SANDBOX", "chroot")
    with pytest.raises(ValueError):
        make_sandbox()


def test_container_backend_without_runtime():
    box = ContainerSandbox(runtime="definitely-not-a-container-runtime")
    with pytest.raises(SandboxUnavailable):
        box.compile("int main(){}", Path("/tmp"))


def test_container_unavailable_is_system_error(tmp_path):
    from algoforge.judge import Judge

    jr = Judge(ContainerSandbox(runtime="definitely-not-a-container-runtime")).judge(fixture_source("ac"), [CASE])
    assert jr.status == Verdict.SE and jr.passed == 0


# --- local sandbox -----------------------------------------------------------


@needs_gxx
def test_golden_solutions(judge, golden_problem):
    cases = golden_problem.hidden_cases
    first = judge.judge(golden_text("Agent4-solution.cpp"), cases, golden_problem.limits)
    assert first.to_dict() == golden_json("judge-result-1.json")
    final = judge.judge(golden_text("solution-final.cpp"), cases, golden_problem.limits)
    assert final.status == Verdict.AC and final.passed == final.total == 1
    # Same order of magnitude as the recorded 0.001175 s.
    assert final.max_time < 0.1
    assert 0 < final.max_memory < 64 * 1024 * 1024


@needs_gxx
@pytest.mark.parametrize("name, verdict", [
    ("ac", Verdict.AC), ("wa", Verdict.WA), ("tle", Verdict.TLE), ("re", Verdict.RE), ("ce", Verdict.CE),
])
def test_verdict_fixture(judge, name, verdict):
    jr = judge.judge(fixture_source(name), [CASE], ONE_SECOND)
    assert jr.status == verdict
    assert jr.total == 1
    if verdict == Verdict.TLE:
        assert jr.max_time >= 1.0
        assert jr.cases[0].time <= 1.0 + judge.grace
    if verdict == Verdict.CE:
        assert jr.info and not jr.cases


@needs_gxx
def test_compile_errors_carry_diagnostics(judge, tmp_path):
    with pytest.raises(CompilationError) as info:
        judge.compile("int main(", tmp_path)
    assert "main.cpp" in info.value.diagnostic
    with pytest.raises(ValueError):
        judge.compile("   ")


@needs_gxx
def test_partial_pass_reports_first_failure(judge):
    src = ("#include <iostream>\nint main(){long long a,b;std::cin>>a>>b;"
           "if(a==4) return 3; std::cout<<(a==6?0:a+b)<<\"\\n\";}\n")
    cases = [SampleCase(1, "1 2\n", "3\n"), SampleCase(2, "4 4\n", "8\n"), SampleCase(3, "6 1\n", "7\n"),
             SampleCase(4, "5 5\n", "10\n")]
    jr = judge.judge(src, cases)
    assert (jr.status, jr.passed, jr.total) == (Verdict.RE, 2, 4)
    assert jr.info.splitlines() == ["[Case 2] RE: exit code 3", '[Case 3] Expected "7", Find "0"']
    ff = judge.judge(src, cases, fail_fast=True)
    assert (ff.status, ff.passed, ff.total, len(ff.cases)) == (Verdict.RE, 1, 4, 2)


@needs_gxx
def test_memory_limit(judge):
    src = ("#include <cstdio>\n#include <vector>\nint main(){std::vector<char> v(96u<<20);"
           "for(size_t i=0;i<v.size();i+=4096) v[i]=(char)(i>>12);long s=0;"
           "for(size_t i=0;i<v.size();i+=4096) s+=v[i];std::printf(\"%d\\n\",s!=0);}\n")
    jr = judge.judge(src, [SampleCase(1, "", "1\n")], ResourceLimits(time_limit=2.0, memory_limit=64 << 20))
    assert jr.status in (Verdict.MLE, Verdict.RE)
    roomy = judge.judge(src, [SampleCase(1, "", "1\n")], ResourceLimits(time_limit=2.0, memory_limit=256 << 20))
    assert roomy.status == Verdict.AC


@needs_gxx
def test_output_limit(judge):
    src = "#include <cstdio>\nint main(){for(;;)std::puts(\"spam spam spam spam\");}\n"
    jr = judge.judge(src, [SampleCase(1, "", "x\n")], ResourceLimits(time_limit=2.0, output_limit=1 << 16))
    assert jr.status == Verdict.RE
    assert "output limit exceeded" in jr.info


@needs_gxx
def test_writes_outside_workdir_do_not_escape(judge):
    jr = judge.judge(fixture_source("escape"), [SampleCase(1, "", "0\n")])
    assert jr.status in (Verdict.AC, Verdict.WA, Verdict.RE)
    if os.geteuid() == 0:
        assert jr.status == Verdict.AC
        assert not Path("/etc/algoforge-escape").exists()
        assert not Path("/root/algoforge-escape").exists()


@needs_gxx
def test_compile_cache_reuses_artifact(judge):
    src = fixture_source("ac")
    assert judge.compile(src) == judge.compile(src)


@needs_gxx
def test_concurrent_judging_is_consistent(judge):
    from concurrent.futures import ThreadPoolExecutor

    sources = [fixture_source("ac"), fixture_source("wa")] * 4
    with ThreadPoolExecutor(8) as pool:
        results = list(pool.map(lambda s: judge.judge(s, [CASE]).status, sources))
    assert results == [Verdict.AC, Verdict.WA] * 4
