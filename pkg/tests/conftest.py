from __future__ import annotations

import json
import shutil
from pathlib import Path

import pytest

from algoforge.domain import load_problem
from algoforge.judge import Judge, LocalSandbox
from algoforge.llm import Gateway, ReplayBackend, ReplayScript

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
GOLDEN = FIXTURES / "appendix-i"
KB = FIXTURES / "kb"

needs_gxx = pytest.mark.skipif(shutil.which("g++") is None, reason="g++ not installed")


@pytest.fixture(scope="session")
def judge():
    j = Judge(LocalSandbox())
    yield j
    j.close()


@pytest.fixture(scope="session")
def golden_problem():
    return load_problem(GOLDEN / "problem.json")


@pytest.fixture
def golden_script():
    return ReplayScript.load(GOLDEN / "replay.json")


@pytest.fixture
def golden_gateway(golden_script):
    return Gateway(ReplayBackend(golden_script), offline=True)


def golden_text(name: str) -> str:
    return (GOLDEN / name).read_text(encoding="utf-8")


def golden_json(name: str):
    return json.loads(golden_text(name))


# --- acceptance summary ------------------------------------------------------

_ACCEPTANCE: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = marker.args
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    entry = _ACCEPTANCE.setdefault(number, [title, status])
    if status != "PASS":
        entry[1] = status if entry[1] != "FAIL" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
