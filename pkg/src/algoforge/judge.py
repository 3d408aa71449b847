"""Compile C++17 submissions and run them against test cases in a sandbox.

Two sandbox backends share one interface:

* :class:`LocalSandbox` compiles with the host ``g++`` and runs each case
  through ``runbox`` (a small C launcher shipped in ``data/``) which applies
  rlimits, drops to an unprivileged uid when running as root, enforces the
  wall limit and reports the program's own rusage.
* :class:`ContainerSandbox` runs both steps inside a ``gcc:latest`` container.
"""
from __future__ import annotations

import atexit
import hashlib
import logging
import math
import os
import shutil
import signal
import subprocess
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

from .domain import ResourceLimits, SampleCase, data_path
from .errors import CompilationError, SandboxUnavailable

log = logging.getLogger(__name__)

COMPILE_TIMEOUT = 30.0
DIAGNOSTIC_LIMIT = 8 * 1024
EXCERPT_LIMIT = 4 * 1024
INFO_EXCERPT = 64
WALL_GRACE = 0.25
NOBODY = 65534
MIB = 1024 * 1024


class Verdict(str, Enum):
    AC = "AC"
    WA = "WA"
    TLE = "TLE"
    MLE = "MLE"
    RE = "RE"
    CE = "CE"
    SE = "SE"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class CaseResult:
    index: int
    verdict: Verdict
    time: float = 0.0
    memory: int = 0
    expected_excerpt: str = ""
    actual_excerpt: str = ""
    detail: str = ""


@dataclass(frozen=True)
class JudgeResult:
    status: Verdict
    passed: int
    total: int
    info: str = ""
    max_time: float = 0.0
    max_memory: int = 0
    cases: tuple[CaseResult, ...] = ()

    def __post_init__(self):
        if not 0 <= self.passed <= self.total:
            raise ValueError(f"passed={self.passed} out of range for total={self.total}")
        if (self.status == Verdict.AC) != (self.passed == self.total and self.total > 0):
            raise ValueError(f"status {self.status} inconsistent with {self.passed}/{self.total}")

    @property
    def accepted(self) -> bool:
        return self.status == Verdict.AC

    @property
    def ratio(self) -> float:
        return self.passed / self.total if self.total else 0.0

    def info_value(self):
        """``info`` as it appears in the serialized verdict record."""
        if self.status == Verdict.AC:
            return {
                "max_time_sec": round(self.max_time, 6),
                "max_memory_mb": round(self.max_memory / MIB, 3),
            }
        return self.info

    def to_dict(self) -> dict:
        return {"status": self.status.value, "passed": self.passed, "total": self.total, "info": self.info_value()}

    @classmethod
    def from_dict(cls, doc: dict) -> "JudgeResult":
        status = Verdict(doc["status"])
        info = doc.get("info", "")
        max_time = 0.0
        max_memory = 0
        if isinstance(info, dict):
            max_time = float(info.get("max_time_sec", 0.0))
            max_memory = int(round(float(info.get("max_memory_mb", 0.0)) * MIB))
            info = ""
        return cls(status, int(doc["passed"]), int(doc["total"]), info or "", max_time, max_memory)


def _normalized_lines(text: str) -> list[str]:
    lines = [line.rstrip() for line in text.replace("\r\n", "\n").split("\n")]
    while lines and not lines[-1]:
        lines.pop()
    return lines


def compare_outputs(expected: str, actual: str) -> bool:
    """Line-wise equality ignoring trailing whitespace and trailing blank lines."""
    return _normalized_lines(expected) == _normalized_lines(actual)


def _excerpt(text: str, limit: int) -> str:
    text = "\n".join(_normalized_lines(text))
    return text if len(text) <= limit else text[:limit] + "..."


@dataclass(frozen=True)
class Execution:
    """Raw outcome of running a program once."""

    exit_code: int | None
    signal: int
    wall: float
    cpu: float
    memory: int
    timed_out: bool
    stdout: str
    stderr: str = ""
    output_exceeded: bool = False
    setup_error: str = ""


class _Workdirs:
    """Hands out unique directories under one root."""

    def __init__(self, root: Path):
        self.root = root

    def new(self, prefix: str) -> Path:
        path = Path(tempfile.mkdtemp(prefix=prefix, dir=self.root))
        path.chmod(0o755)
        return path


class LocalSandbox:
    name = "local"

    def __init__(self, root=None, compiler: str = "g++", compile_timeout: float = COMPILE_TIMEOUT,
                 drop_privileges: bool | None = None):
        self.compiler = compiler
        self.compile_timeout = compile_timeout
        if drop_privileges is None:
            drop_privileges = hasattr(os, "geteuid") and os.geteuid() == 0
        self.drop_privileges = drop_privileges
        self._own_root = root is None
        self.root = Path(root) if root else Path(tempfile.mkdtemp(prefix="algoforge-judge-"))
        self.root.mkdir(parents=True, exist_ok=True)
        self.root.chmod(0o755)
        self.workdirs = _Workdirs(self.root)
        self._runbox: Path | None = None
        self._lock = threading.Lock()

    def close(self):
        if self._own_root:
            shutil.rmtree(self.root, ignore_errors=True)

    def _runbox_path(self) -> Path:
        with self._lock:
            if self._runbox is None:
                src = data_path("runbox.c")
                digest = hashlib.sha256(src.read_bytes()).hexdigest()[:16]
                out = self.root / f"runbox-{digest}"
                compiler = shutil.which("gcc") or shutil.which("cc")
                if compiler is None:
                    raise SandboxUnavailable("no C compiler available to build runbox")
                proc = subprocess.run([compiler, "-O2", "-o", str(out), str(src)], capture_output=True, text=True)
                if proc.returncode != 0:
                    raise SandboxUnavailable(f"could not build runbox: {proc.stderr.strip()}")
                self._runbox = out
            return self._runbox

    def compile(self, source: str, workdir) -> Path:
        workdir = Path(workdir)
        (workdir / "main.cpp").write_text(source, encoding="utf-8")
        if shutil.which(self.compiler) is None:
            raise SandboxUnavailable(f"compiler {self.compiler!r} not found")
        cmd = [self.compiler, "-O2", "-std=c++17", "-o", "main", "main.cpp"]
        try:
            proc = subprocess.run(cmd, cwd=workdir, capture_output=True, text=True, errors="replace",
                                  timeout=self.compile_timeout)
        except subprocess.TimeoutExpired:
            raise CompilationError(f"compilation timed out after {self.compile_timeout:g} s") from None
        except OSError as exc:
            raise SandboxUnavailable(str(exc)) from exc
        if proc.returncode != 0:
            diag = (proc.stderr or proc.stdout or f"compiler exited with {proc.returncode}")
            raise CompilationError(diag[:DIAGNOSTIC_LIMIT])
        artifact = workdir / "main"
        artifact.chmod(0o755)
        return artifact

    def execute(self, artifact: Path, stdin_text: str, limits: ResourceLimits, grace: float = WALL_GRACE) -> Execution:
        runbox = self._runbox_path()
        rundir = self.workdirs.new("run-")
        try:
            in_path = rundir / "input.txt"
            in_path.write_text(stdin_text if stdin_text.endswith("\n") or not stdin_text else stdin_text + "\n",
                               encoding="utf-8")
            out_path, err_path = rundir / "output.txt", rundir / "stderr.txt"
            uid = gid = -1
            nproc = 0
            if self.drop_privileges:
                uid = gid = NOBODY
                nproc = 64
            cpu = math.ceil(limits.time_limit) + 1
            address_space = limits.memory_limit * 2 + 64 * MIB
            wall_ms = int((limits.time_limit + grace) * 1000)
            cmd = [str(runbox), str(cpu), str(address_space), str(limits.output_limit), str(limits.memory_limit),
                   str(nproc), str(uid), str(gid), str(wall_ms), str(in_path), str(out_path), str(err_path),
                   "--", str(artifact)]
            try:
                proc = subprocess.run(cmd, capture_output=True, text=True, timeout=limits.time_limit + grace + 10)
            except (OSError, subprocess.TimeoutExpired) as exc:
                return Execution(None, 0, 0.0, 0.0, 0, False, "", setup_error=f"runbox failed: {exc}")
            report = dict(kv.split("=", 1) for kv in proc.stdout.split())
            if proc.returncode != 0 or "exited" not in report:
                return Execution(None, 0, 0.0, 0.0, 0, False, "",
                                 setup_error=f"runbox failed ({proc.returncode}): {proc.stderr.strip()}")
            setup_stage = int(report["setup_stage"])
            if setup_stage:
                err = os.strerror(int(report["setup_errno"]))
                return Execution(None, 0, 0.0, 0.0, 0, False, "",
                                 setup_error=f"sandbox setup failed at stage {setup_stage}: {err}")
            with open(out_path, "rb") as fh:
                raw = fh.read(limits.output_limit + 1)
            stderr = err_path.read_bytes()[:EXCERPT_LIMIT].decode("utf-8", "replace")
            sig = int(report["signal"])
            exceeded = len(raw) > limits.output_limit or sig == signal.SIGXFSZ
            return Execution(
                exit_code=int(report["code"]) if report["exited"] == "1" else None,
                signal=sig,
                wall=float(report["wall"]),
                cpu=float(report["cpu"]),
                memory=int(report["maxrss_kb"]) * 1024,
                timed_out=report["timed_out"] == "1",
                stdout=raw[: limits.output_limit].decode("utf-8", "replace"),
                stderr=stderr,
                output_exceeded=exceeded,
            )
        finally:
            shutil.rmtree(rundir, ignore_errors=True)


class ContainerSandbox:
    """Runs compilation and execution inside ``gcc:latest`` via a container CLI.

    The workdir is bind-mounted, networking is disabled and commands run as
    an unprivileged user. Peak memory is not observable through the CLI and
    is reported as 0.
    """

    name = "container"

    def __init__(self, runtime: str = "docker", image: str = "gcc:latest", root=None,
                 compile_timeout: float = COMPILE_TIMEOUT):
        self.runtime = runtime
        self.image = image
        self.compile_timeout = compile_timeout
        self._own_root = root is None
        self.root = Path(root) if root else Path(tempfile.mkdtemp(prefix="algoforge-judge-"))
        self.root.mkdir(parents=True, exist_ok=True)
        self.root.chmod(0o755)
        self.workdirs = _Workdirs(self.root)
        self._checked = False

    def close(self):
        if self._own_root:
            shutil.rmtree(self.root, ignore_errors=True)

    def _check(self):
        if self._checked:
            return
        if shutil.which(self.runtime) is None:
            raise SandboxUnavailable(f"container runtime {self.runtime!r} not found")
        try:
            proc = subprocess.run([self.runtime, "info"], capture_output=True, timeout=20)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise SandboxUnavailable(f"{self.runtime} info failed: {exc}") from exc
        if proc.returncode != 0:
            raise SandboxUnavailable(f"{self.runtime} daemon unavailable")
        self._checked = True

    def _base(self, mount: Path, read_only: bool, name: str):
        spec = f"{mount}:/work" + (":ro" if read_only else "")
        return [self.runtime, "run", "--rm", "-i", "--name", name, "--network", "none",
                "--user", f"{NOBODY}:{NOBODY}", "-v", spec, "-w", "/work", self.image]

    def compile(self, source: str, workdir) -> Path:
        self._check()
        workdir = Path(workdir)
        workdir.chmod(0o777)
        (workdir / "main.cpp").write_text(source, encoding="utf-8")
        name = f"algoforge-cc-{uuid.uuid4().hex[:12]}"
        cmd = self._base(workdir, False, name) + ["g++", "-O2", "-std=c++17", "-o", "main", "main.cpp"]
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, errors="replace", timeout=self.compile_timeout)
        except subprocess.TimeoutExpired:
            subprocess.run([self.runtime, "kill", name], capture_output=True)
            raise CompilationError(f"compilation timed out after {self.compile_timeout:g} s") from None
        if proc.returncode != 0:
            raise CompilationError((proc.stderr or proc.stdout)[:DIAGNOSTIC_LIMIT])
        return workdir / "main"

    def execute(self, artifact: Path, stdin_text: str, limits: ResourceLimits, grace: float = WALL_GRACE) -> Execution:
        self._check()
        name = f"algoforge-run-{uuid.uuid4().hex[:12]}"
        cpu = math.ceil(limits.time_limit) + 1
        cmd = self._base(artifact.parent, True, name)
        cmd[4:4] = ["--memory", str(limits.memory_limit), "--memory-swap", str(limits.memory_limit),
                    "--pids-limit", "64"]
        cmd += ["sh", "-c", f"ulimit -t {cpu}; exec /work/{artifact.name}"]
        start = time.monotonic()
        try:
            proc = subprocess.run(cmd, input=stdin_text.encode(), capture_output=True,
                                  timeout=limits.time_limit + grace + 5)
        except subprocess.TimeoutExpired:
            subprocess.run([self.runtime, "kill", name], capture_output=True)
            wall = time.monotonic() - start
            return Execution(None, signal.SIGKILL, wall, wall, 0, True, "")
        wall = time.monotonic() - start
        code = proc.returncode
        sig = code - 128 if code > 128 else 0
        out = proc.stdout
        return Execution(
            exit_code=None if sig else code,
            signal=sig,
            wall=wall,
            cpu=wall,
            memory=0,
            timed_out=wall > limits.time_limit + grace,
            stdout=out[: limits.output_limit].decode("utf-8", "replace"),
            stderr=proc.stderr[:EXCERPT_LIMIT].decode("utf-8", "replace"),
            output_exceeded=len(out) > limits.output_limit,
        )


def _signal_name(sig: int) -> str:
    try:
        return signal.Signals(sig).name
    except ValueError:
        return f"signal {sig}"


def make_sandbox(kind: str | None = None):
    kind = kind or os.environ.get("ALGOFORGE_SANDBOX", "local")
    if kind == "local":
        return LocalSandbox()
    if kind == "container":
        return ContainerSandbox()
    raise ValueError(f"unknown sandbox backend {kind!r} (expected 'local' or 'container')")


@dataclass
class _CompileEntry:
    artifact: Path | None = None
    diagnostic: str | None = None
    done: threading.Event = field(default_factory=threading.Event)


class Judge:
    """Verdict producer; caches compiled artifacts by source hash."""

    def __init__(self, sandbox=None, grace: float = WALL_GRACE, cache: bool = True):
        self.sandbox = sandbox if sandbox is not None else make_sandbox()
        self.grace = grace
        self.cache_enabled = cache
        self._cache: dict[str, _CompileEntry] = {}
        self._lock = threading.Lock()

    def close(self):
        self.sandbox.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def compile(self, source: str, workdir=None) -> Path:
        """Compile ``source``; raises :class:`CompilationError` with the diagnostic."""
        if not source or not source.strip():
            raise ValueError("source must be nonempty")
        if workdir is not None:
            return self.sandbox.compile(source, workdir)
        if not self.cache_enabled:
            return self.sandbox.compile(source, self.sandbox.workdirs.new("build-"))
        key = hashlib.sha256(source.encode("utf-8")).hexdigest()
        with self._lock:
            entry = self._cache.get(key)
            owner = entry is None
            if owner:
                entry = self._cache[key] = _CompileEntry()
        if owner:
            try:
                entry.artifact = self.sandbox.compile(source, self.sandbox.workdirs.new("build-"))
            except CompilationError as exc:
                entry.diagnostic = exc.diagnostic
            except BaseException:
                with self._lock:
                    del self._cache[key]
                entry.done.set()
                raise
            entry.done.set()
        else:
            entry.done.wait()
            if entry.artifact is None and entry.diagnostic is None:
                return self.compile(source)
        if entry.diagnostic is not None:
            raise CompilationError(entry.diagnostic)
        return entry.artifact

    def run_case(self, artifact: Path, case: SampleCase, limits: ResourceLimits) -> CaseResult:
        limits = limits.resolved()
        ex = self.sandbox.execute(artifact, case.input, limits, self.grace)
        idx = case.index
        if ex.setup_error:
            return CaseResult(idx, Verdict.SE, detail=ex.setup_error)
        tl = limits.time_limit
        if ex.timed_out or ex.cpu > tl or ex.signal == signal.SIGXCPU:
            spent = min(max(ex.cpu, ex.wall), tl + self.grace)
            return CaseResult(idx, Verdict.TLE, spent, ex.memory,
                              detail=f"time {spent:.3f} s exceeds limit {tl:g} s")
        if ex.memory > limits.memory_limit:
            return CaseResult(idx, Verdict.MLE, ex.cpu, ex.memory,
                              detail=f"memory {ex.memory / MIB:.1f} MB exceeds limit {limits.memory_limit / MIB:.1f} MB")
        if ex.output_exceeded:
            return CaseResult(idx, Verdict.RE, ex.cpu, ex.memory, detail="output limit exceeded")
        if ex.signal:
            return CaseResult(idx, Verdict.RE, ex.cpu, ex.memory, detail=f"killed by {_signal_name(ex.signal)}")
        if ex.exit_code:
            return CaseResult(idx, Verdict.RE, ex.cpu, ex.memory, detail=f"exit code {ex.exit_code}")
        ok = compare_outputs(case.expected, ex.stdout)
        return CaseResult(
            idx,
            Verdict.AC if ok else Verdict.WA,
            ex.cpu,
            ex.memory,
            expected_excerpt=_excerpt(case.expected, EXCERPT_LIMIT),
            actual_excerpt=_excerpt(ex.stdout, EXCERPT_LIMIT),
        )

    def judge(self, source: str, cases: Iterable[SampleCase], limits: ResourceLimits | None = None,
              fail_fast: bool = False) -> JudgeResult:
        cases = sorted(cases, key=lambda c: c.index)
        if not cases:
            raise ValueError("at least one case is required")
        limits = (limits or ResourceLimits()).resolved()
        total = len(cases)
        try:
            artifact = self.compile(source)
        except CompilationError as exc:
            return JudgeResult(Verdict.CE, 0, total, exc.diagnostic or "compilation failed")
        except SandboxUnavailable as exc:
            return JudgeResult(Verdict.SE, 0, total, f"sandbox unavailable: {exc}")

        results: list[CaseResult] = []
        for case in cases:
            try:
                res = self.run_case(artifact, case, limits)
            except SandboxUnavailable as exc:
                res = CaseResult(case.index, Verdict.SE, detail=f"sandbox unavailable: {exc}")
            results.append(res)
            if fail_fast and res.verdict != Verdict.AC:
                break
        return summarize(results, total)


def format_case_info(res: CaseResult) -> str:
    if res.verdict == Verdict.WA:
        exp = _excerpt(res.expected_excerpt, INFO_EXCERPT)
        act = _excerpt(res.actual_excerpt, INFO_EXCERPT)
        return f'[Case {res.index}] Expected "{exp}", Find "{act}"'
    return f"[Case {res.index}] {res.verdict.value}: {res.detail}" if res.detail else f"[Case {res.index}] {res.verdict.value}"


def summarize(results: list[CaseResult], total: int) -> JudgeResult:
    """Aggregate per-case results into one verdict record."""
    passed = sum(1 for r in results if r.verdict == Verdict.AC)
    failures = [r for r in results if r.verdict != Verdict.AC]
    if failures:
        status = failures[0].verdict
    elif passed == total:
        status = Verdict.AC
    else:
        # Only reachable when fewer cases ran than exist.
        status = Verdict.SE
    info = "\n".join(format_case_info(r) for r in failures)
    return JudgeResult(
        status=status,
        passed=passed,
        total=total,
        info=info if status != Verdict.AC else "",
        max_time=max((r.time for r in results), default=0.0),
        max_memory=max((r.memory for r in results), default=0),
        cases=tuple(results),
    )


_default: Judge | None = None
_default_lock = threading.Lock()


def default_judge() -> Judge:
    global _default
    with _default_lock:
        if _default is None:
            _default = Judge()
            atexit.register(_default.close)
        return _default


def compile(source: str, workdir) -> Path:  # noqa: A001 - mirrors the judge vocabulary
    return default_judge().compile(source, workdir)


def run_case(artifact: Path, case: SampleCase, limits: ResourceLimits) -> CaseResult:
    return default_judge().run_case(artifact, case, limits)


def judge(source: str, cases, limits: ResourceLimits | None = None, fail_fast: bool = False) -> JudgeResult:
    return default_judge().judge(source, cases, limits, fail_fast)
