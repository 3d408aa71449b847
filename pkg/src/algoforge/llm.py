"""Prompt templates and chat-completion access (live HTTP or scripted replay)."""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import httpx

from .domain import data_path
from .errors import IoFailure, LiveCallRefused, MissingBinding, ProviderError, ScriptExhausted, UnknownPlaceholder

log = logging.getLogger(__name__)

# `{{NAME}}` is tried first so the inner `{NAME}` is never matched separately.
_PLACEHOLDER_RE = re.compile(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}|\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _placeholders(text: str) -> set[str]:
    return {a or b for a, b in _PLACEHOLDER_RE.findall(text)}


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: str
    user: str
    placeholders: frozenset[str] = frozenset()

    @classmethod
    def create(cls, name: str, system: str, user: str, placeholders=None) -> "PromptTemplate":
        found = _placeholders(system) | _placeholders(user)
        declared = frozenset(found if placeholders is None else placeholders)
        undeclared = found - declared
        if undeclared:
            raise UnknownPlaceholder(undeclared)
        return cls(name, system, user, declared)

    @classmethod
    def parse(cls, name: str, text: str) -> "PromptTemplate":
        """Parse the ``<system>`` / ``<user>`` section file format."""
        lines = text.replace("\r\n", "\n").split("\n")
        try:
            s = lines.index("<system>")
            u = lines.index("<user>")
        except ValueError:
            raise ValueError(f"template {name!r} needs '<system>' and '<user>' section lines") from None
        if u < s:
            raise ValueError(f"template {name!r}: '<system>' must precede '<user>'")
        system = "\n".join(lines[s + 1:u]).rstrip("\n")
        user = "\n".join(lines[u + 1:]).rstrip("\n")
        return cls.create(name, system, user)


def load_template(name: str, directory=None) -> PromptTemplate:
    path = Path(directory) / f"{name}.txt" if directory else data_path("prompts", f"{name}.txt")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(path, exc) from exc
    return PromptTemplate.parse(name, text)


def render_template(template: PromptTemplate, bindings: Mapping[str, str]) -> tuple[str, str]:
    """Substitute every placeholder in one pass; bound values are never re-scanned."""
    missing = template.placeholders - set(bindings)
    if missing:
        raise MissingBinding(missing)
    extra = set(bindings) - template.placeholders
    if extra:
        raise UnknownPlaceholder(extra)

    def sub(m):
        return str(bindings[m.group(1) or m.group(2)])

    return _PLACEHOLDER_RE.sub(sub, template.system), _PLACEHOLDER_RE.sub(sub, template.user)


@dataclass(frozen=True)
class ChatExchange:
    agent: str
    iteration: int
    occurrence: int
    system: str
    user: str
    response: str
    latency: float
    provider: str

    @property
    def request(self) -> tuple[str, str]:
        return self.system, self.user

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "iteration": self.iteration,
            "occurrence": self.occurrence,
            "system": self.system,
            "user": self.user,
            "response": self.response,
            "latency": self.latency,
            "provider": self.provider,
        }


ReplayKey = tuple[str, int, int]
_REPLAY_FILE_RE = re.compile(r"(Agent\d+)-(\d+)(?:-(\d+))?(?:\.txt)?")


def parse_replay_key(text: str) -> ReplayKey:
    m = _REPLAY_FILE_RE.fullmatch(text)
    if not m:
        raise ValueError(f"bad replay key {text!r}; expected '<agent>-<iteration>[-<occurrence>]'")
    return m.group(1), int(m.group(2)), int(m.group(3) or 1)


def format_replay_key(key: ReplayKey) -> str:
    agent, iteration, occurrence = key
    return f"{agent}-{iteration}" + (f"-{occurrence}" if occurrence != 1 else "")


@dataclass
class ReplayScript:
    """Prerecorded responses keyed by (agent, iteration, occurrence)."""

    entries: dict[ReplayKey, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def add(self, agent: str, iteration: int, response: str, occurrence: int | None = None) -> ReplayKey:
        if occurrence is None:
            occurrence = 1
            while (agent, iteration, occurrence) in self.entries:
                occurrence += 1
        key = (agent, iteration, occurrence)
        if key in self.entries:
            raise ValueError(f"duplicate replay key {format_replay_key(key)}")
        self.entries[key] = response
        return key

    def response(self, agent: str, iteration: int, occurrence: int) -> str:
        try:
            return self.entries[(agent, iteration, occurrence)]
        except KeyError:
            raise ScriptExhausted(agent, iteration, occurrence) from None

    @classmethod
    def load(cls, path) -> "ReplayScript":
        """Load from a directory of ``<agent>-<iter>[-<occ>].txt`` files or a JSON manifest.

        A directory containing ``replay.json`` is read through that manifest.
        Manifest values are paths relative to the manifest, or lists of paths
        for consecutive occurrences.
        """
        path = Path(path)
        if path.is_dir() and (path / "replay.json").is_file():
            path = path / "replay.json"
        script = cls()
        if path.is_dir():
            for f in sorted(path.iterdir()):
                if f.is_file() and _REPLAY_FILE_RE.fullmatch(f.name) and f.suffix == ".txt":
                    agent, iteration, occurrence = parse_replay_key(f.stem)
                    script.add(agent, iteration, f.read_text(encoding="utf-8"), occurrence)
            return script
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoFailure(path, exc) from exc
        if not isinstance(manifest, dict):
            raise ValueError(f"{path}: replay manifest must be a JSON object")
        base = path.parent
        for key_text, target in manifest.items():
            agent, iteration, occurrence = parse_replay_key(key_text)
            targets = target if isinstance(target, list) else [target]
            for n, rel in enumerate(targets):
                f = base / rel
                try:
                    text = f.read_text(encoding="utf-8")
                except OSError as exc:
                    raise IoFailure(f, exc) from exc
                script.add(agent, iteration, text, occurrence + n)
        return script

    def dump(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = []
        for key, text in self.entries.items():
            p = directory / f"{format_replay_key(key)}.txt"
            p.write_text(text, encoding="utf-8")
            out.append(p)
        return out


class ReplayBackend:
    """Serves scripted responses; per-problem scripts are selected by problem id."""

    name = "replay"
    live = False

    def __init__(self, script: ReplayScript | Mapping[str, ReplayScript]):
        self._single = script if isinstance(script, ReplayScript) else None
        self._scripts = {} if self._single is not None else dict(script)

    def script_for(self, problem_id: str | None) -> ReplayScript:
        if self._single is not None:
            return self._single
        try:
            return self._scripts[problem_id]
        except KeyError:
            return ReplayScript()

    def complete(self, system: str, user: str, *, agent: str, iteration: int, occurrence: int,
                 problem_id: str | None = None) -> str:
        return self.script_for(problem_id).response(agent, iteration, occurrence)


class OpenAIBackend:
    """OpenAI-compatible ``/chat/completions`` client with bounded retries."""

    name = "openai"
    live = True
    TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}

    def __init__(self, base_url: str, model: str, api_key: str | None = None, temperature: float = 0.0,
                 timeout: float = 300.0, retries: int = 3, backoff=(1.0, 2.0, 4.0), max_concurrency: int = 8,
                 transport: httpx.BaseTransport | None = None, sleep: Callable[[float], None] = time.sleep):
        if not base_url or not model:
            raise ProviderError("live provider needs both an API base URL and a model name")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.temperature = temperature
        self.retries = retries
        self.backoff = tuple(backoff)
        self.sleep = sleep
        self._slots = threading.BoundedSemaphore(max_concurrency)
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None, **kwargs) -> "OpenAIBackend":
        env = os.environ if env is None else env
        base = env.get("ALGOFORGE_API_BASE")
        model = env.get("ALGOFORGE_MODEL")
        if not base or not model:
            raise ProviderError("set ALGOFORGE_API_BASE and ALGOFORGE_MODEL (or pass --replay)")
        return cls(base, model, env.get("ALGOFORGE_API_KEY"), **kwargs)

    def close(self):
        self._client.close()

    def _delay(self, attempt: int) -> float:
        return self.backoff[min(attempt, len(self.backoff) - 1)] if self.backoff else 0.0

    def complete(self, system: str, user: str, *, agent: str, iteration: int, occurrence: int,
                 problem_id: str | None = None) -> str:
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        }
        last = None
        with self._slots:
            for attempt in range(self.retries + 1):
                if attempt:
                    self.sleep(self._delay(attempt - 1))
                try:
                    resp = self._client.post(self.url, json=payload)
                except httpx.TransportError as exc:
                    last = f"transport error: {exc}"
                    log.warning("%s call attempt %d failed: %s", agent, attempt + 1, last)
                    continue
                if resp.status_code in self.TRANSIENT_STATUS:
                    last = f"HTTP {resp.status_code}"
                    log.warning("%s call attempt %d failed: %s", agent, attempt + 1, last)
                    continue
                if resp.status_code >= 400:
                    raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
                try:
                    content = resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise ProviderError(f"malformed completion response: {exc}") from None
                if not isinstance(content, str):
                    raise ProviderError("completion content is not text")
                return content
        raise ProviderError(f"giving up after {self.retries + 1} attempts ({last})")


class Gateway:
    """Shared entry point; each solve opens its own :class:`Session`."""

    def __init__(self, backend, offline: bool = False):
        self.backend = backend
        self.offline = offline

    @property
    def provider(self) -> str:
        return getattr(self.backend, "name", type(self.backend).__name__)

    def session(self, problem_id: str | None = None) -> "Session":
        return Session(self, problem_id)


class Session:
    """Per-solve call context: counts occurrences and records every exchange."""

    def __init__(self, gateway: Gateway, problem_id: str | None = None):
        self.gateway = gateway
        self.problem_id = problem_id
        self.exchanges: list[ChatExchange] = []
        self._counts: dict[tuple[str, int], int] = {}

    def complete(self, request: tuple[str, str], agent: str, iteration: int) -> str:
        backend = self.gateway.backend
        if self.gateway.offline and getattr(backend, "live", True):
            raise LiveCallRefused(f"live call for {agent} refused in offline mode")
        occurrence = self._counts.get((agent, iteration), 0) + 1
        self._counts[(agent, iteration)] = occurrence
        system, user = request
        start = time.monotonic()
        response = backend.complete(system, user, agent=agent, iteration=iteration, occurrence=occurrence,
                                    problem_id=self.problem_id)
        latency = 0.0 if not getattr(backend, "live", True) else time.monotonic() - start
        self.exchanges.append(
            ChatExchange(agent, iteration, occurrence, system, user, response, latency, self.gateway.provider)
        )
        return response
