"""Knowledge-base ingestion, embedding, top-k retrieval and Agent2 summarization."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import httpx
import numpy as np

from .errors import EmbeddingBackendMismatch, EmptyCorpus, IoFailure, MalformedProblem, ProviderError

log = logging.getLogger(__name__)

DEFAULT_K = 5
MAX_CHUNK_CHARS = 2000
LEXICAL_DIM = 256
INDEX_FORMAT = "algoforge-index"
INDEX_VERSION = 1
# Bounds on how much of each similar problem reaches the prompt.
BANK_EXCERPT_CHARS = 3000

_HEADING_RE = re.compile(r"^(#{1,6})\s+(.*?)\s*#*\s*$")
_FENCE_RE = re.compile(r"^\s*(`{3,}|~{3,})")
_TOKEN_RE = re.compile(r"\w+")


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    heading_path: tuple[str, ...]
    body: str
    char_span: tuple[int, int]

    def __post_init__(self):
        if not self.body.strip():
            raise ValueError("chunk body must be nonempty")
        start, end = self.char_span
        if not 0 <= start < end:
            raise ValueError(f"bad char span {self.char_span}")

    @property
    def sort_key(self):
        return (self.doc_id, self.char_span)

    @property
    def embed_text(self) -> str:
        return "\n".join([*self.heading_path[:-1], self.body])

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "heading_path": list(self.heading_path), "body": self.body,
                "char_span": list(self.char_span)}

    @classmethod
    def from_dict(cls, d) -> "Chunk":
        return cls(d["doc_id"], tuple(d["heading_path"]), d["body"], tuple(d["char_span"]))


@dataclass(frozen=True)
class ProblemBankEntry:
    problem_id: str
    statement: str
    accepted_solution: str

    def __post_init__(self):
        if not self.accepted_solution.strip():
            raise ValueError(f"bank entry {self.problem_id!r} has an empty solution")

    @property
    def sort_key(self):
        return (self.problem_id, (0, 0))

    @property
    def embed_text(self) -> str:
        return self.statement

    def to_dict(self) -> dict:
        return {"id": self.problem_id, "statement": self.statement, "solution": self.accepted_solution}

    @classmethod
    def from_dict(cls, d) -> "ProblemBankEntry":
        return cls(d["id"], d["statement"], d["solution"])


Item = Union[Chunk, ProblemBankEntry]


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    backend_id: str

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding values must be finite")


@dataclass(frozen=True)
class RetrievalHit:
    item: Item
    score: float

    @property
    def chunk(self) -> Item:
        return self.item


# --- chunking ------------------------------------------------------------


def _trimmed_span(text: str, start: int, end: int) -> tuple[int, int]:
    while start < end and text[start] in " \t\r\n":
        start += 1
    while end > start and text[end - 1] in " \t\r\n":
        end -= 1
    return start, end


def _split_long(text: str, start: int, end: int, limit: int) -> list[tuple[int, int]]:
    if end - start <= limit:
        return [(start, end)]
    # Paragraph boundaries inside the span; a single oversized paragraph stays whole.
    cuts = [m.end() for m in re.finditer(r"\n[ \t]*\n", text[start:end])]
    pieces: list[tuple[int, int]] = []
    piece_start = start
    last_cut = None
    for cut in cuts:
        pos = start + cut
        if pos - piece_start > limit and last_cut is not None:
            pieces.append((piece_start, last_cut))
            piece_start = last_cut
        last_cut = pos
    if end - piece_start > limit and last_cut is not None and last_cut > piece_start:
        pieces.append((piece_start, last_cut))
        piece_start = last_cut
    pieces.append((piece_start, end))
    return pieces


def chunk_markdown(doc_id: str, text: str, max_chars: int = MAX_CHUNK_CHARS) -> list[Chunk]:
    """Split at markdown headings (outside code fences), then at paragraphs if too long.

    Each chunk body is exactly ``text[start:end]`` for its ``char_span``.
    """
    sections: list[tuple[tuple[str, ...], int]] = []
    stack: list[tuple[int, str]] = []
    sections.append(((), 0))
    offset = 0
    fence = None
    for line in text.splitlines(keepends=True):
        stripped = line.rstrip("\r\n")
        fm = _FENCE_RE.match(stripped)
        if fence is not None:
            if fm and fm.group(1)[0] == fence[0] and len(fm.group(1)) >= len(fence):
                fence = None
        elif fm:
            fence = fm.group(1)
        else:
            hm = _HEADING_RE.match(stripped)
            if hm:
                level = len(hm.group(1))
                while stack and stack[-1][0] >= level:
                    stack.pop()
                stack.append((level, hm.group(2)))
                sections.append((tuple(h for _, h in stack), offset))
        offset += len(line)

    chunks = []
    for n, (path, start) in enumerate(sections):
        end = sections[n + 1][1] if n + 1 < len(sections) else len(text)
        for a, b in _split_long(text, start, end, max_chars):
            a, b = _trimmed_span(text, a, b)
            if a < b:
                chunks.append(Chunk(doc_id, path, text[a:b], (a, b)))
    return chunks


# --- embedding backends ---------------------------------------------------


class LexicalEmbedder:
    """Hashed term-frequency projection of lowercased word tokens, L2-normalized."""

    def __init__(self, dim: int = LEXICAL_DIM):
        self.dim = dim
        self.backend_id = f"lexical-tf-blake2b-{dim}"

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed_array(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in _TOKEN_RE.findall(text.lower()):
            vec[self._bucket(tok)] += 1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.embed_array(t) for t in texts])


class RemoteEmbedder:
    """OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None, timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None):
        self.url = base_url.rstrip("/") + "/embeddings"
        self.model = model
        self.backend_id = f"remote-{model}"
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.dim: int | None = None

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None) -> "RemoteEmbedder":
        env = os.environ if env is None else env
        base = env.get("ALGOFORGE_EMBED_BASE") or env.get("ALGOFORGE_API_BASE")
        model = env.get("ALGOFORGE_EMBED_MODEL")
        if not base or not model:
            raise ProviderError("set ALGOFORGE_EMBED_MODEL (and ALGOFORGE_EMBED_BASE or ALGOFORGE_API_BASE)")
        return cls(base, model, env.get("ALGOFORGE_API_KEY"))

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim or 0))
        try:
            resp = self._client.post(self.url, json={"model": self.model, "input": list(texts)})
            resp.raise_for_status()
            data = resp.json()["data"]
            rows = np.array([d["embedding"] for d in sorted(data, key=lambda d: d["index"])], dtype=np.float64)
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            raise ProviderError(f"embedding request failed: {exc}") from exc
        if not np.all(np.isfinite(rows)):
            raise ProviderError("embedding backend returned non-finite values")
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        rows = np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0)
        self.dim = rows.shape[1]
        return rows

    def embed_array(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


def embed(text: str, embedder=None) -> EmbeddingVector:
    embedder = embedder or LexicalEmbedder()
    return EmbeddingVector(tuple(float(v) for v in embedder.embed_array(text)), embedder.backend_id)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# --- index ----------------------------------------------------------------


@dataclass
class Index:
    backend_id: str
    mode: str
    items: list[Item]
    vectors: np.ndarray
    content_hash: str

    def __len__(self):
        return len(self.items)

    def to_dict(self) -> dict:
        return {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "backend_id": self.backend_id,
            "mode": self.mode,
            "content_hash": self.content_hash,
            "items": [it.to_dict() for it in self.items],
            "vectors": self.vectors.tolist(),
        }

    def save(self, path) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.to_dict(), ensure_ascii=False) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoFailure(path, exc) from exc

    @classmethod
    def load(cls, path, embedder=None) -> "Index":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoFailure(path, exc) from exc
        if doc.get("format") != INDEX_FORMAT or doc.get("version") != INDEX_VERSION:
            raise ValueError(f"{path}: not a version-{INDEX_VERSION} index file")
        if embedder is not None and doc["backend_id"] != embedder.backend_id:
            raise EmbeddingBackendMismatch(
                f"index built with {doc['backend_id']!r}, current backend is {embedder.backend_id!r}")
        item_cls = Chunk if doc["mode"] == "wiki" else ProblemBankEntry
        items = [item_cls.from_dict(d) for d in doc["items"]]
        vectors = np.array(doc["vectors"], dtype=np.float64).reshape(len(items), -1)
        return cls(doc["backend_id"], doc["mode"], items, vectors, doc["content_hash"])


def _hash_sources(sources: Iterable[tuple[str, str]]) -> str:
    h = hashlib.sha256()
    for name, text in sorted(sources):
        h.update(name.encode("utf-8") + b"\0" + text.encode("utf-8") + b"\0")
    return h.hexdigest()


def _read_wiki(directory: Path) -> list[tuple[str, str]]:
    return [(p.relative_to(directory).as_posix(), p.read_text(encoding="utf-8"))
            for p in sorted(directory.rglob("*.md")) if p.is_file()]


def _read_bank(directory: Path) -> list[ProblemBankEntry]:
    entries = []
    for p in sorted(directory.glob("*.json")):
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
            entries.append(ProblemBankEntry(str(doc["id"]), doc["statement"], doc["solution"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise MalformedProblem(f"{p.name}: bank entries need id, statement and solution ({exc})") from None
    return entries


def build_index(items: Sequence[Item], mode: str, embedder=None, content_hash: str = "") -> Index:
    embedder = embedder or LexicalEmbedder()
    if not items:
        raise EmptyCorpus(f"no {mode} documents to index")
    # Canonical order makes results independent of ingest order.
    items = sorted(items, key=lambda it: it.sort_key)
    vectors = embedder.embed_many([it.embed_text for it in items])
    return Index(embedder.backend_id, mode, list(items), vectors, content_hash)


def ingest_kb(directory, mode: str = "wiki", embedder=None, cache=None) -> Index:
    """Chunk, embed and index a directory of markdown (``wiki``) or bank JSON (``problem_bank``).

    With ``cache`` (an index file path), an unchanged corpus is loaded from
    the cache instead of re-embedded.
    """
    directory = Path(directory)
    if mode not in ("wiki", "problem_bank"):
        raise ValueError(f"unknown kb mode {mode!r}")
    embedder = embedder or LexicalEmbedder()
    if not directory.is_dir():
        raise EmptyCorpus(f"{directory} is not a directory")
    if mode == "wiki":
        sources = _read_wiki(directory)
        digest = _hash_sources(sources)
        items: list[Item] = [c for doc_id, text in sources for c in chunk_markdown(doc_id, text)]
    else:
        bank = _read_bank(directory)
        digest = _hash_sources((e.problem_id, json.dumps(e.to_dict(), sort_keys=True)) for e in bank)
        ids = [e.problem_id for e in bank]
        if len(set(ids)) != len(ids):
            raise MalformedProblem("duplicate problem id in bank", "id")
        items = list(bank)
    if cache is not None and Path(cache).is_file():
        cached = Index.load(cache, embedder)
        if cached.content_hash == digest and cached.mode == mode:
            return cached
    index = build_index(items, mode, embedder, digest)
    if cache is not None:
        index.save(cache)
    return index


def query_index(index: Index, query: str, k: int = DEFAULT_K, embedder=None,
                exclude_ids: Iterable[str] = ()) -> list[RetrievalHit]:
    if k < 1:
        raise ValueError("k must be >= 1")
    embedder = embedder or LexicalEmbedder()
    if embedder.backend_id != index.backend_id:
        raise EmbeddingBackendMismatch(f"index uses {index.backend_id!r}, query uses {embedder.backend_id!r}")
    excluded = set(exclude_ids)
    q = embedder.embed_array(query)
    scores = np.clip(index.vectors @ q, -1.0, 1.0) if len(index) else np.zeros(0)
    order = []
    for i, item in enumerate(index.items):
        ident = item.doc_id if isinstance(item, Chunk) else item.problem_id
        if isinstance(item, ProblemBankEntry) and ident in excluded:
            continue
        order.append((-float(scores[i]), item.sort_key, i))
    order.sort()
    return [RetrievalHit(index.items[i], -neg) for neg, _, i in order[:k]]


def retrieve_similar_problems(bank: Index, problem, k: int = DEFAULT_K, embedder=None) -> list[ProblemBankEntry]:
    hits = query_index(bank, problem.statement, k, embedder, exclude_ids=[problem.id])
    return [h.item for h in hits]


# --- prompt context -------------------------------------------------------


def _clip(text: str, limit: int) -> str:
    return text if len(text) <= limit else text[:limit] + "\n..."


def render_context(hits: Sequence[RetrievalHit], similar: Sequence[ProblemBankEntry] = ()) -> str:
    """Concatenate hits with source markers, then any similar solved problems."""
    parts = []
    for n, hit in enumerate(hits, 1):
        c = hit.item
        where = c.doc_id + (" > " + " > ".join(c.heading_path) if c.heading_path else "")
        parts.append(f"[Source {n}: {where}]\n{c.body}")
    for n, entry in enumerate(similar, 1):
        parts.append(
            f"[Similar problem {n}: {entry.problem_id}]\nStatement:\n{_clip(entry.statement, BANK_EXCERPT_CHARS)}\n"
            f"Accepted solution:\n```cpp\n{_clip(entry.accepted_solution, BANK_EXCERPT_CHARS)}\n```"
        )
    return "\n\n".join(parts)


def summarize_knowledge(problem, hits: Sequence[RetrievalHit], session, template=None,
                        similar: Sequence[ProblemBankEntry] = ()) -> str:
    """One Agent2 call; the response is returned verbatim."""
    from .llm import load_template, render_template

    template = template or load_template("agent2")
    request = render_template(template, {"statement": problem.statement,
                                         "context_text": render_context(hits, similar)})
    return session.complete(request, "Agent2", 0)
