"""Two-stage corpus retrieval: lexical BM25 candidates, dense rerank on top.

Documents are whitespace-tokenized into overlapping word windows. Chunk text
is the space-joined word sequence, so the reconstruction invariant
(concatenating each chunk's novel suffix reproduces the document) holds at
word level. Okapi BM25 with k1=1.5, b=0.75 selects candidates; a pluggable
embedder reranks them by cosine similarity.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError

DEFAULT_WINDOW = 800
DEFAULT_STRIDE = 50
BM25_K1 = 1.5
BM25_B = 0.75

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list:
    """Lowercase split on non-alphanumerics. No stemming, no stopword removal."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    source_id: str
    start: int
    end: int
    text: str

    def to_json_dict(self):
        return {
            "chunk_id": self.chunk_id,
            "source_id": self.source_id,
            "start": self.start,
            "end": self.end,
            "text": self.text,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            chunk_id=d["chunk_id"],
            source_id=d["source_id"],
            start=int(d["start"]),
            end=int(d["end"]),
            text=d["text"],
        )


def chunk_document(text: str, source_id: str, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE) -> list:
    """Split a document into overlapping word windows.

    Starts sit at 0, stride, 2*stride, ...; generation stops with the first
    window that reaches the document's end, so every word is covered exactly
    once past the previous chunk and consecutive starts always differ by the
    stride. A document no longer than the window yields exactly one chunk.
    Empty input yields no chunks.
    """
    if window < 1:
        raise ValidationError("window must be >= 1")
    if stride < 1 or stride > window:
        raise ValidationError("stride must satisfy 1 <= stride <= window")
    words = text.split()
    if not words:
        return []
    chunks = []
    start = 0
    while True:
        end = min(start + window, len(words))
        chunks.append(
            Chunk(
                chunk_id=f"{source_id}:{start:06d}",
                source_id=source_id,
                start=start,
                end=end,
                text=" ".join(words[start:end]),
            )
        )
        if end >= len(words):
            break
        start += stride
    return chunks


@dataclass(frozen=True)
class ScoredChunk:
    chunk: Chunk
    score: float


class Bm25Index:
    """Okapi BM25 over a fixed chunk list.

    IDF(t) = ln(1 + (N - n_t + 0.5) / (n_t + 0.5)); query terms contribute
    per occurrence, so duplicated terms count twice. Ties break by chunk_id
    ascending and zero-score chunks are never returned.
    """

    def __init__(self, chunks, k1: float = BM25_K1, b: float = BM25_B):
        self.chunks = list(chunks)
        self.k1 = k1
        self.b = b
        self._postings = defaultdict(dict)
        self._lengths = []
        for idx, chunk in enumerate(self.chunks):
            tokens = tokenize(chunk.text)
            self._lengths.append(len(tokens))
            for term, tf in Counter(tokens).items():
                self._postings[term][idx] = tf
        total = sum(self._lengths)
        self._avg_len = total / len(self._lengths) if self._lengths else 0.0

    def idf(self, term: str) -> float:
        n = len(self._postings.get(term, ()))
        big_n = len(self.chunks)
        return math.log(1.0 + (big_n - n + 0.5) / (n + 0.5))

    def score(self, query_terms, idx: int) -> float:
        length = self._lengths[idx]
        total = 0.0
        for term in query_terms:
            tf = self._postings.get(term, {}).get(idx, 0)
            if tf == 0:
                continue
            idf = self.idf(term)
            denom = tf + self.k1 * (1.0 - self.b + self.b * length / self._avg_len)
            total += idf * tf * (self.k1 + 1.0) / denom
        return total

    def search(self, query: str, k: int) -> list:
        """Top-k chunks by score desc, chunk_id asc on ties, positives only."""
        if k < 1:
            raise ValidationError("k must be >= 1")
        terms = tokenize(query)
        if not terms or not self.chunks:
            return []
        candidates = set()
        for term in terms:
            candidates.update(self._postings.get(term, ()))
        scored = []
        for idx in candidates:
            s = self.score(terms, idx)
            if s > 0.0:
                scored.append(ScoredChunk(self.chunks[idx], s))
        scored.sort(key=lambda sc: (-sc.score, sc.chunk.chunk_id))
        return scored[:k]


class Embedder:
    """Dense text encoder interface: a name, a dimension, and encode()."""

    name = "base"
    dimension = 0

    def encode(self, text: str) -> np.ndarray:
        raise NotImplementedError


class HashingEmbedder(Embedder):
    """Deterministic signed feature-hashing encoder.

    A test double with real geometry: shared vocabulary moves vectors
    together, so on-topic passages outscore filler. Same text always maps to
    the same vector, independent of process or platform.
    """

    def __init__(self, dimension: int = 256):
        self.dimension = dimension
        self.name = f"hashing-{dimension}"

    def encode(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for term, count in Counter(tokenize(text)).items():
            h = hashlib.sha256(term.encode("utf-8")).digest()
            slot = int.from_bytes(h[:4], "big") % self.dimension
            sign = 1.0 if h[4] % 2 == 0 else -1.0
            vec[slot] += sign * count
        return vec


class HttpEmbedder(Embedder):
    """Client for a minimal JSON embedding endpoint: {texts} -> {vectors}."""

    def __init__(self, endpoint: str, name: str, dimension: int, timeout: float = 30.0):
        import httpx

        self._httpx = httpx
        self.endpoint = endpoint
        self.name = name
        self.dimension = dimension
        self.timeout = timeout

    def encode(self, text: str) -> np.ndarray:
        reply = self._httpx.post(self.endpoint, json={"texts": [text]}, timeout=self.timeout)
        reply.raise_for_status()
        vec = np.asarray(reply.json()["vectors"][0], dtype=np.float64)
        if vec.shape != (self.dimension,):
            raise ConfigError(f"embedding endpoint returned shape {vec.shape}, expected ({self.dimension},)")
        return vec


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; zero-norm input yields 0.0 rather than NaN."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def rerank(query: str, scored_chunks, embedder: Embedder, k: int) -> list:
    """Order candidates by embedding cosine desc, chunk_id asc on ties."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    qv = embedder.encode(query)
    rescored = [ScoredChunk(sc.chunk, cosine(qv, embedder.encode(sc.chunk.text))) for sc in scored_chunks]
    rescored.sort(key=lambda sc: (-sc.score, sc.chunk.chunk_id))
    return rescored[:k]


@dataclass(frozen=True)
class EvidencePassage:
    chunk_id: str
    source_title: str
    text: str
    bm25_score: float
    rerank_score: float

    def to_json_dict(self):
        return {
            "chunk_id": self.chunk_id,
            "source_title": self.source_title,
            "text": self.text,
            "bm25_score": self.bm25_score,
            "rerank_score": self.rerank_score,
        }


INDEX_FORMAT_VERSION = 1


class CorpusIndex:
    """Chunked corpus plus its BM25 postings and source-title manifest.

    Persisted as one versioned JSON file holding parameters and chunks;
    postings are rebuilt deterministically at load.
    """

    def __init__(self, chunks, titles: dict, window: int, stride: int, k1: float = BM25_K1, b: float = BM25_B):
        self.chunks = list(chunks)
        self.titles = dict(titles)
        self.window = window
        self.stride = stride
        self.bm25 = Bm25Index(self.chunks, k1=k1, b=b)

    @classmethod
    def build(cls, corpus_dir, manifest_path, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE):
        corpus_dir = Path(corpus_dir)
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        chunks = []
        titles = {}
        for filename in sorted(manifest):
            source_id = Path(filename).stem
            titles[source_id] = manifest[filename]
            text = (corpus_dir / filename).read_text(encoding="utf-8")
            chunks.extend(chunk_document(text, source_id, window=window, stride=stride))
        return cls(chunks, titles, window, stride)

    def title_for(self, chunk: Chunk) -> str:
        return self.titles.get(chunk.source_id, chunk.source_id)

    def save(self, path):
        payload = {
            "format_version": INDEX_FORMAT_VERSION,
            "window": self.window,
            "stride": self.stride,
            "k1": self.bm25.k1,
            "b": self.bm25.b,
            "titles": self.titles,
            "chunks": [c.to_json_dict() for c in self.chunks],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        version = payload.get("format_version")
        if version != INDEX_FORMAT_VERSION:
            raise ConfigError(f"corpus index format {version!r} not supported (expected {INDEX_FORMAT_VERSION})")
        chunks = [Chunk.from_json_dict(c) for c in payload["chunks"]]
        return cls(
            chunks,
            payload.get("titles", {}),
            window=int(payload["window"]),
            stride=int(payload["stride"]),
            k1=float(payload.get("k1", BM25_K1)),
            b=float(payload.get("b", BM25_B)),
        )


def retrieve_evidence(
    index: CorpusIndex,
    query: str,
    embedder: Embedder,
    bm25_k: int = 20,
    rerank_k: int = 5,
    log=None,
) -> list:
    """BM25 top-bm25_k, then dense rerank to rerank_k EvidencePassages.

    A query with no positive-score lexical match returns an empty list and
    skips the rerank entirely.
    """
    lexical = index.bm25.search(query, bm25_k)
    if log is not None:
        log.tool(
            "retrieve_evidence",
            {"query": query, "bm25_k": bm25_k, "rerank_k": rerank_k},
            {"bm25_hits": [sc.chunk.chunk_id for sc in lexical]},
        )
    if not lexical:
        return []
    bm25_by_id = {sc.chunk.chunk_id: sc.score for sc in lexical}
    reranked = rerank(query, lexical, embedder, rerank_k)
    return [
        EvidencePassage(
            chunk_id=sc.chunk.chunk_id,
            source_title=index.title_for(sc.chunk),
            text=sc.chunk.text,
            bm25_score=bm25_by_id[sc.chunk.chunk_id],
            rerank_score=sc.score,
        )
        for sc in reranked
    ]
