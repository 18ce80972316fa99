"""Curated knowledge base, web search, note preprocessing, and the case repository."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .gateway import ChatMessage, ChatRequest, TOOL_TEMPERATURE, extract_json_block
from .model import NOT_FOUND, canonicalize_label
from .retrieval import cosine

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KnowledgeEntry:
    disease: str
    presentations: tuple
    criteria: tuple
    differentials: tuple
    distinguishing_features: tuple

    def to_json_dict(self):
        return {
            "disease": self.disease,
            "presentations": list(self.presentations),
            "criteria": list(self.criteria),
            "differentials": list(self.differentials),
            "distinguishing_features": list(self.distinguishing_features),
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            disease=d["disease"],
            presentations=tuple(d.get("presentations", [])),
            criteria=tuple(d.get("criteria", [])),
            differentials=tuple(d.get("differentials", [])),
            distinguishing_features=tuple(d.get("distinguishing_features", [])),
        )

    def as_context(self) -> str:
        parts = [f"Disease: {self.disease}"]
        if self.presentations:
            parts.append("Typical presentations: " + "; ".join(self.presentations))
        if self.criteria:
            parts.append("Diagnostic criteria: " + "; ".join(self.criteria))
        if self.distinguishing_features:
            parts.append("Distinguishing features: " + "; ".join(self.distinguishing_features))
        if self.differentials:
            parts.append("Differentials to weigh: " + "; ".join(self.differentials))
        return "\n".join(parts)


class KnowledgeBase:
    """Disease entries keyed by canonical label, plus a synonym table."""

    def __init__(self, entries: dict, synonyms: dict):
        self.entries = {canonicalize_label(k): v for k, v in entries.items()}
        self.synonyms = {canonicalize_label(k): canonicalize_label(v) for k, v in synonyms.items()}

    @classmethod
    def load(cls, kb_path, synonyms_path=None):
        with open(kb_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        entries = {}
        for item in raw["entries"]:
            entry = KnowledgeEntry.from_json_dict(item)
            entries[entry.disease] = entry
        synonyms = {}
        if synonyms_path is not None:
            with open(synonyms_path, "r", encoding="utf-8") as fh:
                synonyms = json.load(fh)
        return cls(entries, synonyms)

    def keys(self):
        return sorted(self.entries)


def kb_lookup(kb: KnowledgeBase, query_disease: str, gateway=None, templates=None, log_=None):
    """Resolve a disease to its KB entry.

    Resolution chain: exact canonical key, then the synonym table, then (when
    a gateway is supplied) one LLM normalization call at temperature 0, then
    NOT_FOUND. An exact hit never touches the LLM. The chain step taken is
    recorded in the trace.
    """
    query = canonicalize_label(query_disease)
    step = None
    result = NOT_FOUND
    if query in kb.entries:
        step = "exact"
        result = kb.entries[query]
    elif query in kb.synonyms and kb.synonyms[query] in kb.entries:
        step = "synonym"
        result = kb.entries[kb.synonyms[query]]
    elif gateway is not None and templates is not None:
        step = "llm_normalize"
        prompt = templates.render(
            "kb_normalize",
            {"query": query, "known_diseases": "\n".join(kb.keys())},
        )
        reply = gateway.complete(
            ChatRequest(messages=(ChatMessage("user", prompt),), temperature=TOOL_TEMPERATURE, tag="kb_normalize"),
            log=log_,
        )
        try:
            payload = extract_json_block(reply.text)
            match = payload.get("match")
        except ParseError:
            match = None
            if log_ is not None:
                log_.warn(f"kb normalization reply unparseable for {query!r}")
        if match and str(match).lower() != "none":
            key = canonicalize_label(str(match))
            if key in kb.entries:
                result = kb.entries[key]
            else:
                step = "llm_normalize_miss"
    else:
        step = "miss"
    if log_ is not None:
        log_.tool(
            "kb_lookup",
            {"query": query, "step": step},
            {"found": result is not NOT_FOUND},
        )
    return result


@dataclass(frozen=True)
class WebSummary:
    source: str
    title: str
    url: str
    summarized_knowledge: str

    def to_json_dict(self):
        return {
            "source": self.source,
            "title": self.title,
            "url": self.url,
            "summarized_knowledge": self.summarized_knowledge,
        }


class WebTransport:
    """Fetch interface: (source, query) -> list of {title, url, text} dicts."""

    def fetch(self, source: str, query: str, limit: int) -> list:
        raise NotImplementedError


class FixtureWebTransport(WebTransport):
    """Serves canned documents; raising sources simulate network failure."""

    def __init__(self, documents: dict, failing_sources=()):
        self.documents = documents
        self.failing_sources = set(failing_sources)

    def fetch(self, source, query, limit):
        if source in self.failing_sources:
            raise ConfigError(f"simulated fetch failure for {source}")
        return list(self.documents.get(source, []))[:limit]


class LiveWebTransport(WebTransport):
    """Talks to the public wiki and pubmed APIs. Not exercised in tests."""

    def __init__(self, timeout: float = 20.0):
        import httpx

        self._httpx = httpx
        self.timeout = timeout

    def fetch(self, source, query, limit):
        if source == "wiki":
            return self._wiki(query, limit)
        if source == "pubmed":
            return self._pubmed(query, limit)
        raise ConfigError(f"unknown web source {source!r}")

    def _wiki(self, query, limit):
        reply = self._httpx.get(
            "https://en.wikipedia.org/w/api.php",
            params={
                "action": "query",
                "list": "search",
                "srsearch": query,
                "srlimit": limit,
                "format": "json",
            },
            timeout=self.timeout,
        )
        reply.raise_for_status()
        docs = []
        for hit in reply.json().get("query", {}).get("search", [])[:limit]:
            title = hit.get("title", "")
            page = self._httpx.get(
                "https://en.wikipedia.org/api/rest_v1/page/summary/" + title.replace(" ", "_"),
                timeout=self.timeout,
            )
            text = page.json().get("extract", "") if page.status_code == 200 else hit.get("snippet", "")
            docs.append({"title": title, "url": f"https://en.wikipedia.org/wiki/{title.replace(' ', '_')}", "text": text})
        return docs

    def _pubmed(self, query, limit):
        base = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"
        search = self._httpx.get(
            f"{base}/esearch.fcgi",
            params={"db": "pubmed", "term": query, "retmax": limit, "retmode": "json"},
            timeout=self.timeout,
        )
        search.raise_for_status()
        ids = search.json().get("esearchresult", {}).get("idlist", [])[:limit]
        docs = []
        for pmid in ids:
            fetch = self._httpx.get(
                f"{base}/efetch.fcgi",
                params={"db": "pubmed", "id": pmid, "rettype": "abstract", "retmode": "text"},
                timeout=self.timeout,
            )
            docs.append(
                {
                    "title": f"PMID {pmid}",
                    "url": f"https://pubmed.ncbi.nlm.nih.gov/{pmid}/",
                    "text": fetch.text if fetch.status_code == 200 else "",
                }
            )
        return docs


WEB_SOURCES = ("wiki", "pubmed")
WEB_DOCS_PER_SOURCE = 3
_WEB_DOC_WORD_CAP = 1200


@dataclass
class WebSearchClient:
    transport: WebTransport
    gateway: object
    templates: object
    sources: tuple = WEB_SOURCES
    docs_per_source: int = WEB_DOCS_PER_SOURCE


def web_search(client: WebSearchClient, disease: str, keywords, log_=None) -> list:
    """Query every configured source and summarize each hit at temperature 0.

    A failing source degrades to zero results for that source with a trace
    warning; it never aborts the other sources.
    """
    query = " ".join([disease] + [k for k in keywords if k])
    summaries = []
    for source in client.sources:
        try:
            docs = client.transport.fetch(source, query, client.docs_per_source)
        except Exception as exc:
            if log_ is not None:
                log_.warn(f"web source {source} failed: {exc}")
            log.warning("web source %s failed: %s", source, exc)
            continue
        for doc in docs[: client.docs_per_source]:
            text = " ".join(str(doc.get("text", "")).split()[:_WEB_DOC_WORD_CAP])
            prompt = client.templates.render(
                "web_summarize",
                {"disease": disease, "title": doc.get("title", ""), "document": text},
            )
            reply = client.gateway.complete(
                ChatRequest(
                    messages=(ChatMessage("user", prompt),),
                    temperature=TOOL_TEMPERATURE,
                    tag="web_summarize",
                ),
                log=log_,
            )
            summaries.append(
                WebSummary(
                    source=source,
                    title=doc.get("title", ""),
                    url=doc.get("url", ""),
                    summarized_knowledge=reply.text.strip(),
                )
            )
    if log_ is not None:
        log_.tool(
            "web_search",
            {"disease": disease, "keywords": list(keywords)},
            {"results": [s.title for s in summaries]},
        )
    return summaries


# Sections that describe management rather than findings; dropped before
# embedding so retrieval keys on the diagnostic picture.
DEFAULT_DROP_SECTIONS = (
    "treatment",
    "plan",
    "hospital course",
    "discharge",
    "discharge summary",
    "discharge medications",
    "medications on discharge",
    "follow up",
    "follow-up",
)

_HEADER_LINE = re.compile(r"^\s*([A-Za-z][A-Za-z /-]{1,60}?)\s*:\s*(.*)$")


def preprocess_note(note_text: str, drop_sections=DEFAULT_DROP_SECTIONS, log_=None) -> str:
    """Keep diagnostic sections of a clinical note, drop management ones.

    A line like "Impression:" opens a section; sections whose header matches
    the drop list are removed, everything else (including any headerless
    preamble) is kept verbatim. A note with no headers at all passes through
    whole with a warning. Idempotent on its own output.
    """
    drop = {d.strip().lower() for d in drop_sections}
    lines = note_text.splitlines()
    kept = []
    saw_header = False
    dropping = False
    for line in lines:
        m = _HEADER_LINE.match(line)
        if m:
            saw_header = True
            header = m.group(1).strip().lower()
            dropping = header in drop
        if not dropping:
            kept.append(line)
    if not note_text.strip():
        if log_ is not None:
            log_.warn("empty note passed to preprocessing")
        return note_text
    if not saw_header:
        if log_ is not None:
            log_.warn("note has no recognizable section headers; kept whole")
        return note_text
    return "\n".join(kept).strip("\n")


@dataclass(frozen=True)
class CaseRecord:
    case_key: str
    retained_text: str
    confirmed_diagnosis: str
    summary: str
    embedding: tuple

    def to_json_dict(self):
        return {
            "case_key": self.case_key,
            "retained_text": self.retained_text,
            "confirmed_diagnosis": self.confirmed_diagnosis,
            "summary": self.summary,
            "embedding": list(self.embedding),
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            case_key=d["case_key"],
            retained_text=d["retained_text"],
            confirmed_diagnosis=d["confirmed_diagnosis"],
            summary=d.get("summary", ""),
            embedding=tuple(float(x) for x in d.get("embedding", [])),
        )


CASE_INDEX_FORMAT_VERSION = 1


@dataclass
class CaseIndex:
    records: list
    embedder_name: str
    dimension: int
    drop_sections: tuple = DEFAULT_DROP_SECTIONS

    def save(self, path):
        payload = {
            "format_version": CASE_INDEX_FORMAT_VERSION,
            "embedder": {"name": self.embedder_name, "dimension": self.dimension},
            "drop_sections": list(self.drop_sections),
            "records": [r.to_json_dict() for r in self.records],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False)
            fh.write("\n")

    @classmethod
    def load(cls, path, embedder=None):
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format_version") != CASE_INDEX_FORMAT_VERSION:
            raise ConfigError("unsupported case index format version")
        meta = payload.get("embedder", {})
        index = cls(
            records=[CaseRecord.from_json_dict(r) for r in payload.get("records", [])],
            embedder_name=meta.get("name", ""),
            dimension=int(meta.get("dimension", 0)),
            drop_sections=tuple(payload.get("drop_sections", DEFAULT_DROP_SECTIONS)),
        )
        if embedder is not None and (embedder.name != index.embedder_name or embedder.dimension != index.dimension):
            raise ConfigError(
                "case index was built with embedder %s/%d, got %s/%d"
                % (index.embedder_name, index.dimension, embedder.name, embedder.dimension)
            )
        return index


def build_case_index(
    notes,
    embedder,
    summarize=None,
    exclusion_keys=(),
    drop_sections=DEFAULT_DROP_SECTIONS,
) -> CaseIndex:
    """Index historical cases for similar-case retrieval.

    `notes` is an iterable of (case_key, note_text, confirmed_diagnosis).
    Keys on the exclusion list are rejected outright so evaluation cases can
    never leak into their own retrieval pool. A note that fails to embed is
    skipped with a logged reason rather than aborting the build.
    `summarize` is an optional callable(text) -> str (wired to the case
    summarizer at temperature 0 in production).
    """
    excluded = {str(k) for k in exclusion_keys}
    records = []
    for case_key, note_text, confirmed in notes:
        if str(case_key) in excluded:
            log.info("case %s on exclusion list; skipped", case_key)
            continue
        try:
            retained = preprocess_note(note_text, drop_sections=drop_sections)
            vector = embedder.encode(retained)
            summary = summarize(retained) if summarize is not None else ""
            records.append(
                CaseRecord(
                    case_key=str(case_key),
                    retained_text=retained,
                    confirmed_diagnosis=canonicalize_label(confirmed),
                    summary=summary,
                    embedding=tuple(float(x) for x in vector),
                )
            )
        except Exception as exc:
            log.warning("case %s skipped: %s", case_key, exc)
    return CaseIndex(records=records, embedder_name=embedder.name, dimension=embedder.dimension, drop_sections=tuple(drop_sections))


def case_search(index: CaseIndex, query_note: str, embedder, k: int = 5, log_=None) -> list:
    """Top-k similar cases by cosine over preprocessed, embedded notes.

    Ties break by case_key ascending. Returns (record, score) pairs.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    if embedder.name != index.embedder_name or embedder.dimension != index.dimension:
        raise ConfigError("query embedder does not match the index embedder")
    query = preprocess_note(query_note, drop_sections=index.drop_sections, log_=log_)
    qv = np.asarray(embedder.encode(query), dtype=np.float64)
    scored = []
    for record in index.records:
        score = cosine(qv, np.asarray(record.embedding, dtype=np.float64))
        scored.append((record, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0].case_key))
    top = scored[:k]
    if log_ is not None:
        log_.tool(
            "case_search",
            {"k": k, "query_digest_words": len(query.split())},
            {"hits": [{"case_key": r.case_key, "score": s} for r, s in top]},
        )
    return top
