"""LLM access layer: chat types, HTTP and scripted backends, prompt templates.

The temperature contract is enforced here so it is auditable in one place:
agent exchanges run at the configured agent temperature (default 0.1) and
every deterministic tool call (tabular processor, knowledge normalizer, web
and case summarizers, claim rewriting, reference judging, image analysis)
runs at 0.0.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from .errors import ConfigError, ParseError, ProtocolError, TemplateError, TransportError

TOOL_TEMPERATURE = 0.0
DEFAULT_AGENT_TEMPERATURE = 0.1


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def to_json_dict(self):
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    """One chat completion request.

    `tag` names the call site (predict, judge, self_verify#<label>, ...) and
    participates in scripted matching and trace records. `images` carries raw
    bytes for vision-capable call sites.
    """

    messages: tuple
    temperature: float
    max_tokens: int = 1024
    tag: str = ""
    images: tuple = ()

    def canonical_text(self) -> str:
        lines = [f"tag: {self.tag}", f"temperature: {self.temperature}"]
        for m in self.messages:
            lines.append(f"{m.role}: {m.content}")
        return "\n".join(lines)

    def prompt_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class TranscriptEntry:
    """A matcher plus its canned response.

    kind: "exact_hash" compares the sha256 of the request's canonical text;
    "contains" is a substring test on that text; "regex" is re.search over it.
    """

    kind: str
    value: str
    response: str

    def matches(self, request: ChatRequest) -> bool:
        if self.kind == "exact_hash":
            return request.prompt_hash() == self.value
        text = request.canonical_text()
        if self.kind == "contains":
            return self.value in text
        if self.kind == "regex":
            return re.search(self.value, text) is not None
        raise ConfigError(f"unknown matcher kind {self.kind!r}")


@dataclass
class Transcript:
    entries: list
    on_miss: str = "error"

    def __post_init__(self):
        if self.on_miss not in ("error", "fallthrough"):
            raise ConfigError(f"on_miss must be 'error' or 'fallthrough', got {self.on_miss!r}")

    def to_json_dict(self):
        return {
            "format_version": 1,
            "on_miss": self.on_miss,
            "entries": [
                {"match": {"kind": e.kind, "value": e.value}, "response": e.response}
                for e in self.entries
            ],
        }

    @classmethod
    def from_json_dict(cls, d):
        entries = [
            TranscriptEntry(
                kind=e["match"]["kind"],
                value=e["match"]["value"],
                response=e["response"],
            )
            for e in d.get("entries", [])
        ]
        return cls(entries=entries, on_miss=d.get("on_miss", "error"))

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, ensure_ascii=False)
            fh.write("\n")


class ScriptedBackend:
    """Replays canned responses instead of calling a model.

    Matching is stateless first-match over the ordered entries, so identical
    requests always get identical responses and one transcript serves
    repeated runs. A lock serializes matching; concurrent stages therefore
    see a well-defined order. With this backend the pipeline is a pure
    function of (case, transcript, configuration).
    """

    def __init__(self, transcript: Transcript, fallback=None):
        self.transcript = transcript
        self.fallback = fallback
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            for entry in self.transcript.entries:
                if entry.matches(request):
                    return ChatResponse(text=entry.response)
        if self.transcript.on_miss == "fallthrough" and self.fallback is not None:
            return self.fallback.complete(request)
        raise ProtocolError(
            "scripted backend has no entry matching request tag=%r (canonical text hash %s)"
            % (request.tag, request.prompt_hash()[:12])
        )


class HttpChatBackend:
    """Client for an OpenAI-compatible /chat/completions endpoint."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def _payload(self, request: ChatRequest) -> dict:
        messages = []
        for m in request.messages:
            messages.append({"role": m.role, "content": m.content})
        if request.images:
            # Attach images to the final user message as data-URL parts.
            parts = [{"type": "text", "text": messages[-1]["content"]}]
            for blob in request.images:
                b64 = base64.b64encode(blob).decode("ascii")
                parts.append(
                    {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}
                )
            messages[-1] = {"role": messages[-1]["role"], "content": parts}
        return {
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def complete(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            reply = httpx.post(
                f"{self.endpoint}/chat/completions",
                json=self._payload(request),
                headers=headers,
                timeout=self.timeout,
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"chat endpoint unreachable: {exc}") from exc
        if reply.status_code >= 500:
            raise TransportError(f"chat endpoint returned {reply.status_code}")
        if reply.status_code != 200:
            raise ProtocolError(f"chat endpoint returned {reply.status_code}: {reply.text[:200]}")
        try:
            body = reply.json()
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage", {})
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed chat completion payload: {exc}") from exc
        if text is None:
            raise ProtocolError("chat completion had null content")
        return ChatResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )


class Gateway:
    """Routes requests to a backend with bounded retry and an in-flight cap.

    Retries (3 attempts, exponential backoff) apply to transport errors only;
    protocol errors are surfaced immediately. Every exchange is appended to
    the supplied StageLog so traces carry full prompts and responses.
    """

    def __init__(self, backend, max_in_flight: int = 4, retries: int = 3, backoff_base: float = 0.5):
        self.backend = backend
        self.retries = retries
        self.backoff_base = backoff_base
        self._slots = threading.Semaphore(max_in_flight)

    def complete(self, request: ChatRequest, log=None) -> ChatResponse:
        if not request.messages:
            raise ProtocolError("request must carry at least one message")
        last_exc = None
        for attempt in range(self.retries):
            with self._slots:
                try:
                    response = self.backend.complete(request)
                    break
                except TransportError as exc:
                    last_exc = exc
                    if attempt + 1 < self.retries:
                        time.sleep(self.backoff_base * (2**attempt))
        else:
            raise last_exc
        if not response.text:
            raise ProtocolError(f"empty completion for tag={request.tag!r}")
        if log is not None:
            log.llm(request.tag, request.temperature, [m.to_json_dict() for m in request.messages], response.text)
        return response

    def is_scripted(self) -> bool:
        return isinstance(self.backend, ScriptedBackend)


_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class TemplateStore:
    """Plain-text prompt templates with {name} placeholders, one file per id."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self._cache: dict = {}

    def raw(self, template_id: str) -> str:
        if template_id not in self._cache:
            path = self.directory / f"{template_id}.txt"
            if not path.is_file():
                raise TemplateError(f"no template named {template_id!r} in {self.directory}")
            self._cache[template_id] = path.read_text(encoding="utf-8")
        return self._cache[template_id]

    def render(self, template_id: str, variables: dict) -> str:
        text = self.raw(template_id)
        unbound = []

        def substitute(match):
            name = match.group(1)
            if name not in variables:
                unbound.append(name)
                return match.group(0)
            return str(variables[name])

        rendered = _PLACEHOLDER.sub(substitute, text)
        if unbound:
            raise TemplateError(
                f"template {template_id!r} has unbound placeholders: {', '.join(sorted(set(unbound)))}"
            )
        return rendered


_FENCE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def extract_json_block(text: str):
    """Return the first well-formed fenced JSON block in model output."""
    for match in _FENCE.finditer(text):
        try:
            return json.loads(match.group(1))
        except ValueError:
            continue
    raise ParseError("no well-formed fenced JSON block in model output")


@dataclass
class ViewFindings:
    view: str
    findings: list
    measurements: dict
    uncertainty: str
    raw_text: str = ""
    parse_failed: bool = False

    def to_json_dict(self):
        return {
            "view": self.view,
            "findings": list(self.findings),
            "measurements": dict(self.measurements),
            "uncertainty": self.uncertainty,
            "raw_text": self.raw_text,
            "parse_failed": self.parse_failed,
        }


@dataclass
class ModalityReport:
    modality: str
    views: list = field(default_factory=list)
    aggregate: str = ""

    def to_json_dict(self):
        return {
            "modality": self.modality,
            "views": [v.to_json_dict() for v in self.views],
            "aggregate": self.aggregate,
        }


def analyze_image(gateway: Gateway, templates: TemplateStore, images, modality: str, log=None) -> ModalityReport:
    """Run the image analyzer over every view of one modality.

    `images` is a list of (blob, view_label). Exactly one backend call per
    image; the comparative aggregate is assembled deterministically from the
    per-view findings, never by an extra call. Unparseable replies keep the
    raw text and set parse_failed.
    """
    if modality not in ("echo", "ecg-image", "cxr", "ct"):
        raise ProtocolError(f"unsupported imaging modality {modality!r}")
    report = ModalityReport(modality=modality)
    for blob, view in images:
        prompt = templates.render("image_analyze", {"modality": modality, "view": view or "unspecified"})
        request = ChatRequest(
            messages=(ChatMessage("user", prompt),),
            temperature=TOOL_TEMPERATURE,
            tag=f"image_analyze#{modality}#{view or 'unspecified'}",
            images=(blob,),
        )
        reply = gateway.complete(request, log=log)
        try:
            payload = extract_json_block(reply.text)
            findings = [str(f) for f in payload.get("findings", [])]
            measurements = {str(k): str(v) for k, v in payload.get("measurements", {}).items()}
            uncertainty = str(payload.get("uncertainty", ""))
            report.views.append(ViewFindings(view, findings, measurements, uncertainty))
        except ParseError:
            if log is not None:
                log.warn(f"image reply for view {view!r} was not parseable; kept raw text")
            report.views.append(ViewFindings(view, [], {}, "", raw_text=reply.text, parse_failed=True))
    report.aggregate = _aggregate_views(report)
    return report


def _aggregate_views(report: ModalityReport) -> str:
    if not report.views:
        return f"No {report.modality} views supplied."
    lines = [f"Comparative assessment across {len(report.views)} {report.modality} view(s):"]
    for v in report.views:
        label = v.view or "unspecified view"
        if v.parse_failed:
            lines.append(f"- {label}: analyzer output not structured; see raw text")
        else:
            lines.append(f"- {label}: " + ("; ".join(v.findings) if v.findings else "no findings reported"))
    parsed = [v for v in report.views if not v.parse_failed]
    if len(parsed) > 1:
        common = set(parsed[0].findings)
        for v in parsed[1:]:
            common &= set(v.findings)
        if common:
            lines.append("Consistent across views: " + "; ".join(sorted(common)))
        else:
            lines.append("No finding was reported in every view.")
    return "\n".join(lines)
