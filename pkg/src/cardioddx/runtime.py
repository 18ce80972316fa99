"""Assembles a runnable pipeline from a JSON runtime configuration.

The configuration file names a backend (scripted transcript or HTTP), an
embedder, and the data resources; relative paths resolve against the
directory holding the configuration file. The packaged demo under
``data/demo`` is a complete working example.
"""

from __future__ import annotations

import importlib.resources
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .gateway import Gateway, HttpChatBackend, ScriptedBackend, TemplateStore, Transcript
from .knowledge import (
    CaseIndex,
    FixtureWebTransport,
    KnowledgeBase,
    LiveWebTransport,
    WebSearchClient,
    WEB_DOCS_PER_SOURCE,
    WEB_SOURCES,
    build_case_index,
)
from .pipeline import Pipeline, PipelineConfig, Resources
from .retrieval import CorpusIndex, HashingEmbedder, HttpEmbedder
from .risk import RiskRubric


def packaged_data_dir() -> Path:
    return Path(importlib.resources.files("cardioddx")) / "data"


def demo_config_path() -> Path:
    return packaged_data_dir() / "demo" / "config.json"


@dataclass
class RuntimeConfig:
    pipeline: PipelineConfig
    backend: dict
    embedder: dict
    data: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path) -> "RuntimeConfig":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        unknown = set(raw) - {"pipeline", "backend", "embedder", "data"}
        if unknown:
            raise ConfigError(f"unknown runtime configuration sections: {sorted(unknown)}")
        return cls(
            pipeline=PipelineConfig.from_json_dict(raw.get("pipeline", {})),
            backend=raw.get("backend", {}),
            embedder=raw.get("embedder", {"kind": "hashing", "dimension": 256}),
            data=raw.get("data", {}),
            base_dir=path.parent,
        )

    def resolve(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


def build_embedder(cfg: RuntimeConfig):
    spec = cfg.embedder
    kind = spec.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(dimension=int(spec.get("dimension", 256)))
    if kind == "http":
        return HttpEmbedder(
            endpoint=spec["endpoint"],
            name=spec.get("name", "http"),
            dimension=int(spec["dimension"]),
            timeout=float(spec.get("timeout", 30.0)),
        )
    raise ConfigError(f"unknown embedder kind {kind!r}")


def build_gateway(cfg: RuntimeConfig) -> Gateway:
    spec = cfg.backend
    kind = spec.get("kind")
    if kind == "scripted":
        transcript = Transcript.load(cfg.resolve(spec["transcript"]))
        fallback = None
        if "fallback" in spec:
            fallback = _http_backend(spec["fallback"])
        backend = ScriptedBackend(transcript, fallback=fallback)
    elif kind == "http":
        backend = _http_backend(spec)
    else:
        raise ConfigError(f"backend kind must be 'scripted' or 'http', got {kind!r}")
    return Gateway(
        backend,
        max_in_flight=int(spec.get("max_in_flight", 4)),
        retries=int(spec.get("retries", 3)),
        backoff_base=float(spec.get("backoff_base", 0.5)),
    )


def _http_backend(spec: dict) -> HttpChatBackend:
    api_key = None
    env_name = spec.get("api_key_env")
    if env_name:
        api_key = os.environ.get(env_name)
        if not api_key:
            raise ConfigError(f"backend requires the {env_name} environment variable")
    return HttpChatBackend(
        endpoint=spec["endpoint"],
        model=spec["model"],
        api_key=api_key,
        timeout=float(spec.get("timeout", 60.0)),
    )


def _load_case_notes(path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                yield row["case_key"], row["note_text"], row["confirmed_diagnosis"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ConfigError(f"case notes line {line_no}: {exc}")


def build_resources(cfg: RuntimeConfig, gateway: Gateway) -> Resources:
    data = cfg.data
    templates_dir = cfg.resolve(data["templates_dir"]) if "templates_dir" in data else packaged_data_dir() / "templates"
    templates = TemplateStore(templates_dir)

    kb = None
    if "kb" in data:
        synonyms = cfg.resolve(data["synonyms"]) if "synonyms" in data else None
        kb = KnowledgeBase.load(cfg.resolve(data["kb"]), synonyms)

    embedder = build_embedder(cfg)
    case_index = None
    if "case_index" in data:
        case_index = CaseIndex.load(cfg.resolve(data["case_index"]), embedder=embedder)
    elif "case_notes" in data:
        case_index = build_case_index(_load_case_notes(cfg.resolve(data["case_notes"])), embedder)

    corpus_index = None
    if "corpus_index" in data:
        corpus_index = CorpusIndex.load(cfg.resolve(data["corpus_index"]))
    elif "corpus_dir" in data:
        if "corpus_manifest" not in data:
            raise ConfigError("corpus_dir given without corpus_manifest")
        corpus_index = CorpusIndex.build(
            cfg.resolve(data["corpus_dir"]),
            cfg.resolve(data["corpus_manifest"]),
            window=int(data.get("corpus_window", 800)),
            stride=int(data.get("corpus_stride", 50)),
        )

    web = None
    if "web_fixture" in data:
        with open(cfg.resolve(data["web_fixture"]), "r", encoding="utf-8") as fh:
            documents = json.load(fh)
        transport = FixtureWebTransport(documents)
    elif data.get("web_live"):
        transport = LiveWebTransport()
    else:
        transport = None
    if transport is not None:
        web = WebSearchClient(
            transport=transport,
            gateway=gateway,
            templates=templates,
            sources=tuple(data.get("web_sources", WEB_SOURCES)),
            docs_per_source=int(data.get("web_docs_per_source", WEB_DOCS_PER_SOURCE)),
        )

    rubrics = {}
    if "rubrics_dir" in data:
        rubric_dir = cfg.resolve(data["rubrics_dir"])
        for rubric_path in sorted(Path(rubric_dir).glob("*.json")):
            rubric = RiskRubric.load(rubric_path)
            rubrics[rubric.rubric_id] = rubric

    return Resources(
        templates=templates,
        kb=kb,
        case_index=case_index,
        case_embedder=embedder,
        corpus_index=corpus_index,
        corpus_embedder=embedder,
        web=web,
        rubrics=rubrics,
    )


def build_pipeline(cfg: RuntimeConfig, config_override: PipelineConfig = None) -> Pipeline:
    gateway = build_gateway(cfg)
    resources = build_resources(cfg, gateway)
    return Pipeline(gateway, resources, config=config_override or cfg.pipeline)
