"""Staged multi-agent differential diagnosis for cardiology cases.

A specialist predictor drafts a differential, an examiner and a generalist
reviewer critique it concurrently, and a coordinator verifies, ranks, and
grounds every explanation in a retrievable reference. Runs against a live
chat backend or a scripted transcript; scripted runs replay byte-identically.
"""

from .errors import (
    CardioDdxError,
    ConfigError,
    ParseError,
    ProtocolError,
    StageError,
    TemplateError,
    TransportError,
    ValidationError,
)
from .gateway import ChatMessage, ChatRequest, Gateway, HttpChatBackend, ScriptedBackend, TemplateStore, Transcript
from .model import (
    NOT_FOUND,
    Candidate,
    DiagnosisResult,
    PatientCase,
    ReferenceEntry,
    ReferenceList,
    Revision,
    StageRecord,
    Unverified,
    canonicalize_label,
    check_result_invariants,
    validate_case,
)
from .pipeline import Pipeline, PipelineConfig, Resources, baseline_cot, baseline_sc_cot, run_pipeline
from .runtime import RuntimeConfig, build_pipeline, demo_config_path

__version__ = "0.1.0"

__all__ = [
    "CardioDdxError",
    "ConfigError",
    "ParseError",
    "ProtocolError",
    "StageError",
    "TemplateError",
    "TransportError",
    "ValidationError",
    "ChatMessage",
    "ChatRequest",
    "Gateway",
    "HttpChatBackend",
    "ScriptedBackend",
    "TemplateStore",
    "Transcript",
    "NOT_FOUND",
    "Candidate",
    "DiagnosisResult",
    "PatientCase",
    "ReferenceEntry",
    "ReferenceList",
    "Revision",
    "StageRecord",
    "Unverified",
    "canonicalize_label",
    "check_result_invariants",
    "validate_case",
    "Pipeline",
    "PipelineConfig",
    "Resources",
    "baseline_cot",
    "baseline_sc_cot",
    "run_pipeline",
    "RuntimeConfig",
    "build_pipeline",
    "demo_config_path",
    "__version__",
]
