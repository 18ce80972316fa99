"""Domain types, validation, and canonical JSON serialization.

Every type here round-trips through plain dicts so results can be persisted,
diffed, and replayed byte for byte. `canonical_json` is the single
serialization used for digests and stored artifacts: sorted keys, no
insignificant whitespace, UTF-8 kept as-is.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
from dataclasses import dataclass, field

from .errors import ValidationError

_NON_WORD = re.compile(r"[^\w\s]|_")

CASE_SCHEMA_VERSION = 1
RESULT_SCHEMA_VERSION = 1

# Trace stages in their one legal execution order.
STAGE_ORDER = (
    "ingest",
    "predict",
    "examine",
    "review",
    "merge",
    "self_verify",
    "output",
    "ref_verify",
)

VALID_MODALITIES = ("echo", "ecg-image", "cxr", "ct")


def canonicalize_label(raw: str) -> str:
    """Map a diagnosis label to its canonical form.

    Lowercase, punctuation replaced by spaces, runs of whitespace collapsed.
    Idempotent: canonicalize(canonicalize(x)) == canonicalize(x).
    """
    if raw is None or not str(raw).strip():
        raise ValidationError("diagnosis label must be non-empty")
    text = _NON_WORD.sub(" ", str(raw).lower())
    canonical = " ".join(text.split())
    if not canonical:
        raise ValidationError(f"diagnosis label {raw!r} has no word characters")
    return canonical


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, compact separators, unicode preserved."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def digest_of(obj) -> str:
    """Short stable content digest used throughout trace records."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class Violation:
    field: str
    message: str

    def to_json_dict(self):
        return {"field": self.field, "message": self.message}


@dataclass(frozen=True)
class LabRow:
    name: str
    value: str
    unit: str = ""
    flag: str = ""

    def to_json_dict(self):
        return {"name": self.name, "value": self.value, "unit": self.unit, "flag": self.flag}

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            name=d.get("name", ""),
            value=str(d.get("value", "")),
            unit=d.get("unit", ""),
            flag=d.get("flag", ""),
        )


@dataclass(frozen=True)
class Waveform:
    """One ECG lead. Samples are raw amplitudes at a fixed sampling rate."""

    samples: tuple
    sampling_rate: float
    lead: str = "II"

    def to_json_dict(self):
        return {
            "samples": list(self.samples),
            "sampling_rate": self.sampling_rate,
            "lead": self.lead,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            samples=tuple(float(s) for s in d.get("samples", [])),
            sampling_rate=float(d.get("sampling_rate", 0.0)),
            lead=d.get("lead", "II"),
        )


@dataclass(frozen=True)
class CaseImage:
    modality: str
    data: bytes
    view: str = ""

    def to_json_dict(self):
        return {
            "modality": self.modality,
            "view": self.view,
            "data_b64": base64.b64encode(self.data).decode("ascii"),
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            modality=d.get("modality", ""),
            view=d.get("view", ""),
            data=base64.b64decode(d.get("data_b64", "")),
        )


@dataclass(frozen=True)
class PatientCase:
    case_id: str
    note_text: str
    lab_table: tuple = ()
    ecg_waveforms: tuple = ()
    images: tuple = ()
    demographics: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {
            "schema_version": CASE_SCHEMA_VERSION,
            "case_id": self.case_id,
            "note_text": self.note_text,
            "lab_table": [r.to_json_dict() for r in self.lab_table],
            "ecg_waveforms": [w.to_json_dict() for w in self.ecg_waveforms],
            "images": [im.to_json_dict() for im in self.images],
            "demographics": dict(self.demographics),
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            case_id=d.get("case_id", ""),
            note_text=d.get("note_text", ""),
            lab_table=tuple(LabRow.from_json_dict(r) for r in d.get("lab_table", [])),
            ecg_waveforms=tuple(Waveform.from_json_dict(w) for w in d.get("ecg_waveforms", [])),
            images=tuple(CaseImage.from_json_dict(i) for i in d.get("images", [])),
            demographics=dict(d.get("demographics", {})),
        )


def validate_case(case: PatientCase) -> list:
    """Check a case against the documented schema.

    Returns every violation found, not just the first. An empty list means
    the case is admissible.
    """
    violations = []
    if not isinstance(case.case_id, str) or not case.case_id.strip():
        violations.append(Violation("case_id", "must be a non-empty string"))
    if not isinstance(case.note_text, str) or not case.note_text.strip():
        violations.append(Violation("note_text", "must be non-empty"))
    for i, row in enumerate(case.lab_table):
        if not row.name.strip():
            violations.append(Violation(f"lab_table[{i}].name", "must be non-empty"))
    for i, wf in enumerate(case.ecg_waveforms):
        if wf.sampling_rate <= 0:
            violations.append(Violation(f"ecg_waveforms[{i}].sampling_rate", "must be positive"))
        if len(wf.samples) == 0:
            violations.append(Violation(f"ecg_waveforms[{i}].samples", "must be non-empty"))
    for i, im in enumerate(case.images):
        if im.modality not in VALID_MODALITIES:
            violations.append(
                Violation(
                    f"images[{i}].modality",
                    "must be one of %s" % ", ".join(VALID_MODALITIES),
                )
            )
        if len(im.data) == 0:
            violations.append(Violation(f"images[{i}].data_b64", "must decode to non-empty bytes"))
    age = case.demographics.get("age")
    if age is not None and not isinstance(age, (int, float)):
        violations.append(Violation("demographics.age", "must be numeric when present"))
    return violations


# Candidate origins and statuses form small closed vocabularies.
ORIGINS = ("initial", "examiner_add", "reviewer_add")
STATUSES = ("active", "delete_proposed", "deleted")


@dataclass
class Candidate:
    """One diagnosis under consideration, with its evidence snippets."""

    diagnosis: str
    explanations: list
    origin: str = "initial"
    status: str = "active"
    rank: int | None = None

    def to_json_dict(self):
        return {
            "diagnosis": self.diagnosis,
            "explanations": list(self.explanations),
            "origin": self.origin,
            "status": self.status,
            "rank": self.rank,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            diagnosis=d["diagnosis"],
            explanations=list(d.get("explanations", [])),
            origin=d.get("origin", "initial"),
            status=d.get("status", "active"),
            rank=d.get("rank"),
        )


REVISION_KINDS = ("ADD", "REVISE", "DELETE")


@dataclass(frozen=True)
class Revision:
    kind: str
    diagnosis: str
    added_explanations: tuple = ()
    rationale: str = ""
    source_agent: str = ""

    def __post_init__(self):
        if self.kind not in REVISION_KINDS:
            raise ValidationError(f"revision kind must be one of {REVISION_KINDS}, got {self.kind!r}")
        if self.kind == "DELETE" and not self.rationale.strip():
            raise ValidationError("DELETE revisions require a rationale")

    def to_json_dict(self):
        return {
            "kind": self.kind,
            "diagnosis": self.diagnosis,
            "added_explanations": list(self.added_explanations),
            "rationale": self.rationale,
            "source_agent": self.source_agent,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            kind=d["kind"],
            diagnosis=d["diagnosis"],
            added_explanations=tuple(d.get("added_explanations", [])),
            rationale=d.get("rationale", ""),
            source_agent=d.get("source_agent", ""),
        )


@dataclass(frozen=True)
class ReferenceEntry:
    source_title: str
    extracted_text: str
    chunk_id: str
    rerank_score: float

    def to_json_dict(self):
        return {
            "source_title": self.source_title,
            "extracted_text": self.extracted_text,
            "chunk_id": self.chunk_id,
            "rerank_score": self.rerank_score,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            source_title=d["source_title"],
            extracted_text=d["extracted_text"],
            chunk_id=d["chunk_id"],
            rerank_score=float(d["rerank_score"]),
        )


@dataclass(frozen=True)
class ReferenceList:
    """Supporting passages for one explanation, at most five, rerank order."""

    entries: tuple

    def __post_init__(self):
        if len(self.entries) == 0:
            raise ValidationError("a ReferenceList must hold at least one entry; use NOT_FOUND")
        if len(self.entries) > 5:
            raise ValidationError("a ReferenceList holds at most five entries")

    def to_json_dict(self):
        return {"status": "found", "entries": [e.to_json_dict() for e in self.entries]}


class _NotFound:
    """Distinguished outcome: verification ran and no passage supported the claim."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NotFound"

    def to_json_dict(self):
        return {"status": "not_found"}


NOT_FOUND = _NotFound()


@dataclass(frozen=True)
class Unverified:
    """Verification did not run to completion for this explanation.

    Distinct from NOT_FOUND: the claim was never judged against the corpus,
    either because verification is disabled or because this entry errored.
    """

    reason: str

    def to_json_dict(self):
        return {"status": "unverified", "reason": self.reason}


def ref_value_from_json(d):
    status = d.get("status")
    if status == "found":
        return ReferenceList(tuple(ReferenceEntry.from_json_dict(e) for e in d.get("entries", [])))
    if status == "not_found":
        return NOT_FOUND
    if status == "unverified":
        return Unverified(d.get("reason", ""))
    raise ValidationError(f"unknown reference status {status!r}")


@dataclass(frozen=True)
class ToolCall:
    tool: str
    request: dict
    response: dict
    request_digest: str
    response_digest: str

    def to_json_dict(self):
        return {
            "tool": self.tool,
            "request": self.request,
            "response": self.response,
            "request_digest": self.request_digest,
            "response_digest": self.response_digest,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            tool=d["tool"],
            request=d.get("request", {}),
            response=d.get("response", {}),
            request_digest=d["request_digest"],
            response_digest=d["response_digest"],
        )


@dataclass(frozen=True)
class LlmCall:
    """One full prompt/response exchange, kept verbatim for replay and audit."""

    tag: str
    temperature: float
    request_messages: tuple
    response_text: str
    request_digest: str
    response_digest: str

    def to_json_dict(self):
        return {
            "tag": self.tag,
            "temperature": self.temperature,
            "request_messages": [dict(m) for m in self.request_messages],
            "response_text": self.response_text,
            "request_digest": self.request_digest,
            "response_digest": self.response_digest,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            tag=d["tag"],
            temperature=float(d["temperature"]),
            request_messages=tuple(dict(m) for m in d.get("request_messages", [])),
            response_text=d.get("response_text", ""),
            request_digest=d["request_digest"],
            response_digest=d["response_digest"],
        )


@dataclass
class StageRecord:
    stage: str
    inputs_digest: str
    outputs_digest: str
    summary: dict
    tool_calls: list
    llm_calls: list
    warnings: list
    started: float
    ended: float

    def to_json_dict(self):
        return {
            "stage": self.stage,
            "inputs_digest": self.inputs_digest,
            "outputs_digest": self.outputs_digest,
            "summary": self.summary,
            "tool_calls": [t.to_json_dict() for t in self.tool_calls],
            "llm_calls": [c.to_json_dict() for c in self.llm_calls],
            "warnings": list(self.warnings),
            "started": self.started,
            "ended": self.ended,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            stage=d["stage"],
            inputs_digest=d.get("inputs_digest", ""),
            outputs_digest=d.get("outputs_digest", ""),
            summary=d.get("summary", {}),
            tool_calls=[ToolCall.from_json_dict(t) for t in d.get("tool_calls", [])],
            llm_calls=[LlmCall.from_json_dict(c) for c in d.get("llm_calls", [])],
            warnings=list(d.get("warnings", [])),
            started=float(d.get("started", 0.0)),
            ended=float(d.get("ended", 0.0)),
        )


@dataclass
class DiagnosisResult:
    """Final ranked differential plus the full execution trace.

    per_explanation_refs maps (diagnosis, explanation) to a ReferenceList,
    NOT_FOUND, or Unverified. In JSON it nests diagnosis -> explanation ->
    reference value so keys stay plain strings.
    """

    case_id: str
    ranked_list: list
    per_explanation_refs: dict
    trace: list

    def to_json_dict(self):
        refs = {}
        for (diagnosis, explanation), value in self.per_explanation_refs.items():
            refs.setdefault(diagnosis, {})[explanation] = value.to_json_dict()
        return {
            "schema_version": RESULT_SCHEMA_VERSION,
            "case_id": self.case_id,
            "ranked_list": [c.to_json_dict() for c in self.ranked_list],
            "per_explanation_refs": refs,
            "trace": [r.to_json_dict() for r in self.trace],
        }

    def to_canonical_json(self) -> str:
        return canonical_json(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, d):
        refs = {}
        for diagnosis, per_expl in d.get("per_explanation_refs", {}).items():
            for explanation, value in per_expl.items():
                refs[(diagnosis, explanation)] = ref_value_from_json(value)
        return cls(
            case_id=d["case_id"],
            ranked_list=[Candidate.from_json_dict(c) for c in d.get("ranked_list", [])],
            per_explanation_refs=refs,
            trace=[StageRecord.from_json_dict(r) for r in d.get("trace", [])],
        )


def check_result_invariants(result: DiagnosisResult) -> list:
    """Structural checks every finished result must satisfy. Returns problems."""
    problems = []
    ranked = result.ranked_list
    labels = [c.diagnosis for c in ranked]
    if len(set(labels)) != len(labels):
        problems.append("ranked_list contains duplicate diagnoses")
    for i, cand in enumerate(ranked, start=1):
        if cand.rank != i:
            problems.append(f"rank of {cand.diagnosis!r} is {cand.rank}, expected {i}")
        if not cand.explanations:
            problems.append(f"{cand.diagnosis!r} has no explanations")
        for expl in cand.explanations:
            if (cand.diagnosis, expl) not in result.per_explanation_refs:
                problems.append(f"missing reference entry for ({cand.diagnosis!r}, {expl[:40]!r})")
    seen_stages = [r.stage for r in result.trace]
    order = [s for s in STAGE_ORDER if s in seen_stages]
    if seen_stages != order:
        problems.append(f"trace stages out of order: {seen_stages}")
    return problems
