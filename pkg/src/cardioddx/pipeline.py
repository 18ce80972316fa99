"""The staged diagnosis pipeline and its single-pass baselines.

Stage order is fixed: ingest, predict, examine and review (concurrent),
merge, self_verify, output, ref_verify. Merge and output are pure functions
with zero LLM calls. With a scripted backend the whole run is a pure
function of (case, transcript, configuration) and replays byte-identically.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from .errors import CardioDdxError, ConfigError, ParseError, StageError
from .gateway import ChatMessage, ChatRequest, Gateway, ScriptedBackend, extract_json_block
from .knowledge import case_search, kb_lookup, web_search
from .model import (
    NOT_FOUND,
    Candidate,
    DiagnosisResult,
    Revision,
    Unverified,
    canonicalize_label,
    validate_case,
)
from .references import verify_result
from .risk import extract_risk_variables, score_rubric
from .tabular import process_tabular
from .trace import CounterClock, StageLog, Tracer, WallClock
from . import ecg as ecg_tools
from . import gateway as gw


@dataclass
class PipelineConfig:
    """Run-shaping knobs. Tool flags are airtight: a disabled tool is never
    invoked and leaves no trace entries."""

    final_k: int = 6
    agent_temperature: float = 0.1
    bm25_top_k: int = 20
    rerank_top_k: int = 5
    similar_cases_k: int = 5
    use_case_repo: bool = True
    use_web: bool = True
    use_kb: bool = True
    use_corpora: bool = True
    use_examiner: bool = True
    use_reviewer: bool = True
    verify_rounds: int = 1
    risk_rubrics: tuple = ()

    def __post_init__(self):
        if self.final_k < 3:
            raise ConfigError("final_k must be >= 3")
        if not 0.0 <= self.agent_temperature <= 2.0:
            raise ConfigError("agent_temperature out of range")
        if self.bm25_top_k < 1 or self.rerank_top_k < 1:
            raise ConfigError("retrieval cutoffs must be >= 1")
        if self.rerank_top_k > self.bm25_top_k:
            raise ConfigError("rerank cutoff cannot exceed the lexical cutoff")
        if self.verify_rounds not in (1, 2):
            raise ConfigError("verify_rounds must be 1 or 2")

    def to_json_dict(self):
        return {
            "final_k": self.final_k,
            "agent_temperature": self.agent_temperature,
            "bm25_top_k": self.bm25_top_k,
            "rerank_top_k": self.rerank_top_k,
            "similar_cases_k": self.similar_cases_k,
            "use_case_repo": self.use_case_repo,
            "use_web": self.use_web,
            "use_kb": self.use_kb,
            "use_corpora": self.use_corpora,
            "use_examiner": self.use_examiner,
            "use_reviewer": self.use_reviewer,
            "verify_rounds": self.verify_rounds,
            "risk_rubrics": list(self.risk_rubrics),
        }

    @classmethod
    def from_json_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "risk_rubrics" in kwargs:
            kwargs["risk_rubrics"] = tuple(kwargs["risk_rubrics"])
        return cls(**kwargs)


@dataclass
class Resources:
    """Everything a run may consult besides the backend itself."""

    templates: object
    kb: object = None
    case_index: object = None
    case_embedder: object = None
    corpus_index: object = None
    corpus_embedder: object = None
    web: object = None
    rubrics: dict = field(default_factory=dict)


@dataclass
class ToolReports:
    tabular: object = None
    ecg: list = field(default_factory=list)
    images: list = field(default_factory=list)
    risk: list = field(default_factory=list)

    def as_context(self) -> str:
        parts = []
        if self.tabular is not None and self.tabular.listing:
            parts.append("Laboratory findings:\n" + (self.tabular.summary or self.tabular.listing))
        for report in self.ecg:
            parts.append("ECG analysis:\n" + report.narrative)
        for report in self.images:
            parts.append("Imaging analysis:\n" + report.aggregate)
        for rubric_id, score, failures in self.risk:
            if score is not None:
                parts.append(f"Risk score {rubric_id}: {score.points:g} points ({score.band}).")
            else:
                parts.append(f"Risk score {rubric_id}: not computed ({'; '.join(failures)}).")
        return "\n\n".join(parts) if parts else "No structured tool reports available."

    def summary(self) -> dict:
        return {
            "tabular": self.tabular is not None,
            "ecg_leads": [r.lead for r in self.ecg],
            "image_modalities": [r.modality for r in self.images],
            "risk_rubrics": [rubric_id for rubric_id, _, _ in self.risk],
        }


def _candidate_block(candidates) -> str:
    lines = []
    for i, cand in enumerate(candidates, start=1):
        marker = " [deletion proposed]" if cand.status == "delete_proposed" else ""
        lines.append(f"{i}. {cand.diagnosis}{marker}")
        for expl in cand.explanations:
            lines.append(f"   - {expl}")
    return "\n".join(lines)


def _parse_candidates(payload, log_) -> list:
    """Shared parser for predictor and CoT output: dedup, canonicalize, filter."""
    raw = payload.get("candidates")
    if not isinstance(raw, list):
        raise ParseError("output carries no candidate list")
    by_label = {}
    order = []
    keywords = {}
    for item in raw:
        if not isinstance(item, dict):
            log_.warn("non-object candidate entry; dropped")
            continue
        try:
            label = canonicalize_label(item.get("diagnosis", ""))
        except Exception:
            log_.warn("candidate with empty diagnosis; dropped")
            continue
        explanations = [str(e).strip() for e in item.get("explanations", []) if str(e).strip()]
        if not explanations:
            log_.warn(f"candidate {label!r} had no usable explanations; dropped")
            continue
        if label in by_label:
            log_.warn(f"duplicate candidate {label!r}; explanations merged")
            for expl in explanations:
                if expl not in by_label[label].explanations:
                    by_label[label].explanations.append(expl)
        else:
            by_label[label] = Candidate(diagnosis=label, explanations=list(explanations), origin="initial")
            order.append(label)
        for kw in item.get("keywords", []) or []:
            keywords.setdefault(label, []).append(str(kw))
    return [by_label[label] for label in order], keywords


def _parse_revisions(payload, source_agent: str, log_) -> list:
    revisions = []
    for item in payload.get("revisions", []):
        if not isinstance(item, dict):
            log_.warn(f"{source_agent} emitted a non-object revision; discarded")
            continue
        kind = str(item.get("action", "")).upper()
        if kind not in ("ADD", "REVISE", "DELETE"):
            log_.warn(f"{source_agent} emitted unknown action {kind!r}; discarded")
            continue
        try:
            label = canonicalize_label(item.get("diagnosis", ""))
        except Exception:
            log_.warn(f"{source_agent} revision had an empty diagnosis; discarded")
            continue
        explanations = tuple(str(e).strip() for e in item.get("explanations", []) if str(e).strip())
        rationale = str(item.get("rationale", "")).strip()
        if kind == "DELETE" and not rationale:
            log_.warn(f"{source_agent} DELETE of {label!r} lacked a rationale; discarded")
            continue
        if kind in ("ADD", "REVISE") and not explanations:
            log_.warn(f"{source_agent} {kind} of {label!r} carried no explanations; discarded")
            continue
        revisions.append(
            Revision(
                kind=kind,
                diagnosis=label,
                added_explanations=explanations,
                rationale=rationale,
                source_agent=source_agent,
            )
        )
    return revisions


def merge_revisions(initial, reviewer_revisions, examiner_revisions):
    """Deterministically merge both critics into one candidate set. LLM-free.

    ADDs append new active candidates (reviewer's first, then examiner's);
    an ADD that collides with an existing label folds its explanations in
    instead. REVISE appends novel explanation snippets in order. DELETE marks
    delete_proposed; the final call belongs to self-verification. Returns
    (candidates, warnings, delete_rationales).
    """
    merged = [replace(c, explanations=list(c.explanations)) for c in initial]
    by_label = {c.diagnosis: c for c in merged}
    warnings = []
    delete_rationales = {}

    def apply(revision: Revision, origin: str):
        if revision.kind == "ADD":
            if revision.diagnosis in by_label:
                warnings.append(f"ADD of existing candidate {revision.diagnosis!r}; explanations folded in")
                target = by_label[revision.diagnosis]
                for expl in revision.added_explanations:
                    if expl not in target.explanations:
                        target.explanations.append(expl)
                return
            cand = Candidate(
                diagnosis=revision.diagnosis,
                explanations=list(revision.added_explanations),
                origin=origin,
            )
            merged.append(cand)
            by_label[cand.diagnosis] = cand
        elif revision.kind == "REVISE":
            target = by_label.get(revision.diagnosis)
            if target is None:
                warnings.append(f"REVISE targets unknown candidate {revision.diagnosis!r}; discarded")
                return
            for expl in revision.added_explanations:
                if expl not in target.explanations:
                    target.explanations.append(expl)
        else:
            target = by_label.get(revision.diagnosis)
            if target is None:
                warnings.append(f"DELETE targets unknown candidate {revision.diagnosis!r}; discarded")
                return
            target.status = "delete_proposed"
            delete_rationales[revision.diagnosis] = revision.rationale

    for revision in reviewer_revisions:
        if revision.kind in ("REVISE", "DELETE"):
            apply(revision, "reviewer_add")
    for revision in reviewer_revisions:
        if revision.kind == "ADD":
            apply(revision, "reviewer_add")
    for revision in examiner_revisions:
        if revision.kind == "ADD":
            apply(revision, "examiner_add")
        else:
            warnings.append(f"examiner {revision.kind} reached merge; discarded")
    return merged, warnings, delete_rationales


class Pipeline:
    """Orchestrates one diagnostic run over a fixed backend and resources."""

    def __init__(self, gateway: Gateway, resources: Resources, config: PipelineConfig = None, clock_factory=None):
        self.gateway = gateway
        self.resources = resources
        self.config = config if config is not None else PipelineConfig()
        if clock_factory is None:
            clock_factory = CounterClock if gateway.is_scripted() else WallClock
        self.clock_factory = clock_factory

    # -- prompt helpers -----------------------------------------------------

    def _agent_request(self, tag: str, prompt: str, max_tokens: int = 2048) -> ChatRequest:
        return ChatRequest(
            messages=(ChatMessage("user", prompt),),
            temperature=self.config.agent_temperature,
            max_tokens=max_tokens,
            tag=tag,
        )

    def _knowledge_context(self, labels, keywords, log_) -> str:
        """KB entries (and web summaries on KB misses) for the given labels."""
        if not self.config.use_kb and not self.config.use_web:
            return "No external knowledge sources are enabled."
        blocks = []
        for label in labels:
            entry = NOT_FOUND
            if self.config.use_kb and self.resources.kb is not None:
                entry = kb_lookup(
                    self.resources.kb,
                    label,
                    gateway=self.gateway,
                    templates=self.resources.templates,
                    log_=log_,
                )
            if entry is not NOT_FOUND:
                blocks.append(entry.as_context())
            elif self.config.use_web and self.resources.web is not None:
                terms = keywords.get(label) or _fallback_keywords(label, keywords)
                for summary in web_search(self.resources.web, label, terms, log_=log_):
                    blocks.append(f"Web source ({summary.source}, {summary.title}): {summary.summarized_knowledge}")
        return "\n\n".join(blocks) if blocks else "No knowledge entries matched the candidates."

    def _similar_cases_context(self, case, log_):
        if not (self.config.use_case_repo and self.resources.case_index is not None):
            return "Similar-case retrieval is not enabled.", []
        hits = case_search(
            self.resources.case_index,
            case.note_text,
            self.resources.case_embedder,
            k=self.config.similar_cases_k,
            log_=log_,
        )
        lines = []
        for record, score in hits:
            body = record.summary or record.retained_text
            lines.append(f"Case {record.case_key} (confirmed: {record.confirmed_diagnosis}, similarity {score:.3f}): {body}")
        return ("\n".join(lines) if lines else "No similar cases on file."), hits

    # -- stages -------------------------------------------------------------

    def _stage_ingest(self, tracer, case):
        log_, started = tracer.open_stage("ingest")
        violations = validate_case(case)
        if violations:
            tracer.close_stage(
                log_,
                started,
                case.to_json_dict(),
                {"violations": [v.to_json_dict() for v in violations]},
                {"violations": [v.to_json_dict() for v in violations]},
            )
            raise StageError("ingest", "; ".join(f"{v.field}: {v.message}" for v in violations), tracer.records)
        reports = ToolReports()
        if case.lab_table:
            reports.tabular = process_tabular(self.gateway, self.resources.templates, case.lab_table, log_=log_)
            log_.tool("process_tabular", {"rows": len(case.lab_table)}, {"summarized": reports.tabular.summarized})
        for waveform in case.ecg_waveforms:
            report = ecg_tools.ecg_report(waveform)
            reports.ecg.append(report)
            log_.tool(
                "ecg_report",
                {"lead": waveform.lead, "samples": len(waveform.samples), "sampling_rate": waveform.sampling_rate},
                {"beat_count": report.beat_count},
            )
        by_modality = {}
        for image in case.images:
            by_modality.setdefault(image.modality, []).append((image.data, image.view))
        for modality in sorted(by_modality):
            report = gw.analyze_image(self.gateway, self.resources.templates, by_modality[modality], modality, log=log_)
            reports.images.append(report)
            log_.tool("analyze_image", {"modality": modality, "views": len(report.views)}, {"parsed": sum(1 for v in report.views if not v.parse_failed)})
        for rubric_id in self.config.risk_rubrics:
            rubric = self.resources.rubrics.get(rubric_id)
            if rubric is None:
                log_.warn(f"rubric {rubric_id!r} not loaded; skipped")
                continue
            assignment, failures = extract_risk_variables(self.gateway, self.resources.templates, rubric, case.note_text, log_=log_)
            missing_required = {v.name for v in rubric.variables if v.required} - set(assignment)
            if failures or missing_required:
                reports.risk.append((rubric_id, None, failures or ["required variables missing"]))
            else:
                reports.risk.append((rubric_id, score_rubric(rubric, assignment), []))
        tracer.close_stage(log_, started, case.to_json_dict(), reports.summary(), {"reports": reports.summary()})
        return reports

    def _stage_predict(self, tracer, case, reports):
        log_, started = tracer.open_stage("predict")
        similar_context, similar_hits = self._similar_cases_context(case, log_)
        prompt = self.resources.templates.render(
            "predict",
            {
                "note": case.note_text,
                "demographics": json.dumps(case.demographics, sort_keys=True),
                "tool_reports": reports.as_context(),
                "similar_cases": similar_context,
            },
        )
        reply = self.gateway.complete(self._agent_request("predict", prompt), log=log_)
        try:
            candidates, keywords = _parse_candidates(extract_json_block(reply.text), log_)
        except ParseError as exc:
            tracer.close_stage(log_, started, {"case_id": case.case_id}, {"error": str(exc)}, {"error": str(exc)})
            raise StageError("predict", f"predictor output unparseable: {exc}", tracer.records)
        if not candidates:
            tracer.close_stage(log_, started, {"case_id": case.case_id}, {"candidates": []}, {"candidates": []})
            raise StageError("predict", "predictor produced zero candidates", tracer.records)
        summary = {"candidates": [c.to_json_dict() for c in candidates]}
        tracer.close_stage(log_, started, {"case_id": case.case_id}, summary, summary)
        return candidates, keywords, similar_hits, similar_context

    def _critic(self, stage: str, case, candidates, keywords, log_):
        """Shared body for the examiner and reviewer exchanges."""
        knowledge = self._knowledge_context([c.diagnosis for c in candidates], keywords, log_)
        prompt = self.resources.templates.render(
            stage,
            {"note": case.note_text, "candidates": _candidate_block(candidates), "knowledge": knowledge},
        )
        reply = self.gateway.complete(self._agent_request(stage, prompt), log=log_)
        source = "examiner" if stage == "examine" else "reviewer"
        try:
            revisions = _parse_revisions(extract_json_block(reply.text), source, log_)
        except ParseError:
            log_.warn(f"{source} output unparseable; no revisions applied")
            return []
        if stage == "examine":
            kept = []
            for revision in revisions:
                if revision.kind != "ADD":
                    log_.warn(f"examiner may only ADD; {revision.kind} of {revision.diagnosis!r} discarded")
                elif revision.diagnosis in {c.diagnosis for c in candidates}:
                    log_.warn(f"examiner ADD duplicates active candidate {revision.diagnosis!r}; discarded")
                else:
                    kept.append(revision)
            return kept
        labels = {c.diagnosis for c in candidates}
        kept = []
        for revision in revisions:
            if revision.kind in ("REVISE", "DELETE") and revision.diagnosis not in labels:
                log_.warn(f"reviewer {revision.kind} targets unknown {revision.diagnosis!r}; discarded")
            elif revision.kind == "ADD" and revision.diagnosis in labels:
                log_.warn(f"reviewer ADD duplicates active candidate {revision.diagnosis!r}; discarded")
            else:
                kept.append(revision)
        return kept

    def _stage_critics(self, tracer, case, candidates, keywords):
        """Run examiner and generalist reviewer concurrently; trace in fixed order."""
        jobs = []
        if self.config.use_examiner:
            log_ex, started_ex = tracer.open_stage("examine")
            jobs.append(("examine", log_ex, started_ex))
        if self.config.use_reviewer:
            log_rv, started_rv = tracer.open_stage("review")
            jobs.append(("review", log_rv, started_rv))
        results = {}
        if jobs:
            with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
                futures = {
                    stage: pool.submit(self._critic, stage, case, candidates, keywords, log_)
                    for stage, log_, _ in jobs
                }
                for stage, log_, started in jobs:
                    revisions = futures[stage].result()
                    results[stage] = revisions
                    summary = {"revisions": [r.to_json_dict() for r in revisions]}
                    tracer.close_stage(log_, started, {"candidates": [c.diagnosis for c in candidates]}, summary, summary)
        return results.get("examine", []), results.get("review", [])

    def _stage_merge(self, tracer, initial, reviewer_revisions, examiner_revisions):
        log_, started = tracer.open_stage("merge")
        merged, warnings, delete_rationales = merge_revisions(initial, reviewer_revisions, examiner_revisions)
        for message in warnings:
            log_.warn(message)
        summary = {
            "merged": [c.to_json_dict() for c in merged],
            "delete_proposed": sorted(delete_rationales),
        }
        tracer.close_stage(
            log_,
            started,
            {
                "initial": [c.diagnosis for c in initial],
                "reviewer": [r.to_json_dict() for r in reviewer_revisions],
                "examiner": [r.to_json_dict() for r in examiner_revisions],
            },
            summary,
            summary,
        )
        return merged, delete_rationales

    def _verify_candidate(self, case, cand, delete_rationales, reports_context, similar_context, log_):
        status_note = "No deletion has been proposed for this candidate."
        if cand.status == "delete_proposed":
            status_note = (
                "The specialist reviewer proposed deleting this candidate. Rationale: "
                + delete_rationales.get(cand.diagnosis, "none given")
            )
        knowledge = "Knowledge lookup disabled."
        if self.config.use_kb and self.resources.kb is not None:
            entry = kb_lookup(self.resources.kb, cand.diagnosis, gateway=self.gateway, templates=self.resources.templates, log_=log_)
            knowledge = entry.as_context() if entry is not NOT_FOUND else "No curated entry for this diagnosis."
        prompt = self.resources.templates.render(
            "self_verify",
            {
                "note": case.note_text,
                "diagnosis": cand.diagnosis,
                "explanations": "\n".join(f"- {e}" for e in cand.explanations),
                "status_note": status_note,
                "knowledge": knowledge,
                "tool_reports": reports_context,
                "similar_cases": similar_context,
            },
        )
        reply = self.gateway.complete(self._agent_request(f"self_verify#{cand.diagnosis}", prompt), log=log_)
        try:
            payload = extract_json_block(reply.text)
        except ParseError:
            log_.warn(f"verification reply for {cand.diagnosis!r} unparseable; candidate kept")
            return "keep", "", []
        decision = str(payload.get("decision", "keep")).lower()
        if decision not in ("keep", "delete"):
            log_.warn(f"verification decision {decision!r} for {cand.diagnosis!r} unknown; candidate kept")
            decision = "keep"
        refined = [str(e).strip() for e in payload.get("refined_explanations", []) or [] if str(e).strip()]
        return decision, str(payload.get("rationale", "")), refined

    def _stage_self_verify(self, tracer, case, merged, delete_rationales, reports_context, similar_context):
        log_, started = tracer.open_stage("self_verify")
        decisions = []
        deleted = []
        rounds_run = 0
        pool = list(merged)
        for round_no in range(1, self.config.verify_rounds + 1):
            rounds_run = round_no
            changed = False
            for cand in pool:
                if cand.status == "deleted":
                    continue
                decision, rationale, refined = self._verify_candidate(
                    case, cand, delete_rationales, reports_context, similar_context, log_
                )
                decisions.append({"diagnosis": cand.diagnosis, "round": round_no, "decision": decision, "rationale": rationale})
                if decision == "delete":
                    cand.status = "deleted"
                    deleted.append({"diagnosis": cand.diagnosis, "rationale": rationale})
                    changed = True
                else:
                    if cand.status == "delete_proposed":
                        decisions[-1]["overrode_delete_proposal"] = True
                    cand.status = "active"
                    if refined:
                        if refined != cand.explanations:
                            changed = True
                        cand.explanations = refined
            if not changed:
                break
        survivors = [c for c in pool if c.status == "active"]
        if not survivors:
            summary = {"decisions": decisions, "deleted": deleted, "ranking": []}
            tracer.close_stage(log_, started, {"candidates": [c.diagnosis for c in merged]}, summary, summary)
            raise StageError("self_verify", "no surviving diagnosis", tracer.records)

        ranked = self._rank_survivors(case, survivors, log_)
        truncated = []
        if len(ranked) > self.config.final_k:
            truncated = [c.diagnosis for c in ranked[self.config.final_k :]]
            ranked = ranked[: self.config.final_k]
        for i, cand in enumerate(ranked, start=1):
            cand.rank = i
        summary = {
            "decisions": decisions,
            "deleted": deleted,
            "ranking": [c.diagnosis for c in ranked],
            "truncated": truncated,
            "rounds": rounds_run,
        }
        tracer.close_stage(log_, started, {"candidates": [c.diagnosis for c in merged]}, summary, summary)
        return ranked, deleted

    def _rank_survivors(self, case, survivors, log_):
        prompt = self.resources.templates.render(
            "rank",
            {"note": case.note_text, "candidates": _candidate_block(survivors)},
        )
        reply = self.gateway.complete(self._agent_request("rank", prompt), log=log_)
        by_label = {c.diagnosis: c for c in survivors}
        try:
            listed = [canonicalize_label(x) for x in extract_json_block(reply.text).get("ranking", [])]
        except ParseError:
            log_.warn("ranking reply unparseable; keeping pre-ranking order")
            return list(survivors)
        ordered = []
        seen = set()
        for label in listed:
            if label in seen:
                continue
            seen.add(label)
            if label in by_label:
                ordered.append(by_label[label])
            else:
                log_.warn(f"ranking mentions non-surviving candidate {label!r}; ignored")
        missing = [c for c in survivors if c.diagnosis not in seen]
        if missing:
            log_.warn(
                "ranking omitted %d surviving candidate(s); appended in prior order" % len(missing)
            )
            ordered.extend(missing)
        return ordered

    def _stage_output(self, tracer, case, ranked):
        log_, started = tracer.open_stage("output")
        summary = {"ranking": [c.diagnosis for c in ranked]}
        tracer.close_stage(log_, started, {"candidates": [c.diagnosis for c in ranked]}, summary, summary)

    def _stage_ref_verify(self, tracer, ranked):
        log_, started = tracer.open_stage("ref_verify")
        if not self.config.use_corpora or self.resources.corpus_index is None:
            refs = {}
            for cand in ranked:
                for expl in cand.explanations:
                    refs[(cand.diagnosis, expl)] = Unverified("corpus verification disabled")
            summary = {"skipped": True, "explanations": len(refs)}
            tracer.close_stage(log_, started, {"candidates": [c.diagnosis for c in ranked]}, summary, summary)
            return refs
        refs = verify_result(
            self.gateway,
            self.resources.templates,
            self.resources.corpus_index,
            self.resources.corpus_embedder,
            ranked,
            bm25_k=self.config.bm25_top_k,
            rerank_k=self.config.rerank_top_k,
            log_=log_,
        )
        found = sum(1 for v in refs.values() if not isinstance(v, Unverified) and v is not NOT_FOUND)
        summary = {
            "skipped": False,
            "explanations": len(refs),
            "with_references": found,
        }
        tracer.close_stage(log_, started, {"candidates": [c.diagnosis for c in ranked]}, summary, summary)
        return refs

    # -- drivers ------------------------------------------------------------

    def iter_run(self, case):
        """Yield ("stage", StageRecord) as stages complete, then ("result", DiagnosisResult).

        On stage failure yields ("error", {message, stage}) after the partial
        trace and stops.
        """
        tracer = Tracer(clock=self.clock_factory())
        emitted = 0
        current = "ingest"
        try:
            reports = self._stage_ingest(tracer, case)
            for record in tracer.records[emitted:]:
                yield "stage", record
            emitted = len(tracer.records)

            current = "predict"
            candidates, keywords, _, similar_context = self._stage_predict(tracer, case, reports)
            for record in tracer.records[emitted:]:
                yield "stage", record
            emitted = len(tracer.records)

            current = "examine"
            examiner_revisions, reviewer_revisions = self._stage_critics(tracer, case, candidates, keywords)
            for record in tracer.records[emitted:]:
                yield "stage", record
            emitted = len(tracer.records)

            current = "merge"
            merged, delete_rationales = self._stage_merge(tracer, candidates, reviewer_revisions, examiner_revisions)
            for record in tracer.records[emitted:]:
                yield "stage", record
            emitted = len(tracer.records)

            current = "self_verify"
            reports_context = reports.as_context()
            ranked, _ = self._stage_self_verify(
                tracer, case, merged, delete_rationales, reports_context, similar_context
            )
            for record in tracer.records[emitted:]:
                yield "stage", record
            emitted = len(tracer.records)

            current = "output"
            self._stage_output(tracer, case, ranked)
            for record in tracer.records[emitted:]:
                yield "stage", record
            emitted = len(tracer.records)

            current = "ref_verify"
            refs = self._stage_ref_verify(tracer, ranked)
            for record in tracer.records[emitted:]:
                yield "stage", record
            emitted = len(tracer.records)

            result = DiagnosisResult(
                case_id=case.case_id,
                ranked_list=ranked,
                per_explanation_refs=refs,
                trace=list(tracer.records),
            )
            yield "result", result
        except StageError as exc:
            for record in tracer.records[emitted:]:
                yield "stage", record
            yield "error", {"stage": exc.stage, "message": exc.message, "trace": list(tracer.records)}
        except CardioDdxError as exc:
            # Backend or parsing faults raised inside a stage body surface as a
            # stage failure rather than severing the event stream.
            for record in tracer.records[emitted:]:
                yield "stage", record
            yield "error", {"stage": current, "message": str(exc), "trace": list(tracer.records)}

    def run(self, case) -> DiagnosisResult:
        outcome = None
        for kind, payload in self.iter_run(case):
            outcome = (kind, payload)
        kind, payload = outcome
        if kind == "error":
            raise StageError(payload["stage"], payload["message"], payload["trace"])
        return payload

    def iter_refine(self, case, prior_result, instruction: str):
        """Re-enter self-verification with a user instruction over a prior result.

        Yields stage events (self_verify, output, ref_verify) then the new
        result. The full pipeline is NOT re-run.
        """
        tracer = Tracer(clock=self.clock_factory())
        current = ["self_verify"]
        try:
            yield from self._refine_events(tracer, case, prior_result, instruction, current)
        except CardioDdxError as exc:
            yield "error", {"stage": current[0], "message": str(exc), "trace": list(tracer.records)}

    def _refine_events(self, tracer, case, prior_result, instruction, current):
        candidates = [
            Candidate(diagnosis=c.diagnosis, explanations=list(c.explanations), origin=c.origin, status="active")
            for c in prior_result.ranked_list
        ]
        log_, started = tracer.open_stage("self_verify")
        prompt = self.resources.templates.render(
            "session_instruct",
            {
                "ranking": _candidate_block(candidates),
                "instruction": instruction,
                "note": case.note_text,
            },
        )
        reply = self.gateway.complete(self._agent_request("session_instruct", prompt), log=log_)
        deleted = []
        try:
            payload = extract_json_block(reply.text)
        except ParseError:
            log_.warn("instruction reply unparseable; prior ranking kept")
            payload = {"ranking": [c.diagnosis for c in candidates]}
        by_label = {c.diagnosis: c for c in candidates}
        for label in payload.get("delete", []) or []:
            key = canonicalize_label(label)
            if key in by_label:
                by_label[key].status = "deleted"
                deleted.append({"diagnosis": key, "rationale": str(payload.get("rationale", ""))})
            else:
                log_.warn(f"instruction deletes unknown candidate {key!r}; ignored")
        survivors = [c for c in candidates if c.status == "active"]
        if not survivors:
            summary = {"deleted": deleted, "ranking": []}
            tracer.close_stage(log_, started, {"instruction": instruction}, summary, summary)
            yield "stage", tracer.records[-1]
            yield "error", {"stage": "self_verify", "message": "no surviving diagnosis", "trace": list(tracer.records)}
            return
        listed = []
        seen = set()
        for label in payload.get("ranking", []) or []:
            key = canonicalize_label(label)
            if key in seen:
                continue
            seen.add(key)
            if key in {c.diagnosis for c in survivors}:
                listed.append(by_label[key])
            else:
                log_.warn(f"instruction ranking mentions unavailable candidate {key!r}; ignored")
        remaining = [c for c in survivors if c.diagnosis not in seen]
        if remaining and listed:
            log_.warn("instruction ranking omitted surviving candidates; appended in prior order")
        ranked = (listed + remaining)[: self.config.final_k]
        for i, cand in enumerate(ranked, start=1):
            cand.rank = i
        summary = {"deleted": deleted, "ranking": [c.diagnosis for c in ranked], "instruction": instruction}
        tracer.close_stage(log_, started, {"instruction": instruction}, summary, summary)
        yield "stage", tracer.records[-1]

        current[0] = "output"
        self._stage_output(tracer, case, ranked)
        yield "stage", tracer.records[-1]

        current[0] = "ref_verify"
        refs = self._stage_ref_verify(tracer, ranked)
        yield "stage", tracer.records[-1]

        yield "result", DiagnosisResult(
            case_id=case.case_id,
            ranked_list=ranked,
            per_explanation_refs=refs,
            trace=list(tracer.records),
        )

    def refine(self, case, prior_result, instruction: str) -> DiagnosisResult:
        outcome = None
        for kind, payload in self.iter_refine(case, prior_result, instruction):
            outcome = (kind, payload)
        kind, payload = outcome
        if kind == "error":
            raise StageError(payload["stage"], payload["message"], payload["trace"])
        return payload


def _fallback_keywords(label, keywords, limit=5):
    """Deterministic stand-in when an agent emitted no keywords for a label."""
    from .retrieval import tokenize

    pooled = []
    for terms in keywords.values():
        pooled.extend(terms)
    unique = []
    for term in pooled or tokenize(label):
        if term not in unique and len(term) > 3:
            unique.append(term)
    return unique[:limit]


def run_pipeline(gateway, resources, case, config=None, clock_factory=None) -> DiagnosisResult:
    return Pipeline(gateway, resources, config=config, clock_factory=clock_factory).run(case)


def baseline_cot(gateway, resources, case, config=None) -> list:
    """Single chain-of-thought pass: one exchange, parsed like the predictor,
    ranked exactly as emitted, deduplicated. Empty or unparseable output is
    an error; there is no critic, verification, or reference stage."""
    config = config if config is not None else PipelineConfig()
    log_ = StageLog("cot")
    prompt = resources.templates.render(
        "cot",
        {"note": case.note_text, "demographics": json.dumps(case.demographics, sort_keys=True)},
    )
    reply = gateway.complete(
        ChatRequest(
            messages=(ChatMessage("user", prompt),),
            temperature=config.agent_temperature,
            max_tokens=2048,
            tag="cot#1",
        ),
        log=log_,
    )
    try:
        candidates, _ = _parse_candidates(extract_json_block(reply.text), log_)
    except ParseError as exc:
        raise StageError("cot", f"chain-of-thought output unparseable: {exc}")
    if not candidates:
        raise StageError("cot", "chain-of-thought produced zero candidates")
    for i, cand in enumerate(candidates, start=1):
        cand.rank = i
    return candidates


def baseline_sc_cot(gateway, resources, case, config=None, n: int = 5) -> list:
    """Self-consistency: n trajectories, majority vote over canonical labels.

    Ties break by earliest first appearance (trajectory order, then emission
    order). Explanations are the deduplicated union across the trajectories
    that voted for the label. Individual unparseable trajectories are
    skipped; if all fail, that is an error. n=1 reduces to plain CoT.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    config = config if config is not None else PipelineConfig()
    prompt = resources.templates.render(
        "cot",
        {"note": case.note_text, "demographics": json.dumps(case.demographics, sort_keys=True)},
    )
    votes = {}
    appearance = {}
    explanations = {}
    parsed_any = False
    position = 0
    for i in range(1, n + 1):
        log_ = StageLog(f"cot#{i}")
        reply = gateway.complete(
            ChatRequest(
                messages=(ChatMessage("user", prompt),),
                temperature=config.agent_temperature,
                max_tokens=2048,
                tag=f"cot#{i}",
            ),
            log=log_,
        )
        try:
            candidates, _ = _parse_candidates(extract_json_block(reply.text), log_)
        except ParseError:
            continue
        if not candidates:
            continue
        parsed_any = True
        for cand in candidates:
            votes[cand.diagnosis] = votes.get(cand.diagnosis, 0) + 1
            if cand.diagnosis not in appearance:
                appearance[cand.diagnosis] = position
            position += 1
            bucket = explanations.setdefault(cand.diagnosis, [])
            for expl in cand.explanations:
                if expl not in bucket:
                    bucket.append(expl)
    if not parsed_any:
        raise StageError("sc_cot", "every trajectory was empty or unparseable")
    ordered = sorted(votes, key=lambda label: (-votes[label], appearance[label]))
    result = []
    for i, label in enumerate(ordered, start=1):
        result.append(
            Candidate(diagnosis=label, explanations=tuple(explanations[label]), origin="initial", rank=i)
        )
    return result
