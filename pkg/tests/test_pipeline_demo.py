import dataclasses
import json

import pytest

from cardioddx.errors import StageError
from cardioddx.model import (
    NOT_FOUND,
    ReferenceList,
    STAGE_ORDER,
    Unverified,
    check_result_invariants,
)
from cardioddx.pipeline import Pipeline
from cardioddx.runtime import RuntimeConfig, build_pipeline, demo_config_path

AGENT_TAGS = ("predict", "examine", "review", "rank", "session_instruct")
TOOL_TAGS = ("tabular_summarize", "web_summarize", "case_summarize", "kb_normalize", "rewrite", "judge")


def run_demo(**config_overrides):
    cfg = RuntimeConfig.load(demo_config_path())
    override = dataclasses.replace(cfg.pipeline, **config_overrides) if config_overrides else None
    pipeline = build_pipeline(cfg, config_override=override)
    return pipeline


def test_stage_order_is_fixed(demo_pipeline, demo_case):
    result = demo_pipeline.run(demo_case)
    assert tuple(r.stage for r in result.trace) == STAGE_ORDER


def test_replay_is_byte_identical(demo_case):
    a = run_demo().run(demo_case).to_canonical_json()
    b = run_demo().run(demo_case).to_canonical_json()
    assert a == b


def test_demo_counts_and_final_ranking(demo_pipeline, demo_case):
    result = demo_pipeline.run(demo_case)
    by = {r.stage: r for r in result.trace}

    assert len(by["predict"].summary["candidates"]) == 4
    examiner = by["examine"].summary["revisions"]
    assert [r["kind"] for r in examiner] == ["ADD", "ADD"]
    reviewer = by["review"].summary["revisions"]
    kinds = [r["kind"] for r in reviewer]
    assert len(reviewer) == 7
    assert kinds.count("REVISE") == 3 and kinds.count("DELETE") == 1 and kinds.count("ADD") == 3
    assert len(by["self_verify"].summary["deleted"]) == 3

    top = [c.diagnosis for c in result.ranked_list[:3]]
    assert top == ["systemic amyloidosis", "restrictive cardiomyopathy", "diabetic nephropathy"]
    assert [c.rank for c in result.ranked_list] == list(range(1, len(result.ranked_list) + 1))


def test_merge_and_output_make_no_llm_calls(demo_pipeline, demo_case):
    result = demo_pipeline.run(demo_case)
    by = {r.stage: r for r in result.trace}
    assert by["merge"].llm_calls == []
    assert by["output"].llm_calls == []
    assert by["merge"].tool_calls == []
    assert by["output"].tool_calls == []


def test_temperature_contract_across_whole_trace(demo_pipeline, demo_case):
    result = demo_pipeline.run(demo_case)
    for record in result.trace:
        for call in record.llm_calls:
            base = call.tag.split("#")[0]
            if base in AGENT_TAGS or base == "self_verify" or base == "cot":
                assert call.temperature == 0.1, call.tag
            else:
                assert base in TOOL_TAGS or base in ("risk_extract", "image_analyze"), call.tag
                assert call.temperature == 0.0, call.tag


def test_result_invariants_hold(demo_pipeline, demo_case):
    result = demo_pipeline.run(demo_case)
    assert check_result_invariants(result) == []
    # Every ranked explanation has a reference verdict.
    for cand in result.ranked_list:
        for expl in cand.explanations:
            assert (cand.diagnosis, expl) in result.per_explanation_refs


def test_found_references_quote_their_chunks(demo_pipeline, demo_case):
    result = demo_pipeline.run(demo_case)
    corpus = demo_pipeline.resources.corpus_index
    chunks = {c.chunk_id: c for c in corpus.chunks}
    found = {
        key: v for key, v in result.per_explanation_refs.items() if isinstance(v, ReferenceList)
    }
    assert len(found) == 3
    for key, ref_list in found.items():
        for entry in ref_list.entries:
            assert entry.extracted_text in chunks[entry.chunk_id].text


def test_result_json_round_trip(demo_pipeline, demo_case):
    from cardioddx.model import DiagnosisResult

    result = demo_pipeline.run(demo_case)
    doc = result.to_json_dict()
    again = DiagnosisResult.from_json_dict(doc)
    assert again.to_canonical_json() == result.to_canonical_json()


# ------------------------------------------------------------ ablations


def collect_tool_names(result):
    return [t.tool for rec in result.trace for t in rec.tool_calls]


def collect_llm_tags(result):
    return [c.tag for rec in result.trace for c in rec.llm_calls]


def test_web_ablation_makes_zero_web_calls(demo_case):
    result = run_demo(use_web=False).run(demo_case)
    assert not any("web" in n for n in collect_tool_names(result))
    assert not any(t.startswith("web_summarize") for t in collect_llm_tags(result))


def test_case_repo_ablation_makes_zero_case_searches(demo_case):
    result = run_demo(use_case_repo=False).run(demo_case)
    assert not any("case_search" in n for n in collect_tool_names(result))


def test_corpora_ablation_leaves_everything_unverified(demo_case):
    result = run_demo(use_corpora=False).run(demo_case)
    assert result.per_explanation_refs
    for value in result.per_explanation_refs.values():
        assert isinstance(value, Unverified)
    assert not any(t.startswith(("rewrite", "judge")) for t in collect_llm_tags(result))


def test_examiner_ablation_removes_its_additions(demo_case):
    full = run_demo().run(demo_case)
    ablated = run_demo(use_examiner=False).run(demo_case)
    full_labels = {c.diagnosis for c in full.ranked_list}
    ablated_labels = {c.diagnosis for c in ablated.ranked_list}
    missing = full_labels - ablated_labels
    assert missing == {"diabetic nephropathy", "diabetic peripheral polyneuropathy"}
    assert not any(t.startswith("examine") for t in collect_llm_tags(ablated))


def test_reviewer_ablation_removes_its_additions(demo_case):
    full = run_demo().run(demo_case)
    ablated = run_demo(use_reviewer=False).run(demo_case)
    missing = {c.diagnosis for c in full.ranked_list} - {c.diagnosis for c in ablated.ranked_list}
    assert missing == {"secondary heart failure"}
    assert not any(t.startswith("review") for t in collect_llm_tags(ablated))


def test_ablations_stay_deterministic(demo_case):
    for kw in ({"use_web": False}, {"use_examiner": False}, {"use_corpora": False}):
        a = run_demo(**kw).run(demo_case).to_canonical_json()
        b = run_demo(**kw).run(demo_case).to_canonical_json()
        assert a == b, kw


# ------------------------------------------------------------ refinement


def test_refine_reorders_and_traces_three_stages(demo_pipeline, demo_case):
    result = demo_pipeline.run(demo_case)
    refined = demo_pipeline.refine(
        demo_case, result, "Weight the neurologic findings ahead of the renal ones."
    )
    assert [r.stage for r in refined.trace] == ["self_verify", "output", "ref_verify"]
    before = [c.diagnosis for c in result.ranked_list]
    after = [c.diagnosis for c in refined.ranked_list]
    assert set(before) == set(after)
    assert before != after
    diff = [i for i, (x, y) in enumerate(zip(before, after)) if x != y]
    assert diff == [2, 3]
    assert [c.rank for c in refined.ranked_list] == list(range(1, len(after) + 1))
    assert check_result_invariants(refined) == []


def test_refine_is_deterministic(demo_case):
    p1 = run_demo()
    r1 = p1.run(demo_case)
    a = p1.refine(demo_case, r1, "Weight the neurologic findings ahead of the renal ones.")
    p2 = run_demo()
    r2 = p2.run(demo_case)
    b = p2.refine(demo_case, r2, "Weight the neurologic findings ahead of the renal ones.")
    assert a.to_canonical_json() == b.to_canonical_json()


# ------------------------------------------------------------ failure paths


def test_invalid_case_fails_in_ingest(demo_pipeline):
    from cardioddx.model import PatientCase

    bad = PatientCase(case_id="", note_text="")
    events = list(demo_pipeline.iter_run(bad))
    assert events[-1][0] == "error"
    payload = events[-1][1]
    assert payload["stage"] == "ingest"
    with pytest.raises(StageError):
        demo_pipeline.run(bad)


def test_error_event_carries_partial_trace(demo_pipeline, demo_case):
    from conftest import scripted_gateway

    # A transcript that covers ingest but not predict: the run clears ingest,
    # then dies in predict, and the error event must carry the partial trace.
    gateway = scripted_gateway(
        [("contains", "tag: tabular_summarize", "Laboratory values reviewed; nothing remarkable.")]
    )
    pipeline = Pipeline(gateway, demo_pipeline.resources, demo_pipeline.config)
    events = list(pipeline.iter_run(demo_case))
    kind, payload = events[-1]
    assert kind == "error"
    assert payload["stage"] == "predict"
    assert payload["trace"], "partial trace must accompany the error"
    stages = [r.stage for r in payload["trace"]]
    assert stages[0] == "ingest"
    with pytest.raises(StageError):
        Pipeline(gateway, demo_pipeline.resources, demo_pipeline.config).run(demo_case)
