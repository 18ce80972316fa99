import json

import pytest

from cardioddx.model import Candidate, NOT_FOUND, ReferenceList, Unverified
from cardioddx.references import judge_passage, rewrite_claim, verify_explanation, verify_result
from cardioddx.retrieval import CorpusIndex, HashingEmbedder
from cardioddx.trace import StageLog
from conftest import fenced, scripted_gateway

PLANTED = (
    "Deposition of amyloid within the flexor retinaculum produces bilateral "
    "carpal tunnel syndrome, and this finding frequently precedes overt "
    "cardiac involvement by several years."
)


def planted_corpus(tmp_path):
    docs = tmp_path / "docs"
    docs.mkdir()
    (docs / "amyloid.txt").write_text(
        "Cardiac amyloidosis results from extracellular protein deposition. "
        + PLANTED
        + " Low voltage despite thick walls is characteristic.",
        encoding="utf-8",
    )
    (docs / "filler.txt").write_text(
        "Routine clinic scheduling policies and parking information.",
        encoding="utf-8",
    )
    manifest = tmp_path / "manifest.json"
    manifest.write_text(
        json.dumps({"amyloid.txt": "Amyloid Review", "filler.txt": "Clinic Handbook"}),
        encoding="utf-8",
    )
    return CorpusIndex.build(docs, manifest)


def test_planted_paragraph_yields_exactly_one_verbatim_reference(tmp_path):
    index = planted_corpus(tmp_path)
    claim_text = "Amyloid deposition in the flexor retinaculum causes bilateral carpal tunnel syndrome years before cardiac disease."
    gw = scripted_gateway(
        [
            ("contains", "tag: rewrite\n", fenced({"claim": claim_text})),
            (
                "regex",
                r"tag: judge(?=[\s\S]*flexor retinaculum)",
                fenced({"supports": True, "quote": PLANTED}),
            ),
            ("contains", "tag: judge\n", fenced({"supports": False, "quote": ""})),
        ]
    )
    from conftest import DEMO_DIR  # packaged templates live beside the demo
    from cardioddx.gateway import TemplateStore

    templates = TemplateStore(DEMO_DIR.parent / "templates")
    log = StageLog("ref_verify")
    refs = verify_explanation(
        gw, templates, index, HashingEmbedder(128),
        "systemic amyloidosis",
        "Bilateral carpal tunnel release preceding heart failure.",
        log_=log,
    )
    assert isinstance(refs, ReferenceList)
    assert len(refs.entries) == 1
    entry = refs.entries[0]
    assert entry.source_title == "Amyloid Review"
    # The extracted text is verbatim from the chunk it cites.
    chunk = {c.chunk_id: c for c in index.chunks}[entry.chunk_id]
    assert entry.extracted_text in chunk.text


def test_zero_lexical_overlap_is_not_found_without_judging(templates, tmp_path):
    index = planted_corpus(tmp_path)
    gw = scripted_gateway(
        [
            # Claim shares no token with either document.
            ("contains", "tag: rewrite\n", fenced({"claim": "zzzz qqqq wwww"})),
            # Any judge call would match this and prove the short-circuit failed.
            ("contains", "tag: judge\n", fenced({"supports": True, "quote": "x"})),
        ]
    )
    log = StageLog("ref_verify")
    refs = verify_explanation(
        gw, templates, index, HashingEmbedder(64), "anything", "anything at all", log_=log
    )
    assert refs is NOT_FOUND
    judge_calls = [c for c in log.llm_calls if c.tag == "judge"]
    assert judge_calls == []


def test_all_passages_rejected_is_not_found(templates, tmp_path):
    index = planted_corpus(tmp_path)
    gw = scripted_gateway(
        [
            ("contains", "tag: rewrite\n", fenced({"claim": "amyloid deposition carpal tunnel"})),
            ("contains", "tag: judge\n", fenced({"supports": False, "quote": ""})),
        ]
    )
    refs = verify_explanation(gw, templates, index, HashingEmbedder(64), "d", "e")
    assert refs is NOT_FOUND


def test_non_verbatim_quote_is_rejected(templates, tmp_path):
    index = planted_corpus(tmp_path)
    gw = scripted_gateway(
        [
            ("contains", "tag: rewrite\n", fenced({"claim": "amyloid deposition carpal tunnel"})),
            (
                "contains",
                "tag: judge\n",
                fenced({"supports": True, "quote": "a sentence that appears nowhere in the passage"}),
            ),
        ]
    )
    log = StageLog("ref_verify")
    refs = verify_explanation(gw, templates, index, HashingEmbedder(64), "d", "e", log_=log)
    # A supporting verdict with a fabricated quote cannot produce a reference.
    assert refs is NOT_FOUND
    assert any("quote" in w for w in log.warnings)


def test_rewrite_claim_parses_and_falls_back(templates):
    gw = scripted_gateway([("contains", "tag: rewrite\n", fenced({"claim": "standalone claim"}))])
    claim = rewrite_claim(gw, templates, "dx", "because of findings")
    assert claim.text == "standalone claim"

    gw_bad = scripted_gateway([("contains", "tag: rewrite\n", "not json at all")])
    log = StageLog("ref_verify")
    claim = rewrite_claim(gw_bad, templates, "dx", "because of findings", log_=log)
    # Unparseable rewrite degrades to the raw explanation text.
    assert "because of findings" in claim.text
    assert log.warnings


def test_verify_result_preserves_existing_and_isolates_errors(templates, tmp_path):
    index = planted_corpus(tmp_path)
    gw = scripted_gateway(
        [
            ("contains", "tag: rewrite\n", fenced({"claim": "amyloid deposition"})),
            ("contains", "tag: judge\n", fenced({"supports": False, "quote": ""})),
        ]
    )
    candidates = [
        Candidate(diagnosis="a", explanations=("first",), origin="initial", status="active", rank=1),
        Candidate(diagnosis="b", explanations=("second",), origin="initial", status="active", rank=2),
    ]
    existing = {("a", "first"): Unverified("precomputed")}
    log = StageLog("ref_verify")
    refs = verify_result(
        gw, templates, index, HashingEmbedder(64), candidates, existing=existing, log_=log
    )
    assert isinstance(refs[("a", "first")], Unverified)
    assert refs[("a", "first")].reason == "precomputed"
    assert refs[("b", "second")] is NOT_FOUND
    assert any("already present" in w for w in log.warnings)
