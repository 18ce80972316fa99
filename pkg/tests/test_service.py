import json
import threading

import pytest
from fastapi.testclient import TestClient

from conftest import DEMO_DIR, scripted_gateway

from cardioddx.errors import ValidationError
from cardioddx.model import STAGE_ORDER, digest_of
from cardioddx.pipeline import Pipeline
from cardioddx.runtime import RuntimeConfig, build_pipeline, demo_config_path
from cardioddx.service import DocumentStore, create_app


@pytest.fixture()
def case_payload():
    with open(DEMO_DIR / "case.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture()
def app_client(tmp_path):
    pipeline = build_pipeline(RuntimeConfig.load(demo_config_path()))
    store = DocumentStore(tmp_path / "store")
    app = create_app(pipeline, store, max_case_bytes=256 * 1024)
    return TestClient(app), store, pipeline


def submit(client, payload):
    resp = client.post("/cases", json=payload)
    assert resp.status_code == 201, resp.text
    return resp.json()["case_id"]


def read_events(resp):
    assert resp.status_code == 200, resp.text
    lines = [ln for ln in resp.text.splitlines() if ln.strip()]
    return [json.loads(ln) for ln in lines]


def run_diagnosis(client, case_id, body=None):
    resp = client.post(f"/cases/{case_id}/diagnose", json=body if body is not None else {})
    return read_events(resp)


# ------------------------------------------------------------ case intake


def test_case_submission_assigns_server_id(app_client, case_payload):
    client, store, _ = app_client
    case_id = submit(client, case_payload)
    assert case_id.startswith("case-") and len(case_id) == len("case-") + 12
    assert case_id != case_payload["case_id"]
    stored = store.get("cases", case_id)
    assert stored["client_case_id"] == case_payload["case_id"]
    assert stored["case_id"] == case_id


def test_resubmission_gets_distinct_id(app_client, case_payload):
    client, _, _ = app_client
    first = submit(client, case_payload)
    second = submit(client, case_payload)
    assert first != second


def test_bad_json_is_rejected(app_client):
    client, _, _ = app_client
    resp = client.post("/cases", content=b"{not json", headers={"content-type": "application/json"})
    assert resp.status_code == 400
    assert "invalid JSON" in resp.json()["error"]


def test_validation_failure_lists_violations(app_client, case_payload):
    client, _, _ = app_client
    payload = dict(case_payload)
    payload["note_text"] = "   "
    resp = client.post("/cases", json=payload)
    assert resp.status_code == 400
    body = resp.json()
    assert body["error"] == "case failed validation"
    assert body["violations"]


def test_oversize_payload_is_rejected(app_client, case_payload):
    client, _, _ = app_client
    payload = dict(case_payload)
    payload["note_text"] = case_payload["note_text"] + "x" * (300 * 1024)
    resp = client.post("/cases", json=payload)
    assert resp.status_code == 413


# ------------------------------------------------------------ diagnosis


def test_diagnose_streams_stages_then_result(app_client, case_payload):
    client, store, _ = app_client
    case_id = submit(client, case_payload)
    events = run_diagnosis(client, case_id)
    assert [e["event"] for e in events] == ["stage"] * 8 + ["result"]
    assert tuple(e["record"]["stage"] for e in events[:8]) == STAGE_ORDER
    terminal = events[-1]["result"]
    assert terminal["case_id"] == case_id

    stored = store.get("results", case_id)
    assert stored == terminal

    resp = client.get(f"/cases/{case_id}/result")
    assert resp.status_code == 200
    assert resp.json() == terminal


def test_diagnose_unknown_case_404(app_client):
    client, _, _ = app_client
    resp = client.post("/cases/case-000000000000/diagnose", json={})
    assert resp.status_code == 404


def test_diagnose_config_override_applies(app_client, case_payload):
    client, _, _ = app_client
    case_id = submit(client, case_payload)
    events = run_diagnosis(client, case_id, body={"use_web": False})
    records = [e["record"] for e in events if e["event"] == "stage"]
    tools = [t["tool"] for r in records for t in r["tool_calls"]]
    assert not any("web" in t for t in tools)


def test_diagnose_bad_override_400(app_client, case_payload):
    client, _, _ = app_client
    case_id = submit(client, case_payload)
    resp = client.post(f"/cases/{case_id}/diagnose", json={"no_such_knob": 1})
    assert resp.status_code == 400
    assert "bad configuration override" in resp.json()["error"]


def test_diagnose_stream_error_event_and_no_stored_result(tmp_path, case_payload):
    # Transcript covers ingest only: the stream must end with an error event
    # and nothing may be stored as a result.
    full = build_pipeline(RuntimeConfig.load(demo_config_path()))
    gateway = scripted_gateway([("contains", "tag: tabular_summarize", "Labs reviewed.")])
    pipeline = Pipeline(gateway, full.resources, full.config)
    store = DocumentStore(tmp_path / "store")
    client = TestClient(create_app(pipeline, store))

    case_id = submit(client, case_payload)
    events = read_events(client.post(f"/cases/{case_id}/diagnose", json={}))
    assert events[-1]["event"] == "error"
    assert events[-1]["stage"] == "predict"
    assert any(e["event"] == "stage" for e in events)
    assert store.get("results", case_id) is None
    resp = client.get(f"/cases/{case_id}/result")
    assert resp.status_code == 404
    assert "no result stored" in resp.json()["error"]


def test_result_unknown_vs_missing_messages(app_client, case_payload):
    client, _, _ = app_client
    resp = client.get("/cases/case-ffffffffffff/result")
    assert resp.status_code == 404
    assert "unknown case" in resp.json()["error"]

    case_id = submit(client, case_payload)
    resp = client.get(f"/cases/{case_id}/result")
    assert resp.status_code == 404
    assert "no result stored" in resp.json()["error"]


# ------------------------------------------------------------ sessions


def diagnosed_case(client, case_payload):
    case_id = submit(client, case_payload)
    run_diagnosis(client, case_id)
    return case_id


def open_session(client, case_id):
    resp = client.post("/sessions", json={"case_id": case_id})
    assert resp.status_code == 201, resp.text
    return resp.json()


def test_session_lifecycle(app_client, case_payload):
    client, _, _ = app_client
    case_id = diagnosed_case(client, case_payload)
    doc = open_session(client, case_id)
    assert doc["session_id"].startswith("session-")
    assert doc["case_id"] == case_id
    assert doc["status"] == "open"
    assert doc["turns"] == []

    got = client.get(f"/sessions/{doc['session_id']}")
    assert got.status_code == 200
    assert got.json() == doc

    closed = client.post(f"/sessions/{doc['session_id']}/close")
    assert closed.status_code == 200
    assert closed.json()["status"] == "closed"


def test_session_requires_case_id(app_client):
    client, _, _ = app_client
    assert client.post("/sessions", json={}).status_code == 400


def test_session_unknown_case_404(app_client):
    client, _, _ = app_client
    assert client.post("/sessions", json={"case_id": "case-nope00000000"}).status_code == 404


def test_session_without_result_409(app_client, case_payload):
    client, _, _ = app_client
    case_id = submit(client, case_payload)
    resp = client.post("/sessions", json={"case_id": case_id})
    assert resp.status_code == 409
    assert "no stored result" in resp.json()["error"]


def test_unknown_session_404(app_client):
    client, _, _ = app_client
    assert client.get("/sessions/session-000000000000").status_code == 404
    assert client.post("/sessions/session-000000000000/close").status_code == 404
    assert (
        client.post("/sessions/session-000000000000/instruct", json={"instruction": "x"}).status_code
        == 404
    )


INSTRUCTION = "Weight the neurologic findings ahead of the renal ones."


def test_instruct_streams_and_appends_one_turn(app_client, case_payload):
    client, store, _ = app_client
    case_id = diagnosed_case(client, case_payload)
    session = open_session(client, case_id)
    sid = session["session_id"]

    before = [c["diagnosis"] for c in store.get("results", case_id)["ranked_list"]]
    events = read_events(client.post(f"/sessions/{sid}/instruct", json={"instruction": INSTRUCTION}))
    assert [e["event"] for e in events] == ["stage", "stage", "stage", "result"]
    assert [e["record"]["stage"] for e in events[:3]] == ["self_verify", "output", "ref_verify"]

    after = [c["diagnosis"] for c in events[-1]["result"]["ranked_list"]]
    assert sorted(before) == sorted(after)
    assert before != after
    assert [i for i, (x, y) in enumerate(zip(before, after)) if x != y] == [2, 3]

    doc = client.get(f"/sessions/{sid}").json()
    assert len(doc["turns"]) == 1
    turn = doc["turns"][0]
    assert turn["instruction"] == INSTRUCTION
    assert turn["result"] == events[-1]["result"]
    assert turn["result_digest"] == digest_of(events[-1]["result"])

    # The stored diagnosis result is the baseline and must stay untouched.
    assert [c["diagnosis"] for c in store.get("results", case_id)["ranked_list"]] == before


def test_second_turn_builds_on_first(app_client, case_payload):
    client, _, _ = app_client
    case_id = diagnosed_case(client, case_payload)
    sid = open_session(client, case_id)["session_id"]

    first = read_events(client.post(f"/sessions/{sid}/instruct", json={"instruction": INSTRUCTION}))
    second = read_events(client.post(f"/sessions/{sid}/instruct", json={"instruction": INSTRUCTION}))
    doc = client.get(f"/sessions/{sid}").json()
    assert len(doc["turns"]) == 2

    # The instruction prompt embeds the ranking it starts from, so the second
    # turn's request digest proves it was built on turn one's result, not on
    # the stored baseline.
    def instruct_request_digest(events):
        calls = events[0]["record"]["llm_calls"]
        assert calls[0]["tag"] == "session_instruct"
        return calls[0]["request_digest"]

    assert instruct_request_digest(first) != instruct_request_digest(second)
    # The scripted reply pins an absolute ordering, so both turns converge on it.
    first_rank = [c["diagnosis"] for c in first[-1]["result"]["ranked_list"]]
    second_rank = [c["diagnosis"] for c in second[-1]["result"]["ranked_list"]]
    assert first_rank == second_rank


def test_instruct_empty_400(app_client, case_payload):
    client, _, _ = app_client
    case_id = diagnosed_case(client, case_payload)
    sid = open_session(client, case_id)["session_id"]
    resp = client.post(f"/sessions/{sid}/instruct", json={"instruction": "   "})
    assert resp.status_code == 400


def test_instruct_after_close_409(app_client, case_payload):
    client, _, _ = app_client
    case_id = diagnosed_case(client, case_payload)
    sid = open_session(client, case_id)["session_id"]
    client.post(f"/sessions/{sid}/close")
    resp = client.post(f"/sessions/{sid}/instruct", json={"instruction": INSTRUCTION})
    assert resp.status_code == 409
    assert "closed" in resp.json()["error"]


def test_instruct_in_flight_409(app_client, case_payload):
    client, _, pipeline = app_client
    case_id = diagnosed_case(client, case_payload)
    sid = open_session(client, case_id)["session_id"]

    started = threading.Event()
    release = threading.Event()
    real_iter_refine = pipeline.iter_refine

    def slow_iter_refine(case, prior, instruction):
        for kind, payload in real_iter_refine(case, prior, instruction):
            if kind == "stage":
                started.set()
                release.wait(timeout=10)
            yield kind, payload

    pipeline.iter_refine = slow_iter_refine
    try:
        outcome = {}

        def first_turn():
            resp = client.post(f"/sessions/{sid}/instruct", json={"instruction": INSTRUCTION})
            outcome["events"] = read_events(resp)

        worker = threading.Thread(target=first_turn)
        worker.start()
        assert started.wait(timeout=10), "first turn never started streaming"
        resp = client.post(f"/sessions/{sid}/instruct", json={"instruction": INSTRUCTION})
        assert resp.status_code == 409
        assert "in flight" in resp.json()["error"]
        release.set()
        worker.join(timeout=20)
        assert not worker.is_alive()
        assert outcome["events"][-1]["event"] == "result"
    finally:
        pipeline.iter_refine = real_iter_refine
        release.set()

    # After the first turn completes, the lock is free again.
    events = read_events(client.post(f"/sessions/{sid}/instruct", json={"instruction": INSTRUCTION}))
    assert events[-1]["event"] == "result"
    doc = client.get(f"/sessions/{sid}").json()
    assert len(doc["turns"]) == 2


# ------------------------------------------------------------ document store


def test_store_rejects_path_traversal(tmp_path):
    store = DocumentStore(tmp_path)
    for bad in ("", "../escape", ".hidden", "a/b"):
        with pytest.raises(ValidationError):
            store.put("cases", bad, {})
    assert store.get("cases", "absent") is None


def test_store_round_trip(tmp_path):
    store = DocumentStore(tmp_path)
    store.put("cases", "x", {"a": 1})
    assert store.get("cases", "x") == {"a": 1}
    store.put("cases", "x", {"a": 2})
    assert store.get("cases", "x") == {"a": 2}
