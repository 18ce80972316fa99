import json

import pytest

from cardioddx.errors import ConfigError, ValidationError
from cardioddx.risk import RiskRubric, extract_risk_variables, score_rubric
from cardioddx.runtime import packaged_data_dir
from cardioddx.tabular import TabularReport, format_lab_table, process_tabular
from cardioddx.model import LabRow
from cardioddx.trace import StageLog
from conftest import fenced, scripted_gateway

RUBRIC_DIR = packaged_data_dir() / "rubrics"


def load_rubric(rid):
    return RiskRubric.load(RUBRIC_DIR / f"{rid}.json")


def cha2ds2_assignment(**overrides):
    base = {
        "age": 70,
        "sex": "female",
        "heart_failure": True,
        "hypertension": True,
        "diabetes": False,
        "prior_stroke_tia": False,
        "vascular_disease": False,
    }
    base.update(overrides)
    return base


def test_cha2ds2_vasc_scores_known_profiles():
    rubric = load_rubric("cha2ds2_vasc")
    # 70-year-old woman, HF + HTN: 1 (age 65-74) + 1 (sex) + 1 + 1 = 4.
    score = score_rubric(rubric, cha2ds2_assignment())
    assert score.points == 4.0
    # 50-year-old man with nothing: 0 points, lowest band.
    zero = score_rubric(
        rubric,
        cha2ds2_assignment(age=50, sex="male", heart_failure=False, hypertension=False),
    )
    assert zero.points == 0.0
    assert zero.band != score.band
    # 80-year-old woman with everything: 2+1+1+1+1+2+1 = 9, the ceiling.
    maxed = score_rubric(
        rubric,
        cha2ds2_assignment(
            age=80, diabetes=True, prior_stroke_tia=True, vascular_disease=True
        ),
    )
    assert maxed.points == 9.0
    assert rubric.band_for(maxed.points) == maxed.band


def test_contributions_name_their_rules():
    rubric = load_rubric("cha2ds2_vasc")
    score = score_rubric(rubric, cha2ds2_assignment())
    labels = [c["label"] for c in score.contributions]
    assert "age 65 to 74" in labels
    assert sum(c["points"] for c in score.contributions) == score.points


def test_wells_pe_fractional_points():
    rubric = load_rubric("wells_pe")
    assignment = {
        v.name: (80 if v.type == "number" else False) for v in rubric.variables
    }
    zero = score_rubric(rubric, assignment)
    assert zero.points == 0.0
    # A single 1.5-point item moves the score fractionally.
    bumped = dict(assignment, recent_immobilization_or_surgery=True)
    assert score_rubric(rubric, bumped).points == 1.5
    # Tachycardia is scored off the numeric heart rate, not a flag.
    fast = dict(assignment, heart_rate=110)
    assert score_rubric(rubric, fast).points == 1.5
    everything = {v.name: (110 if v.type == "number" else True) for v in rubric.variables}
    assert score_rubric(rubric, everything).points == 12.5


def test_all_packaged_rubrics_validate_and_cover_range():
    for path in sorted(RUBRIC_DIR.glob("*.json")):
        rubric = RiskRubric.load(path)
        low = sum(min(0.0, float(r["points"])) for r in rubric.scoring)
        high = sum(max(0.0, float(r["points"])) for r in rubric.scoring)
        # Every reachable integer-ish score maps to exactly one band.
        step = 0.5
        score = low
        while score <= high:
            assert rubric.band_for(score)
            score += step


def test_missing_assignment_variable_raises():
    rubric = load_rubric("cha2ds2_vasc")
    with pytest.raises(ValidationError):
        score_rubric(rubric, {"age": 70})


def test_rubric_structure_validation():
    base = {
        "rubric_id": "r",
        "variables": [{"name": "x", "type": "bool"}],
        "scoring": [{"label": "x", "when": {"var": "x", "op": "==", "value": True}, "points": 1}],
        "bands": [{"min": 0, "max": 2, "label": "ok"}],
    }
    RiskRubric.from_json_dict(base)

    gap = dict(base, bands=[{"min": 0, "max": 0.5, "label": "a"}, {"min": 1, "max": 2, "label": "b"}])
    with pytest.raises(ConfigError):
        RiskRubric.from_json_dict(gap)

    short = dict(base, bands=[{"min": 0, "max": 1, "label": "a"}])  # max not above high
    with pytest.raises(ConfigError):
        RiskRubric.from_json_dict(short)

    bad_var = dict(base, scoring=[{"label": "x", "when": {"var": "zz", "op": "==", "value": 1}, "points": 1}])
    with pytest.raises(ConfigError):
        RiskRubric.from_json_dict(bad_var)

    bad_op = dict(base, scoring=[{"label": "x", "when": {"var": "x", "op": "~", "value": 1}, "points": 1}])
    with pytest.raises(ConfigError):
        RiskRubric.from_json_dict(bad_op)

    bad_type = dict(base, variables=[{"name": "x", "type": "text"}])
    with pytest.raises(ConfigError):
        RiskRubric.from_json_dict(bad_type)


def test_nested_all_any_conditions():
    rubric = RiskRubric.from_json_dict(
        {
            "rubric_id": "combo",
            "variables": [
                {"name": "a", "type": "bool"},
                {"name": "b", "type": "number"},
            ],
            "scoring": [
                {
                    "label": "combo",
                    "when": {"all": [{"var": "a", "op": "==", "value": True},
                                     {"any": [{"var": "b", "op": ">", "value": 5},
                                              {"var": "b", "op": "<", "value": -5}]}]},
                    "points": 2,
                }
            ],
            "bands": [{"min": 0, "max": 3, "label": "any"}],
        }
    )
    assert score_rubric(rubric, {"a": True, "b": 10}).points == 2.0
    assert score_rubric(rubric, {"a": True, "b": -10}).points == 2.0
    assert score_rubric(rubric, {"a": True, "b": 0}).points == 0.0
    assert score_rubric(rubric, {"a": False, "b": 10}).points == 0.0


# ------------------------------------------------------- variable extraction


def test_extract_risk_variables_validates_and_reports(templates):
    rubric = load_rubric("cha2ds2_vasc")
    reply = fenced(cha2ds2_assignment(age=200))  # age above declared max
    gw = scripted_gateway([("contains", "tag: risk_extract#cha2ds2_vasc\n", reply)])
    log = StageLog("ingest")
    assignment, failures = extract_risk_variables(gw, templates, rubric, "note text", log_=log)
    assert "age" not in assignment
    assert any("age" in f for f in failures)
    assert "sex" in assignment
    assert log.llm_calls[0].temperature == 0.0


def test_extract_risk_variables_unparseable_reply_fails_required(templates):
    rubric = load_rubric("cha2ds2_vasc")
    gw = scripted_gateway([("contains", "tag: risk_extract#cha2ds2_vasc\n", "no json here")])
    assignment, failures = extract_risk_variables(gw, templates, rubric, "note", log_=None)
    assert assignment == {}
    required = [v.name for v in rubric.variables if v.required]
    assert len(failures) == len(required)


def test_extract_rejects_type_coercion(templates):
    rubric = load_rubric("cha2ds2_vasc")
    bad = cha2ds2_assignment()
    bad["heart_failure"] = "yes"  # string, not a boolean
    gw = scripted_gateway([("contains", "tag: risk_extract#cha2ds2_vasc\n", fenced(bad))])
    assignment, failures = extract_risk_variables(gw, templates, rubric, "note", log_=None)
    assert "heart_failure" not in assignment
    assert any("heart_failure" in f for f in failures)


# ------------------------------------------------------- tabular


def lab_rows():
    return (
        LabRow(name="NT-proBNP", value="4850", unit="pg/mL", flag="H"),
        LabRow(name="Creatinine", value="2.1", unit="mg/dL", flag="H"),
        LabRow(name="Albumin", value="2.9", unit="g/dL", flag="L"),
    )


def test_format_lab_table_lists_every_row():
    listing = format_lab_table(lab_rows())
    for name in ("NT-proBNP", "Creatinine", "Albumin"):
        assert name in listing
    assert "pg/mL" in listing
    assert "(H)" in listing and "(L)" in listing


def test_process_tabular_summarizes_via_tool_call(templates):
    gw = scripted_gateway([("contains", "tag: tabular_summarize\n", "labs point to heart failure")])
    log = StageLog("ingest")
    report = process_tabular(gw, templates, lab_rows(), log_=log)
    assert isinstance(report, TabularReport)
    assert report.summary == "labs point to heart failure"
    assert report.summarized is True
    assert "NT-proBNP" in report.listing
    assert log.llm_calls[0].temperature == 0.0


def test_process_tabular_empty_rows_short_circuits(templates):
    gw = scripted_gateway([])  # must not be called
    report = process_tabular(gw, templates, (), log_=None)
    assert report.summary == ""
