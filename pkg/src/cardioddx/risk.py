"""Declarative risk rubrics: variable extraction via LLM, scoring by rules.

A rubric is data, not code: variables with validation rules, scoring
conditions with point values, and interpretation bands over the reachable
score range. Band intervals are half-open and low-inclusive, so a score on a
boundary belongs to the band that starts there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError, ParseError, ValidationError
from .gateway import ChatMessage, ChatRequest, TOOL_TEMPERATURE, extract_json_block

VARIABLE_TYPES = ("number", "bool", "enum")
_OPS = ("==", "!=", ">=", ">", "<=", "<")


@dataclass(frozen=True)
class RubricVariable:
    name: str
    type: str
    description: str = ""
    required: bool = True
    minimum: float | None = None
    maximum: float | None = None
    choices: tuple = ()

    def validate_value(self, value):
        """Return an error string, or None when the value is admissible.

        Values are never coerced: a bool must be a JSON boolean, a number a
        JSON number, an enum one of the declared choices.
        """
        if self.type == "bool":
            if not isinstance(value, bool):
                return f"{self.name}: expected a boolean, got {value!r}"
            return None
        if self.type == "number":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                return f"{self.name}: expected a number, got {value!r}"
            if self.minimum is not None and value < self.minimum:
                return f"{self.name}: {value} below minimum {self.minimum}"
            if self.maximum is not None and value > self.maximum:
                return f"{self.name}: {value} above maximum {self.maximum}"
            return None
        if self.type == "enum":
            if value not in self.choices:
                return f"{self.name}: {value!r} not in {list(self.choices)}"
            return None
        return f"{self.name}: unknown variable type {self.type!r}"


def _check_condition(cond: dict, variables: set):
    if "all" in cond:
        for sub in cond["all"]:
            _check_condition(sub, variables)
        return
    if "any" in cond:
        for sub in cond["any"]:
            _check_condition(sub, variables)
        return
    if cond.get("var") not in variables:
        raise ConfigError(f"condition references unknown variable {cond.get('var')!r}")
    if cond.get("op") not in _OPS:
        raise ConfigError(f"condition operator {cond.get('op')!r} not in {_OPS}")


def _eval_condition(cond: dict, assignment: dict) -> bool:
    if "all" in cond:
        return all(_eval_condition(sub, assignment) for sub in cond["all"])
    if "any" in cond:
        return any(_eval_condition(sub, assignment) for sub in cond["any"])
    name = cond["var"]
    if name not in assignment:
        raise ValidationError(f"assignment missing variable {name!r}")
    left = assignment[name]
    op = cond["op"]
    right = cond["value"]
    if op == "==":
        return left == right
    if op == "!=":
        return left != right
    if op == ">=":
        return left >= right
    if op == ">":
        return left > right
    if op == "<=":
        return left <= right
    return left < right


@dataclass
class RiskRubric:
    rubric_id: str
    name: str
    description: str
    variables: list
    scoring: list
    bands: list

    @classmethod
    def from_json_dict(cls, d):
        variables = []
        for v in d.get("variables", []):
            if v.get("type") not in VARIABLE_TYPES:
                raise ConfigError(f"variable {v.get('name')!r} has bad type {v.get('type')!r}")
            variables.append(
                RubricVariable(
                    name=v["name"],
                    type=v["type"],
                    description=v.get("description", ""),
                    required=v.get("required", True),
                    minimum=v.get("min"),
                    maximum=v.get("max"),
                    choices=tuple(v.get("choices", [])),
                )
            )
        rubric = cls(
            rubric_id=d["rubric_id"],
            name=d.get("name", d["rubric_id"]),
            description=d.get("description", ""),
            variables=variables,
            scoring=list(d.get("scoring", [])),
            bands=list(d.get("bands", [])),
        )
        rubric._validate_structure()
        return rubric

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def _validate_structure(self):
        names = {v.name for v in self.variables}
        if len(names) != len(self.variables):
            raise ConfigError("duplicate variable names in rubric")
        for rule in self.scoring:
            if "when" not in rule or "points" not in rule:
                raise ConfigError("each scoring rule needs 'when' and 'points'")
            _check_condition(rule["when"], names)
        low = sum(min(0.0, float(r["points"])) for r in self.scoring)
        high = sum(max(0.0, float(r["points"])) for r in self.scoring)
        if not self.bands:
            raise ConfigError("rubric needs at least one interpretation band")
        ordered = sorted(self.bands, key=lambda b: float(b["min"]))
        if ordered != self.bands:
            raise ConfigError("bands must be listed in ascending order")
        if float(self.bands[0]["min"]) > low:
            raise ConfigError("bands do not cover the lowest reachable score")
        for before, after in zip(self.bands, self.bands[1:]):
            if float(before["max"]) != float(after["min"]):
                raise ConfigError("bands must tile the score range without gaps")
        if float(self.bands[-1]["max"]) <= high:
            raise ConfigError("bands do not cover the highest reachable score")

    def band_for(self, score: float) -> str:
        for band in self.bands:
            if float(band["min"]) <= score < float(band["max"]):
                return band["label"]
        raise ValidationError(f"score {score} outside every band")


@dataclass
class RiskScore:
    rubric_id: str
    points: float
    band: str
    contributions: list = field(default_factory=list)

    def to_json_dict(self):
        return {
            "rubric_id": self.rubric_id,
            "points": self.points,
            "band": self.band,
            "contributions": list(self.contributions),
        }


def extract_risk_variables(gateway, templates, rubric: RiskRubric, note_text: str, log_=None):
    """Pull rubric variables out of a note with one LLM call at temperature 0.

    Returns (assignment, failures). Every declared variable is validated
    against its rules; failures are reported per variable and never silently
    coerced away. An unparseable reply fails every required variable.
    """
    spec_lines = []
    for v in rubric.variables:
        detail = f"- {v.name} ({v.type})"
        if v.type == "enum":
            detail += " one of: " + ", ".join(v.choices)
        if v.type == "number" and (v.minimum is not None or v.maximum is not None):
            detail += f" range [{v.minimum}, {v.maximum}]"
        if v.description:
            detail += f": {v.description}"
        spec_lines.append(detail)
    prompt = templates.render(
        "risk_extract",
        {"rubric_name": rubric.name, "variables": "\n".join(spec_lines), "note": note_text},
    )
    reply = gateway.complete(
        ChatRequest(
            messages=(ChatMessage("user", prompt),),
            temperature=TOOL_TEMPERATURE,
            tag=f"risk_extract#{rubric.rubric_id}",
        ),
        log=log_,
    )
    try:
        raw = extract_json_block(reply.text)
    except ParseError:
        failures = [f"{v.name}: not extracted (reply unparseable)" for v in rubric.variables if v.required]
        return {}, failures

    assignment = {}
    failures = []
    for v in rubric.variables:
        if v.name not in raw:
            if v.required:
                failures.append(f"{v.name}: missing from extraction")
            continue
        problem = v.validate_value(raw[v.name])
        if problem:
            failures.append(problem)
        else:
            assignment[v.name] = raw[v.name]
    if log_ is not None:
        log_.tool(
            f"risk_extract#{rubric.rubric_id}",
            {"variables": [v.name for v in rubric.variables]},
            {"assigned": sorted(assignment), "failures": failures},
        )
    return assignment, failures


def score_rubric(rubric: RiskRubric, assignment: dict) -> RiskScore:
    """Sum the points of satisfied conditions and map to a band."""
    points = 0.0
    contributions = []
    for rule in rubric.scoring:
        if _eval_condition(rule["when"], assignment):
            pts = float(rule["points"])
            points += pts
            contributions.append({"label": rule.get("label", ""), "points": pts})
    return RiskScore(
        rubric_id=rubric.rubric_id,
        points=points,
        band=rubric.band_for(points),
        contributions=contributions,
    )
