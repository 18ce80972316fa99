"""Evaluation metrics and statistics for diagnosis runs.

Everything here is a pure function. Ranked predictions come in as
{case_id: [label, ...]} (best first); gold annotations carry exactly three
diagnoses per case plus explanation snippets keyed by diagnosis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ValidationError
from .model import canonicalize_label
from .retrieval import tokenize

GOLD_DIAGNOSES_PER_CASE = 3
DEFAULT_RESAMPLES = 10_000
JACCARD_MATCH_THRESHOLD = 0.5
EXACT_TEST_MAX_N = 12

OUTCOMES = ("TP", "FP", "FN", "TN")


@dataclass(frozen=True)
class GoldAnnotation:
    case_id: str
    gold_diagnoses: tuple
    gold_explanations: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.gold_diagnoses) != GOLD_DIAGNOSES_PER_CASE:
            raise ValidationError(
                f"case {self.case_id!r}: expected {GOLD_DIAGNOSES_PER_CASE} gold diagnoses, got {len(self.gold_diagnoses)}"
            )
        for label, snippets in self.gold_explanations.items():
            if not snippets:
                raise ValidationError(f"case {self.case_id!r}: empty explanation list for {label!r}")

    @classmethod
    def from_json_dict(cls, d: dict) -> "GoldAnnotation":
        return cls(
            case_id=str(d["case_id"]),
            gold_diagnoses=tuple(canonicalize_label(x) for x in d["gold_diagnoses"]),
            gold_explanations={
                canonicalize_label(k): list(v) for k, v in d.get("gold_explanations", {}).items()
            },
        )


def load_gold_jsonl(path) -> dict:
    """One GoldAnnotation JSON object per line; returns {case_id: annotation}."""
    gold = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                ann = GoldAnnotation.from_json_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValidationError(f"gold line {line_no}: {exc}")
            if ann.case_id in gold:
                raise ValidationError(f"gold line {line_no}: duplicate case {ann.case_id!r}")
            gold[ann.case_id] = ann
    return gold


def exact_label_matcher(pred: str, gold: str) -> bool:
    return canonicalize_label(pred) == canonicalize_label(gold)


def jaccard_snippet_matcher(pred: str, gold: str, threshold: float = JACCARD_MATCH_THRESHOLD) -> bool:
    """Deterministic snippet equivalence: normalized-token Jaccard >= threshold."""
    a, b = set(tokenize(pred)), set(tokenize(gold))
    if not a and not b:
        return True
    if not a or not b:
        return False
    return len(a & b) / len(a | b) >= threshold


def _check_alignment(predictions: dict, gold: dict):
    missing = sorted(set(predictions) - set(gold))
    if missing:
        raise ValidationError(f"predictions for cases absent from gold: {missing}")


def _case_hits(pred_labels, gold_diagnoses, k, matcher):
    hit = set()
    for pred in list(pred_labels)[:k]:
        for g in gold_diagnoses:
            if g not in hit and matcher(pred, g):
                hit.add(g)
                break
    return hit


def top_k_accuracy(predictions: dict, gold: dict, k: int, matcher=exact_label_matcher) -> float:
    """Fraction of predicted cases where any top-k label matches any gold diagnosis."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    _check_alignment(predictions, gold)
    if not predictions:
        raise ValidationError("no predictions to score")
    hits = 0
    for case_id, pred_labels in predictions.items():
        ann = gold[case_id]
        if _case_hits(pred_labels, ann.gold_diagnoses, k, matcher):
            hits += 1
    return hits / len(predictions)


def per_case_hit_indicators(predictions: dict, gold: dict, k: int, matcher=exact_label_matcher) -> list:
    """0/1 per case in sorted case order; feed these to bootstrap_ci."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    _check_alignment(predictions, gold)
    return [
        1.0 if _case_hits(predictions[cid], gold[cid].gold_diagnoses, k, matcher) else 0.0
        for cid in sorted(predictions)
    ]


def correct_count_distribution(predictions: dict, gold: dict, k: int = 3, matcher=exact_label_matcher) -> dict:
    """Histogram over how many distinct gold diagnoses appear in each case's top-k."""
    _check_alignment(predictions, gold)
    histogram = {i: 0 for i in range(GOLD_DIAGNOSES_PER_CASE + 1)}
    for case_id, pred_labels in predictions.items():
        count = len(_case_hits(pred_labels, gold[case_id].gold_diagnoses, k, matcher))
        histogram[min(count, GOLD_DIAGNOSES_PER_CASE)] += 1
    return histogram


def _max_bipartite_matching(adjacency, n_right) -> int:
    """Kuhn's augmenting paths; adjacency[i] lists right-side indices."""
    match_right = [-1] * n_right

    def try_augment(i, seen):
        for j in adjacency[i]:
            if j in seen:
                continue
            seen.add(j)
            if match_right[j] == -1 or try_augment(match_right[j], seen):
                match_right[j] = i
                return True
        return False

    matched = 0
    for i in range(len(adjacency)):
        if try_augment(i, set()):
            matched += 1
    return matched


def explanation_score(pred_snippets, gold_snippets, matcher=jaccard_snippet_matcher) -> float:
    """Bipartite-match F1 between predicted and gold explanation snippets.

    Each snippet participates in at most one match; precision = matched/|pred|,
    recall = matched/|gold|.
    """
    gold_snippets = list(gold_snippets)
    if not gold_snippets:
        raise ValidationError("gold snippet list is empty")
    pred_snippets = list(pred_snippets)
    if not pred_snippets:
        return 0.0
    adjacency = [
        [j for j, g in enumerate(gold_snippets) if matcher(p, g)] for p in pred_snippets
    ]
    matched = _max_bipartite_matching(adjacency, len(gold_snippets))
    if matched == 0:
        return 0.0
    precision = matched / len(pred_snippets)
    recall = matched / len(gold_snippets)
    return 2 * precision * recall / (precision + recall)


def f1_from_pr(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def reference_metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> dict:
    """Precision/recall/F1 from confusion counts; zero denominators give 0 plus a flag."""
    for name, value in (("tp", tp), ("fp", fp), ("fn", fn), ("tn", tn)):
        if value < 0:
            raise ValidationError(f"negative confusion count {name}={value}")
    flags = []
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, flags = 0.0, flags + ["precision_undefined"]
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, flags = 0.0, flags + ["recall_undefined"]
    if precision + recall > 0:
        f1 = f1_from_pr(precision, recall)
    else:
        f1, flags = 0.0, flags + ["f1_undefined"]
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "counts": {"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        "flags": flags,
    }


def reference_metrics(labels) -> dict:
    """labels: iterable of outcome strings (or objects with .outcome) in {TP,FP,FN,TN}."""
    counts = {o: 0 for o in OUTCOMES}
    n = 0
    for label in labels:
        outcome = getattr(label, "outcome", label)
        if outcome not in counts:
            raise ValidationError(f"unknown reference outcome {outcome!r}")
        counts[outcome] += 1
        n += 1
    if n == 0:
        raise ValidationError("no reference labels")
    return reference_metrics_from_counts(counts["TP"], counts["FP"], counts["FN"], counts["TN"])


def bootstrap_ci(per_case_indicators, alpha: float = 0.05, resamples: int = DEFAULT_RESAMPLES, *, seed: int) -> tuple:
    """Seeded percentile bootstrap of the mean. Constant input collapses to a point."""
    values = np.asarray(list(per_case_indicators), dtype=float)
    if values.size == 0:
        raise ValidationError("no indicators to resample")
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    if resamples < 1:
        raise ValidationError("resamples must be >= 1")
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, values.size, size=(resamples, values.size))
    means = values[draws].mean(axis=1)
    low, high = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    return float(low), float(high)


def _rankdata(values) -> list:
    """Midranks, 1-based."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        midrank = (i + j) / 2 + 1
        for idx in order[i : j + 1]:
            ranks[idx] = midrank
        i = j + 1
    return ranks


def mann_whitney_u(sample_a, sample_b) -> tuple:
    """Two-sided Mann-Whitney U.

    Combined n <= 12: exact p by enumerating every assignment of pooled
    observations (ties handled through midranks, so the exact path stays
    correct with ties). Larger samples: normal approximation with tie
    correction and continuity correction. p is clamped into (0, 1].
    """
    a = [float(x) for x in sample_a]
    b = [float(x) for x in sample_b]
    if not a or not b:
        raise ValidationError("both samples must be non-empty")
    n_a, n_b = len(a), len(b)
    pooled = a + b
    ranks = _rankdata(pooled)
    u_a = sum(ranks[:n_a]) - n_a * (n_a + 1) / 2
    mean_u = n_a * n_b / 2

    if n_a + n_b <= EXACT_TEST_MAX_N:
        observed_dev = abs(u_a - mean_u)
        total = 0
        extreme = 0
        rank_sum_offset = n_a * (n_a + 1) / 2
        for subset in combinations(range(n_a + n_b), n_a):
            u = sum(ranks[i] for i in subset) - rank_sum_offset
            total += 1
            if abs(u - mean_u) >= observed_dev - 1e-12:
                extreme += 1
        p = extreme / total
    else:
        n = n_a + n_b
        tie_term = 0.0
        seen = {}
        for value in pooled:
            seen[value] = seen.get(value, 0) + 1
        for count in seen.values():
            tie_term += count**3 - count
        variance = (n_a * n_b / 12) * ((n + 1) - tie_term / (n * (n - 1)))
        if variance <= 0:
            return u_a, 1.0
        deviation = abs(u_a - mean_u)
        z = max(deviation - 0.5, 0.0) / math.sqrt(variance)
        p = 2 * (1 - 0.5 * (1 + math.erf(z / math.sqrt(2))))
    p = min(max(p, math.ulp(0.0)), 1.0)
    return u_a, p


def likert_summary(ratings) -> dict:
    """1-5 factuality ratings; the headline statistic is the share rated >= 4."""
    ratings = list(ratings)
    if not ratings:
        raise ValidationError("no ratings")
    counts = {i: 0 for i in range(1, 6)}
    for r in ratings:
        if not isinstance(r, int) or isinstance(r, bool) or not 1 <= r <= 5:
            raise ValidationError(f"rating {r!r} outside 1..5")
        counts[r] += 1
    share = sum(counts[i] for i in (4, 5)) / len(ratings)
    return {
        "share_ge_4": share,
        "counts": counts,
        "mean": sum(ratings) / len(ratings),
    }


def mean_explanation_score(predictions_expl: dict, gold: dict, matcher=jaccard_snippet_matcher) -> float:
    """Mean over every (case, gold diagnosis) pair; a gold diagnosis the
    prediction never explained scores 0 for that pair."""
    _check_alignment(predictions_expl, gold)
    scores = []
    for case_id, per_diag in predictions_expl.items():
        ann = gold[case_id]
        for diagnosis in ann.gold_diagnoses:
            gold_snips = ann.gold_explanations.get(diagnosis)
            if not gold_snips:
                continue
            pred_snips = per_diag.get(diagnosis, [])
            scores.append(explanation_score(pred_snips, gold_snips, matcher) if pred_snips else 0.0)
    if not scores:
        raise ValidationError("gold annotations carry no explanation snippets")
    return sum(scores) / len(scores)


def build_report(predictions: dict, gold: dict, *, seed: int = 20240501, resamples: int = DEFAULT_RESAMPLES) -> dict:
    """Full evaluation report over ranked label predictions."""
    top1 = top_k_accuracy(predictions, gold, 1)
    top3 = top_k_accuracy(predictions, gold, 3)
    ci1 = bootstrap_ci(per_case_hit_indicators(predictions, gold, 1), seed=seed, resamples=resamples)
    ci3 = bootstrap_ci(per_case_hit_indicators(predictions, gold, 3), seed=seed, resamples=resamples)
    return {
        "cases": len(predictions),
        "top1_accuracy": top1,
        "top1_ci95": list(ci1),
        "top3_accuracy": top3,
        "top3_ci95": list(ci3),
        "correct_count_distribution": correct_count_distribution(predictions, gold),
        "seed": seed,
        "resamples": resamples,
    }


def render_report(report: dict) -> str:
    dist = report["correct_count_distribution"]
    lines = [
        f"cases evaluated   {report['cases']}",
        "metric            value    95% CI",
        f"top-1 accuracy    {report['top1_accuracy']:.3f}    [{report['top1_ci95'][0]:.3f}, {report['top1_ci95'][1]:.3f}]",
        f"top-3 accuracy    {report['top3_accuracy']:.3f}    [{report['top3_ci95'][0]:.3f}, {report['top3_ci95'][1]:.3f}]",
        "correct diagnoses in top-3:",
    ]
    for count in sorted(dist):
        lines.append(f"  {count} correct        {dist[count]} case(s)")
    return "\n".join(lines)
