"""
NIL prediction and TAC-style scoring
Metric definitions are reconstructions of the TAC entity-linking scorer; the
"micro" column is the per-gold-entity average precision.
"""

from collections import defaultdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from .errors import EvaluationError, InputValidationError
from .jsonl import iter_jsonl, write_jsonl
from .schemas import NIL, EvaluationReport, Mention, MetricSet, Prediction

OTHER_TYPE = "OTHER"
TABLE_HEADER = (
    "metrics: reconstructed TAC-style definitions; "
    "micro = per-gold-entity average precision"
)

Scorer = Callable[[str], float]


def predict_with_nil(
    scorer: Scorer,
    mention_id: str,
    candidate_ids: Sequence[str],
    threshold: float = -1.0,
) -> Prediction:
    """
    Argmax over candidate scores (ties go to the smallest id); NIL when there are
    no candidates or the best score is strictly below the threshold.
    """
    if not -1.0 <= threshold <= 1.0:
        raise InputValidationError(f"threshold must be in [-1, 1], got {threshold}")
    best_id, best_score = None, None
    for entity_id in sorted(set(candidate_ids)):
        score = float(scorer(entity_id))
        if best_score is None or score > best_score:
            best_id, best_score = entity_id, score
    if best_id is None:
        return Prediction(mention_id=mention_id)
    predicted = NIL if best_score < threshold else best_id
    return Prediction(
        mention_id=mention_id,
        predicted=predicted,
        score=best_score,
        best_entity=best_id,
    )


def apply_threshold(
    predictions: Sequence[Prediction], threshold: float
) -> List[Prediction]:
    """Relabel stored predictions under a new threshold without rescoring."""
    relabelled = []
    for p in predictions:
        best = p.best_entity or (None if p.is_nil else p.predicted)
        if p.score is None or best is None:
            relabelled.append(p.model_copy(update={"predicted": NIL}))
            continue
        predicted = NIL if p.score < threshold else best
        update = {"predicted": predicted, "best_entity": best}
        relabelled.append(p.model_copy(update=update))
    return relabelled


# ── metrics ───────────────────────────────────────────────────────────────────


def _ratio(num: int, den: int, name: str, undefined: List[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _metric_set(pairs: Sequence[Tuple[str, str]]) -> MetricSet:
    undefined: List[str] = []
    n = len(pairs)
    gold_non_nil = [(g, p) for g, p in pairs if g != NIL]
    correct = sum(1 for g, p in gold_non_nil if p == g)
    predicted_non_nil = sum(1 for _, p in pairs if p != NIL)
    nn_predicted_non_nil = sum(1 for _, p in gold_non_nil if p != NIL)

    precision = _ratio(correct, predicted_non_nil, "precision", undefined)
    recall = _ratio(correct, len(gold_non_nil), "recall", undefined)
    nn_precision = _ratio(correct, nn_predicted_non_nil, "nn_precision", undefined)
    nn_recall = _ratio(correct, len(gold_non_nil), "nn_recall", undefined)

    per_entity: Dict[str, List[bool]] = defaultdict(list)
    for g, p in gold_non_nil:
        per_entity[g].append(p == g)
    if per_entity:
        entity_avg = float(np.mean([np.mean(hits) for hits in per_entity.values()]))
    else:
        entity_avg = 0.0
        undefined.append("entity_avg_precision")

    exact = sum(1 for g, p in pairs if g == p)
    accuracy = _ratio(exact, n, "mention_accuracy", undefined)
    return MetricSet(
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        nn_precision=nn_precision,
        nn_recall=nn_recall,
        nn_f1=_f1(nn_precision, nn_recall),
        entity_avg_precision=entity_avg,
        mention_accuracy=accuracy,
        n_mentions=n,
        n_gold_nil=n - len(gold_non_nil),
        n_predicted_nil=n - predicted_non_nil,
        undefined=undefined,
    )


def _align(
    gold: Sequence[Mention], predictions: Sequence[Prediction]
) -> Dict[str, Prediction]:
    by_id: Dict[str, Prediction] = {}
    duplicates = set()
    for p in predictions:
        if p.mention_id in by_id:
            duplicates.add(p.mention_id)
        by_id[p.mention_id] = p
    gold_ids = {m.id for m in gold}
    missing = sorted(gold_ids - by_id.keys())
    extra = sorted(by_id.keys() - gold_ids)
    problems = []
    if missing:
        problems.append(f"missing predictions for: {', '.join(missing)}")
    if extra:
        problems.append(f"predictions for unknown mentions: {', '.join(extra)}")
    if duplicates:
        duplicated = ", ".join(sorted(duplicates))
        problems.append(f"duplicate predictions for: {duplicated}")
    if problems:
        raise EvaluationError("; ".join(problems))
    return by_id


def breakdown_by_type(
    gold: Sequence[Mention], predictions: Sequence[Prediction]
) -> Dict[str, MetricSet]:
    by_id = _align(gold, predictions)
    groups: Dict[str, List[Tuple[str, str]]] = defaultdict(list)
    for m in gold:
        groups[m.mention_type or OTHER_TYPE].append((m.gold, by_id[m.id].predicted))
    return {t: _metric_set(pairs) for t, pairs in sorted(groups.items())}


def evaluate(
    gold: Sequence[Mention], predictions: Sequence[Prediction]
) -> EvaluationReport:
    """Score predictions that cover exactly the gold mention ids."""
    by_id = _align(gold, predictions)
    overall = _metric_set([(m.gold, by_id[m.id].predicted) for m in gold])
    per_type = breakdown_by_type(gold, predictions)
    return EvaluationReport(**overall.model_dump(), per_type=per_type)


def select_threshold(
    gold: Sequence[Mention],
    predictions: Sequence[Prediction],
    grid: Optional[Sequence[float]] = None,
) -> Tuple[float, EvaluationReport]:
    """Threshold from the grid with the best F1 (lowest threshold on ties)."""
    if grid is None:
        grid = np.round(np.linspace(-1.0, 1.0, 41), 2).tolist()
    best: Optional[Tuple[float, EvaluationReport]] = None
    for tau in sorted(grid):
        report = evaluate(gold, apply_threshold(predictions, tau))
        if best is None or report.f1 > best[1].f1:
            best = (float(tau), report)
    if best is None:
        raise InputValidationError("threshold grid is empty")
    return best


def _average_sets(sets: Sequence[MetricSet]) -> dict:
    fields = [
        "precision",
        "recall",
        "f1",
        "nn_precision",
        "nn_recall",
        "nn_f1",
        "entity_avg_precision",
        "mention_accuracy",
    ]
    counts = ["n_mentions", "n_gold_nil", "n_predicted_nil"]
    values = {f: float(np.mean([getattr(s, f) for s in sets])) for f in fields}
    for c in counts:
        values[c] = int(round(np.mean([getattr(s, c) for s in sets])))
    values["undefined"] = sorted({u for s in sets for u in s.undefined})
    return values


def average_reports(reports: Sequence[EvaluationReport]) -> EvaluationReport:
    """Mean of each metric over several runs; per-type groups shared by all runs."""
    if not reports:
        raise InputValidationError("no reports to average")
    shared = set(reports[0].per_type)
    for r in reports[1:]:
        shared &= set(r.per_type)
    per_type = {
        t: MetricSet(**_average_sets([r.per_type[t] for r in reports]))
        for t in sorted(shared)
    }
    return EvaluationReport(**_average_sets(reports), per_type=per_type)


def format_table(report: EvaluationReport, title: str = "all") -> str:
    """Aligned plain-text table: micro, p, r, F1, nn F1."""
    columns = ["micro", "p", "r", "F1", "nn F1", "n"]
    rows = [(title, report)] + [(t, m) for t, m in report.per_type.items()]
    width = max(len(name) for name, _ in rows) + 2
    lines = [TABLE_HEADER, "".ljust(width) + "".join(c.rjust(8) for c in columns)]
    for name, m in rows:
        values = [m.entity_avg_precision, m.precision, m.recall, m.f1, m.nn_f1]
        cells = "".join(f"{v:8.3f}" for v in values)
        lines.append(name.ljust(width) + cells + f"{m.n_mentions:8d}")
    if report.undefined:
        names = ", ".join(report.undefined)
        lines.append(f"undefined (zero denominator, reported as 0): {names}")
    return "\n".join(lines)


def write_predictions(path: Path, predictions: Sequence[Prediction]) -> int:
    return write_jsonl(path, predictions)


def load_predictions(path: Path) -> List[Prediction]:
    predictions = []
    for line_no, obj in iter_jsonl(path, EvaluationError):
        try:
            predictions.append(Prediction.model_validate(obj))
        except ValidationError as e:
            raise EvaluationError(
                f"{path}:{line_no}: invalid prediction record"
            ) from e
    return predictions
