"""Metrics against gold annotations, at criterion and trial level.

Gold annotations carry, per criterion, whether it is screenable from the
patient summary (closed-world for disease-related facts, open-world for
everything else) and its correct label; per trial, whether the patient is
truly eligible. From a screening run and such annotations this module
computes: the screenability confusion, label accuracy on correctly
selected criteria, the dropout-criterion confusion with its false
positives attributed to their screenability cell, the trial-level
confusion, tallies of human-audited reasoning error patterns, workload
reduction, and the trial metrics after a simulated perfect review (every
false dropout rejected, manual trials resolved to gold).

Ratios are reported both as exact fractions and as 4-decimal roundings so
golden files stay stable across platforms. Every operation is pure.
"""
from __future__ import annotations

import statistics
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, ConfigDict, ValidationError

from prescreen.ioutil import read_jsonl
from prescreen.model import (
    CriterionKey,
    EligibilityLabel,
    VerdictValue,
    is_dropout,
)
from prescreen.engine import ScreeningRun, TrialScreeningResult


class EvaluationError(Exception):
    pass


class ErrorPattern(str, Enum):
    D = "D"  # incorrect reasoning step
    E = "E"  # correct reasoning, wrong conclusion
    F = "F"  # hallucinated patient information
    NONE = "none"


class GoldCriterion(BaseModel):
    model_config = ConfigDict(frozen=True)

    key: CriterionKey
    gold_screenable: bool
    gold_label: EligibilityLabel = EligibilityLabel.UNKNOWN
    error_pattern: ErrorPattern = ErrorPattern.NONE

    @property
    def gold_dropout(self) -> bool:
        return is_dropout(self.key.section, self.gold_label)


class GoldTrial(BaseModel):
    model_config = ConfigDict(frozen=True)

    trial_id: str
    gold_eligible: bool


class GoldAnnotations(BaseModel):
    """Lookup tables over gold criterion and trial records."""

    model_config = ConfigDict(frozen=True)

    criteria: dict[str, GoldCriterion]  # keyed by CriterionKey ref
    trials: dict[str, GoldTrial]

    @classmethod
    def from_records(
        cls, criteria: Sequence[GoldCriterion], trials: Sequence[GoldTrial]
    ) -> "GoldAnnotations":
        return cls(
            criteria={c.key.as_ref(): c for c in criteria},
            trials={t.trial_id: t for t in trials},
        )

    @classmethod
    def load(cls, path: Path | str) -> "GoldAnnotations":
        """Line-delimited records: {"kind": "criterion", "key": ref, ...}
        and {"kind": "trial", "trial_id": ..., "gold_eligible": ...}."""
        criteria: list[GoldCriterion] = []
        trials: list[GoldTrial] = []
        for lineno, raw in read_jsonl(path):
            kind = raw.get("kind")
            try:
                if kind == "criterion":
                    criteria.append(
                        GoldCriterion(
                            key=CriterionKey.from_ref(raw["key"]),
                            gold_screenable=raw["gold_screenable"],
                            gold_label=raw.get("gold_label", "unknown"),
                            error_pattern=raw.get("error_pattern", "none"),
                        )
                    )
                elif kind == "trial":
                    trials.append(
                        GoldTrial(trial_id=raw["trial_id"], gold_eligible=raw["gold_eligible"])
                    )
                else:
                    raise ValueError(f"unknown record kind {kind!r}")
            except (KeyError, ValueError, ValidationError) as exc:
                raise EvaluationError(f"{path} line {lineno}: {exc}") from exc
        return cls.from_records(criteria, trials)

    def criterion(self, key: CriterionKey) -> GoldCriterion:
        ref = key.as_ref()
        entry = self.criteria.get(ref)
        if entry is None:
            raise EvaluationError(f"no gold annotation for criterion {ref}")
        return entry

    def trial(self, trial_id: str) -> GoldTrial:
        entry = self.trials.get(trial_id)
        if entry is None:
            raise EvaluationError(f"no gold annotation for trial {trial_id}")
        return entry


def _round4(value: float) -> float:
    return round(value, 4)


class Ratio(BaseModel):
    model_config = ConfigDict(frozen=True)

    numerator: int
    denominator: int
    value: Optional[float]
    fraction: str

    @classmethod
    def of(cls, numerator: int, denominator: int) -> "Ratio":
        return cls(
            numerator=numerator,
            denominator=denominator,
            value=_round4(numerator / denominator) if denominator else None,
            fraction=f"{numerator}/{denominator}",
        )


class ConfusionMatrix(BaseModel):
    model_config = ConfigDict(frozen=True)

    tp: int
    fp: int
    fn: int
    tn: int
    precision: Optional[float]
    recall: Optional[float]
    accuracy: Optional[float]
    precision_fraction: Optional[str]
    recall_fraction: Optional[str]
    accuracy_fraction: Optional[str]

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "ConfusionMatrix":
        total = tp + fp + fn + tn
        return cls(
            tp=tp,
            fp=fp,
            fn=fn,
            tn=tn,
            precision=_round4(tp / (tp + fp)) if tp + fp else None,
            recall=_round4(tp / (tp + fn)) if tp + fn else None,
            accuracy=_round4((tp + tn) / total) if total else None,
            precision_fraction=f"{tp}/{tp + fp}" if tp + fp else None,
            recall_fraction=f"{tp}/{tp + fn}" if tp + fn else None,
            accuracy_fraction=f"{tp + tn}/{total}" if total else None,
        )

    @property
    def population(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _evaluated_assessments(run: ScreeningRun):
    for result in run.evaluated_results():
        for assessment in result.assessments:
            yield assessment


def screenability_confusion(run: ScreeningRun, gold: GoldAnnotations) -> ConfusionMatrix:
    """Predicted-screenable vs gold-screenable over all evaluated criteria."""
    tp = fp = fn = tn = 0
    for assessment in _evaluated_assessments(run):
        entry = gold.criterion(assessment.key)
        if assessment.screenable and entry.gold_screenable:
            tp += 1
        elif assessment.screenable:
            fp += 1
        elif entry.gold_screenable:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix.from_counts(tp, fp, fn, tn)


def criterion_accuracy(run: ScreeningRun, gold: GoldAnnotations) -> Ratio:
    """Label accuracy on the criteria that were correctly picked as screenable."""
    correct = total = 0
    for assessment in _evaluated_assessments(run):
        entry = gold.criterion(assessment.key)
        if assessment.screenable and entry.gold_screenable:
            total += 1
            if assessment.label is entry.gold_label:
                correct += 1
    return Ratio.of(correct, total)


class DropoutFpBySource(BaseModel):
    model_config = ConfigDict(frozen=True)

    from_tp_screenable: int
    from_fp_screenable: int


def dropout_confusion(
    run: ScreeningRun, gold: GoldAnnotations
) -> tuple[ConfusionMatrix, DropoutFpBySource]:
    """Dropout-vs-gold-dropout confusion, with FPs split by screenability cell.

    A predicted dropout implies a met/not-met label, which only selected
    criteria can carry, so every false positive comes from a criterion
    predicted screenable: either rightly (TP cell, bad label) or wrongly
    (FP cell, unscreenable criterion labeled anyway).
    """
    tp = fp = fn = tn = 0
    fp_tp_cell = fp_fp_cell = 0
    for assessment in _evaluated_assessments(run):
        entry = gold.criterion(assessment.key)
        if assessment.dropout and entry.gold_dropout:
            tp += 1
        elif assessment.dropout:
            fp += 1
            if entry.gold_screenable:
                fp_tp_cell += 1
            else:
                fp_fp_cell += 1
        elif entry.gold_dropout:
            fn += 1
        else:
            tn += 1
    return (
        ConfusionMatrix.from_counts(tp, fp, fn, tn),
        DropoutFpBySource(from_tp_screenable=fp_tp_cell, from_fp_screenable=fp_fp_cell),
    )


def _predicted_eligible(result: TrialScreeningResult) -> bool:
    return result.verdict.value is VerdictValue.PREDICTED_ELIGIBLE


def trial_confusion(run: ScreeningRun, gold: GoldAnnotations) -> ConfusionMatrix:
    """Eligibility confusion over evaluated trials (manual ones excluded)."""
    tp = fp = fn = tn = 0
    for result in run.evaluated_results():
        eligible = gold.trial(result.trial_id).gold_eligible
        if _predicted_eligible(result) and eligible:
            tp += 1
        elif _predicted_eligible(result):
            fp += 1
        elif eligible:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix.from_counts(tp, fp, fn, tn)


def error_pattern_tally(
    run: ScreeningRun, gold: GoldAnnotations
) -> dict[str, dict[str, int]]:
    """Audited reasoning-error patterns grouped by screenability cell.

    Patterns (D incorrect reasoning step, E correct reasoning with wrong
    conclusion, F hallucinated patient information) are assigned by human
    audit in the gold file; this only counts them per cell of the
    screenability confusion the run actually produced.
    """
    tally: dict[str, dict[str, int]] = {}
    for assessment in _evaluated_assessments(run):
        entry = gold.criterion(assessment.key)
        if entry.error_pattern is ErrorPattern.NONE:
            continue
        if assessment.screenable and entry.gold_screenable:
            cell = "TP"
        elif assessment.screenable:
            cell = "FP"
        elif entry.gold_screenable:
            cell = "FN"
        else:
            cell = "TN"
        cell_tally = tally.setdefault(cell, {})
        cell_tally[entry.error_pattern.value] = cell_tally.get(entry.error_pattern.value, 0) + 1
    return tally


class AssistedMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    recall_after_oracle_review: Optional[float]
    precision_after_oracle_review: Optional[float]
    recall_fraction: Optional[str]
    precision_fraction: Optional[str]


def assisted_metrics(run: ScreeningRun, gold: GoldAnnotations) -> AssistedMetrics:
    """Trial metrics after a perfect review session.

    Simulates a reviewer who rejects exactly the dropouts whose gold
    dropout status is false and resolves every manual trial to its gold
    eligibility, then recomputes the trial confusion over all trials.
    Recall is 1.0 by construction: a gold-eligible trial has no gold
    dropouts, so all its predicted dropouts get rejected.
    """
    tp = fp = fn = tn = 0
    for result in run.results:
        eligible = gold.trial(result.trial_id).gold_eligible
        if result.verdict.value is VerdictValue.MANUAL_ROUTE:
            predicted_eligible = eligible
        else:
            surviving = [
                a
                for a in result.assessments
                if a.dropout and gold.criterion(a.key).gold_dropout
            ]
            predicted_eligible = not surviving
        if predicted_eligible and eligible:
            tp += 1
        elif predicted_eligible:
            fp += 1
        elif eligible:
            fn += 1
        else:
            tn += 1
    matrix = ConfusionMatrix.from_counts(tp, fp, fn, tn)
    return AssistedMetrics(
        recall_after_oracle_review=matrix.recall,
        precision_after_oracle_review=matrix.precision,
        recall_fraction=matrix.recall_fraction,
        precision_fraction=matrix.precision_fraction,
    )


class EvaluationWorkload(BaseModel):
    model_config = ConfigDict(frozen=True)

    queued_criteria: int
    total_criteria: int
    fraction: float
    manual_trials: int


def _workload(run: ScreeningRun) -> EvaluationWorkload:
    # derived from assessments directly so screened-but-unreviewed runs evaluate too
    total = sum(len(r.assessments) for r in run.evaluated_results())
    queued = sum(len(r.dropout_keys) for r in run.evaluated_results())
    return EvaluationWorkload(
        queued_criteria=queued,
        total_criteria=total,
        fraction=_round4(queued / total) if total else 0.0,
        manual_trials=len(run.manual_results()),
    )


class EvaluationReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    run_id: str
    profile_id: str
    screenability: ConfusionMatrix
    criterion_accuracy_on_tp_screenable: Ratio
    dropout: ConfusionMatrix
    dropout_fp_by_source: DropoutFpBySource
    trial: ConfusionMatrix
    error_patterns: dict[str, dict[str, int]]
    workload: EvaluationWorkload
    assisted: AssistedMetrics


class WorkloadReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    run_id: str
    profile_id: str
    workload: EvaluationWorkload


def evaluate(run: ScreeningRun, gold: Optional[GoldAnnotations] = None):
    """Full EvaluationReport with gold, workload-only report without."""
    if gold is None:
        return WorkloadReport(run_id=run.run_id, profile_id=run.profile_id, workload=_workload(run))
    dropout, fp_by_source = dropout_confusion(run, gold)
    return EvaluationReport(
        run_id=run.run_id,
        profile_id=run.profile_id,
        screenability=screenability_confusion(run, gold),
        criterion_accuracy_on_tp_screenable=criterion_accuracy(run, gold),
        dropout=dropout,
        dropout_fp_by_source=fp_by_source,
        trial=trial_confusion(run, gold),
        error_patterns=error_pattern_tally(run, gold),
        workload=_workload(run),
        assisted=assisted_metrics(run, gold),
    )


def _fmt(value: Optional[float], fraction: Optional[str]) -> str:
    if value is None:
        return "n/a"
    return f"{value:.4f} ({fraction})"


def render_report(report) -> str:
    """Plain-text table of a report, one metric block per level."""
    lines = [f"run {report.run_id}  profile {report.profile_id}"]
    if isinstance(report, WorkloadReport):
        w = report.workload
        lines.append(
            f"workload: {w.queued_criteria}/{w.total_criteria} criteria queued "
            f"({w.fraction:.4f}), manual trials {w.manual_trials}"
        )
        return "\n".join(lines) + "\n"
    s = report.screenability
    lines.append("screenability (criterion level)")
    lines.append(f"  TP {s.tp}  FP {s.fp}  FN {s.fn}  TN {s.tn}")
    lines.append(f"  accuracy {_fmt(s.accuracy, s.accuracy_fraction)}")
    acc = report.criterion_accuracy_on_tp_screenable
    lines.append(f"label accuracy on correctly selected criteria: {_fmt(acc.value, acc.fraction)}")
    d = report.dropout
    src = report.dropout_fp_by_source
    lines.append("dropout criteria")
    lines.append(f"  TP {d.tp}  FP {d.fp}  FN {d.fn}  TN {d.tn}")
    lines.append(
        f"  false positives: {src.from_tp_screenable} from correctly selected, "
        f"{src.from_fp_screenable} from wrongly selected criteria"
    )
    if report.error_patterns:
        lines.append("reasoning error patterns by screenability cell")
        for cell in sorted(report.error_patterns):
            counts = report.error_patterns[cell]
            joined = "  ".join(f"{p}={counts[p]}" for p in sorted(counts))
            lines.append(f"  {cell}: {joined}")
    t = report.trial
    lines.append("trial level (manual-review trials excluded)")
    lines.append(f"  TP {t.tp}  FP {t.fp}  FN {t.fn}  TN {t.tn}")
    lines.append(
        f"  precision {_fmt(t.precision, t.precision_fraction)}  "
        f"recall {_fmt(t.recall, t.recall_fraction)}"
    )
    w = report.workload
    lines.append(
        f"workload: {w.queued_criteria}/{w.total_criteria} criteria queued "
        f"({w.fraction:.4f}), manual trials {w.manual_trials}"
    )
    a = report.assisted
    lines.append(
        f"after oracle review: recall {_fmt(a.recall_after_oracle_review, a.recall_fraction)}  "
        f"precision {_fmt(a.precision_after_oracle_review, a.precision_fraction)}"
    )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Stochasticity across repeated runs


class MetricSeries(BaseModel):
    model_config = ConfigDict(frozen=True)

    points: tuple[Optional[float], ...]
    mean: Optional[float]
    std: Optional[float]  # sample standard deviation (n-1)

    @classmethod
    def of(cls, points: Sequence[Optional[float]]) -> "MetricSeries":
        present = [p for p in points if p is not None]
        mean = _round4(statistics.mean(present)) if present else None
        std = _round4(statistics.stdev(present)) if len(present) >= 2 else None
        return cls(points=tuple(points), mean=mean, std=std)


class StochasticityGroup(BaseModel):
    model_config = ConfigDict(frozen=True)

    profile_id: str
    temperature: float
    n_runs: int
    metrics: dict[str, MetricSeries]


class StochasticityReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    groups: tuple[StochasticityGroup, ...]


def stochasticity(runs: Sequence[ScreeningRun], gold: GoldAnnotations) -> StochasticityReport:
    """Per (profile, temperature) spread of step-1 and trial-level metrics.

    Runs are grouped by profile and sampling temperature; each group
    reports every run's screenability precision/recall and trial
    precision/recall plus their mean and sample (n-1) standard deviation.
    """
    grouped: dict[tuple[str, float], list[ScreeningRun]] = {}
    for run in runs:
        grouped.setdefault((run.profile_id, run.params.temperature), []).append(run)
    groups = []
    for (profile_id, temperature), members in sorted(grouped.items()):
        series: dict[str, list[Optional[float]]] = {
            "screenability_precision": [],
            "screenability_recall": [],
            "trial_precision": [],
            "trial_recall": [],
        }
        for run in members:
            s = screenability_confusion(run, gold)
            t = trial_confusion(run, gold)
            series["screenability_precision"].append(s.precision)
            series["screenability_recall"].append(s.recall)
            series["trial_precision"].append(t.precision)
            series["trial_recall"].append(t.recall)
        groups.append(
            StochasticityGroup(
                profile_id=profile_id,
                temperature=temperature,
                n_runs=len(members),
                metrics={name: MetricSeries.of(points) for name, points in series.items()},
            )
        )
    return StochasticityReport(groups=tuple(groups))
