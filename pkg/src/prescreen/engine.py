"""Screening orchestration: prefilter, parse, prompt, label, verdict, review.

screen() runs the whole per-patient workflow over a set of trials and
returns a ScreeningRun. Each trial is independent: its eligibility text is
parsed into criteria (failure routes the trial to manual review), a
selection prompt picks the screenable criteria, each selected criterion
gets a reasoning call and a labeling call, unselected criteria become
explicit unknown assessments, and the verdict falls out of the dropout
rule. A backend failure anywhere turns that one trial into
manual_route(pipeline_error) without stopping the run.

The run then moves through a small state machine: screened, in_review
(once the review queue is built), finalized (once every queued dropout and
every manual trial has a physician decision). Every mutation bumps the
run's version counter; apply_decisions validates an entire batch before
touching anything, so a bad decision leaves the run unchanged.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, ConfigDict, model_validator

from prescreen import gateway
from prescreen.gateway import (
    BackendError,
    BackendKind,
    CompletionBackend,
    LabelParseError,
    ModelParams,
    PromptTemplates,
)
from prescreen.ioutil import atomic_write, canonical_json, read_jsonl, sha256_hex, write_jsonl
from prescreen.model import (
    ContractViolation,
    Criterion,
    CriterionAssessment,
    CriterionKey,
    EligibilityLabel,
    ManualReason,
    PatientProfile,
    Provenance,
    Section,
    TrialRecord,
    TrialVerdict,
    VerdictValue,
    all_unknown,
    demographic_prefilter,
    is_dropout,
    trial_verdict,
)
from prescreen.parsing import ParseFailure, ParserRules, load_rules, parse_trial


class EngineError(Exception):
    pass


class StateError(EngineError):
    """Operation applied in a run state that does not allow it."""


class VersionConflict(EngineError):
    """The run changed since the caller last read it; nothing was applied."""


class DecisionError(EngineError):
    """A decision batch failed validation; nothing was applied."""


class RunState(str, Enum):
    SCREENED = "screened"
    IN_REVIEW = "in_review"
    FINALIZED = "finalized"


class ReviewAction(str, Enum):
    CONFIRM_DROPOUT = "confirm_dropout"
    REJECT_DROPOUT = "reject_dropout"
    CONFIRM_TRIAL_ELIGIBLE = "confirm_trial_eligible"
    CONFIRM_TRIAL_INELIGIBLE = "confirm_trial_ineligible"


CRITERION_ACTIONS = {ReviewAction.CONFIRM_DROPOUT, ReviewAction.REJECT_DROPOUT}
TRIAL_ACTIONS = {ReviewAction.CONFIRM_TRIAL_ELIGIBLE, ReviewAction.CONFIRM_TRIAL_INELIGIBLE}


class ReviewDecision(BaseModel):
    """One physician call: on a queued dropout criterion or a manual trial.

    ``target`` is a criterion ref ("trial:section:ordinal") for criterion
    actions and a trial_id for trial actions. reject_dropout carries the
    corrected label, which must not itself be a dropout for that section;
    omitted it defaults to unknown.
    """

    model_config = ConfigDict(frozen=True)

    target: str
    action: ReviewAction
    reviewer_id: str
    note: str = ""
    corrected_label: Optional[EligibilityLabel] = None
    timestamp: datetime = datetime(1970, 1, 1, tzinfo=timezone.utc)

    @model_validator(mode="after")
    def _check(self) -> "ReviewDecision":
        if not self.reviewer_id:
            raise ValueError("reviewer_id must be non-empty")
        if self.corrected_label is not None and self.action is not ReviewAction.REJECT_DROPOUT:
            raise ValueError("corrected_label only applies to reject_dropout")
        return self


class QueueItem(BaseModel):
    model_config = ConfigDict(frozen=True)

    criterion: Criterion
    assessment: CriterionAssessment
    profile_summary_ref: str


class ManualTrialEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    trial_id: str
    reason: ManualReason
    title: str = ""


class ReviewQueue(BaseModel):
    model_config = ConfigDict(frozen=True)

    run_id: str
    items: tuple[QueueItem, ...]
    manual_trials: tuple[ManualTrialEntry, ...]


class TrialScreeningResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    trial_id: str
    title: str = ""
    verdict: TrialVerdict
    assessments: tuple[CriterionAssessment, ...] = ()
    criteria: tuple[Criterion, ...] = ()
    dropout_keys: tuple[CriterionKey, ...] = ()
    diagnostics: tuple[str, ...] = ()
    all_unknown: bool = False
    resolved_verdict: Optional[VerdictValue] = None

    @model_validator(mode="after")
    def _check(self) -> "TrialScreeningResult":
        expected = tuple(a.key for a in self.assessments if a.dropout)
        if self.dropout_keys != expected:
            raise ValueError("dropout_keys must list exactly the dropped assessments, in order")
        if self.verdict.value is not VerdictValue.MANUAL_ROUTE:
            if self.verdict != trial_verdict(list(self.assessments)):
                raise ValueError("verdict inconsistent with assessments")
        return self


class WorkloadStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    queued_criteria: int
    total_criteria: int
    fraction: float
    manual_trials: int


class ScreeningRun(BaseModel):
    run_id: str
    profile_id: str
    params: ModelParams
    backend_kind: BackendKind
    results: tuple[TrialScreeningResult, ...] = ()
    state: RunState = RunState.SCREENED
    version: int = 1
    created_at: datetime = datetime(1970, 1, 1, tzinfo=timezone.utc)
    diagnostics: tuple[str, ...] = ()
    queue: Optional[ReviewQueue] = None
    decisions: tuple[ReviewDecision, ...] = ()

    def result_for(self, trial_id: str) -> TrialScreeningResult:
        for result in self.results:
            if result.trial_id == trial_id:
                return result
        raise KeyError(trial_id)

    def evaluated_results(self) -> list[TrialScreeningResult]:
        return [r for r in self.results if r.verdict.value is not VerdictValue.MANUAL_ROUTE]

    def manual_results(self) -> list[TrialScreeningResult]:
        return [r for r in self.results if r.verdict.value is VerdictValue.MANUAL_ROUTE]


class EngineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_size: int = 20
    token_budget: int = 2000
    max_parallel: int = 4
    apply_prefilter: bool = True
    combined_reasoning: bool = False
    templates_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "EngineConfig":
        if self.batch_size < 1 or self.max_parallel < 1:
            raise ValueError("batch_size and max_parallel must be >= 1")
        return self


# ---------------------------------------------------------------------------
# Screening


def _derive_run_id(profile: PatientProfile, trials: Sequence[TrialRecord], params: ModelParams) -> str:
    digest = sha256_hex(
        canonical_json(
            {
                "profile_id": profile.profile_id,
                "trial_ids": [t.trial_id for t in trials],
                "params": params.model_dump(mode="json"),
            }
        )
    )
    return f"run-{digest[:12]}"


def _manual_result(
    trial: TrialRecord,
    reason: ManualReason,
    diagnostics: Sequence[str],
    criteria: Sequence[Criterion] = (),
) -> TrialScreeningResult:
    return TrialScreeningResult(
        trial_id=trial.trial_id,
        title=trial.title,
        verdict=TrialVerdict(value=VerdictValue.MANUAL_ROUTE, manual_reason=reason),
        criteria=tuple(criteria),
        diagnostics=tuple(diagnostics),
    )


def _screen_trial(
    profile: PatientProfile,
    trial: TrialRecord,
    params: ModelParams,
    backend: CompletionBackend,
    config: EngineConfig,
    templates: PromptTemplates,
    rules: ParserRules,
) -> TrialScreeningResult:
    parsed = parse_trial(trial, rules)
    if isinstance(parsed, ParseFailure):
        return _manual_result(
            trial, ManualReason.PARSE_FAILURE, [f"{parsed.reason.value}: {parsed.detail}"]
        )
    criteria = parsed.criteria
    diagnostics = list(parsed.diagnostics)
    try:
        selected = _run_selection(profile, parsed, params, backend, config, templates, diagnostics)
        assessments = []
        for criterion in criteria:
            if criterion.key in selected:
                assessments.append(
                    _assess_criterion(
                        profile, criterion, params, backend, config, templates, diagnostics
                    )
                )
            else:
                assessments.append(
                    CriterionAssessment.build(key=criterion.key, screenable=False)
                )
    except BackendError as exc:
        return _manual_result(
            trial, ManualReason.PIPELINE_ERROR, [f"backend failure: {exc}"], criteria
        )
    return TrialScreeningResult(
        trial_id=trial.trial_id,
        title=trial.title,
        verdict=trial_verdict(assessments),
        assessments=tuple(assessments),
        criteria=tuple(criteria),
        dropout_keys=tuple(a.key for a in assessments if a.dropout),
        diagnostics=tuple(diagnostics),
        all_unknown=all_unknown(assessments),
    )


def _run_selection(
    profile: PatientProfile,
    parsed,
    params: ModelParams,
    backend: CompletionBackend,
    config: EngineConfig,
    templates: PromptTemplates,
    diagnostics: list[str],
) -> set[CriterionKey]:
    selected: set[CriterionKey] = set()
    for section in (Section.INCLUSION, Section.EXCLUSION):
        criteria = parsed.section(section)
        if not criteria:
            continue
        bundles = gateway.build_selection_prompts(
            profile,
            criteria,
            templates,
            batch_size=config.batch_size,
            token_budget=config.token_budget,
        )
        for bundle in bundles:
            record = backend.complete(bundle, params)
            parse = gateway.parse_selection(record.raw_response, bundle.criterion_keys)
            selected.update(parse.keys)
            diagnostics.extend(parse.warnings)
    return selected


def _assess_criterion(
    profile: PatientProfile,
    criterion: Criterion,
    params: ModelParams,
    backend: CompletionBackend,
    config: EngineConfig,
    templates: PromptTemplates,
    diagnostics: list[str],
) -> CriterionAssessment:
    reasoning_bundle = gateway.build_reasoning_prompt(profile, criterion, templates)
    reasoning_record = backend.complete(reasoning_bundle, params)
    reasoning_text = reasoning_record.raw_response
    if config.combined_reasoning:
        label_record = reasoning_record
        label_bundle = reasoning_bundle
    else:
        label_bundle = gateway.build_labeling_prompt(reasoning_text, criterion, templates)
        label_record = backend.complete(label_bundle, params)
    try:
        label = gateway.parse_label(label_record.raw_response)
    except LabelParseError as exc:
        label = EligibilityLabel.UNKNOWN
        diagnostics.append(f"{criterion.key.as_ref()}: {exc}; label set to unknown")
    return CriterionAssessment.build(
        key=criterion.key,
        screenable=True,
        label=label,
        reasoning=reasoning_text,
        provenance=Provenance(
            model_name=params.model_name,
            temperature=params.temperature,
            prompt_hash=label_record.prompt_hash,
            created_at=label_record.created_at,
        ),
    )


def screen(
    profile: PatientProfile,
    trials: Sequence[TrialRecord],
    params: ModelParams,
    backend: CompletionBackend,
    config: EngineConfig = EngineConfig(),
    run_id: Optional[str] = None,
) -> ScreeningRun:
    """Screen one patient against many trials; see the module docstring.

    Trials are processed in a bounded thread pool; results come back
    sorted by trial_id no matter how execution interleaves, and with the
    mock or replay backend the whole run is byte-for-byte reproducible.
    """
    run_diagnostics: list[str] = []
    candidates = []
    for trial in sorted(trials, key=lambda t: t.trial_id):
        if config.apply_prefilter and not demographic_prefilter(profile, trial):
            run_diagnostics.append(f"prefilter excluded trial {trial.trial_id}")
            continue
        candidates.append(trial)
    templates = PromptTemplates.load(config.templates_dir)
    rules = load_rules()

    def work(trial: TrialRecord) -> TrialScreeningResult:
        try:
            return _screen_trial(profile, trial, params, backend, config, templates, rules)
        except Exception as exc:  # a bug must not silently drop a trial
            return _manual_result(trial, ManualReason.PIPELINE_ERROR, [f"unexpected error: {exc}"])

    if config.max_parallel == 1 or len(candidates) <= 1:
        results = [work(t) for t in candidates]
    else:
        with ThreadPoolExecutor(max_workers=config.max_parallel) as pool:
            results = list(pool.map(work, candidates))
    results.sort(key=lambda r: r.trial_id)
    created = (
        datetime(1970, 1, 1, tzinfo=timezone.utc)
        if backend.kind in (BackendKind.MOCK, BackendKind.REPLAY)
        else datetime.now(timezone.utc)
    )
    return ScreeningRun(
        run_id=run_id or _derive_run_id(profile, trials, params),
        profile_id=profile.profile_id,
        params=params,
        backend_kind=backend.kind,
        results=tuple(results),
        state=RunState.SCREENED,
        version=1,
        created_at=created,
        diagnostics=tuple(run_diagnostics),
    )


def merge_runs(runs: Sequence[ScreeningRun], run_id: str = "pooled") -> ScreeningRun:
    """Pool per-profile runs over disjoint trial sets into one run.

    Metrics in this system are reported over all trials of all profiles at
    once; each profile screens only the trials its own registry query
    returned, so trial ids must not overlap. The pooled run starts fresh
    in the screened state with no queue or decisions.
    """
    if not runs:
        raise ContractViolation("merge_runs needs at least one run")
    seen: set[str] = set()
    results: list[TrialScreeningResult] = []
    for run in runs:
        for result in run.results:
            if result.trial_id in seen:
                raise ContractViolation(f"trial {result.trial_id} appears in multiple runs")
            seen.add(result.trial_id)
            results.append(result)
    results.sort(key=lambda r: r.trial_id)
    return ScreeningRun(
        run_id=run_id,
        profile_id=",".join(sorted({r.profile_id for r in runs})),
        params=runs[0].params,
        backend_kind=runs[0].backend_kind,
        results=tuple(results),
        state=RunState.SCREENED,
        version=1,
        created_at=min(r.created_at for r in runs),
        diagnostics=tuple(d for r in runs for d in r.diagnostics),
    )


# ---------------------------------------------------------------------------
# Review


def build_review_queue(run: ScreeningRun) -> ReviewQueue:
    """All dropout assessments plus all manual trials; moves the run to in_review."""
    if run.state is not RunState.SCREENED:
        raise StateError(f"queue can only be built from state screened, not {run.state.value}")
    criteria_by_key = {
        c.key: c for result in run.results for c in result.criteria
    }
    items = []
    for result in run.results:
        for key in result.dropout_keys:
            assessment = next(a for a in result.assessments if a.key == key)
            items.append(
                QueueItem(
                    criterion=criteria_by_key[key],
                    assessment=assessment,
                    profile_summary_ref=run.profile_id,
                )
            )
    manual = [
        ManualTrialEntry(
            trial_id=r.trial_id, reason=r.verdict.manual_reason, title=r.title
        )
        for r in run.manual_results()
    ]
    queue = ReviewQueue(run_id=run.run_id, items=tuple(items), manual_trials=tuple(manual))
    run.queue = queue
    run.state = RunState.IN_REVIEW
    run.version += 1
    return queue


def _validate_decision(run: ScreeningRun, decision: ReviewDecision, decided: set[str]) -> None:
    if decision.target in decided:
        raise DecisionError(f"target {decision.target} already has a decision")
    if decision.action in CRITERION_ACTIONS:
        queued = {item.assessment.key.as_ref() for item in run.queue.items}
        if decision.target not in queued:
            raise DecisionError(f"{decision.target} is not a queued dropout criterion")
        if decision.action is ReviewAction.REJECT_DROPOUT:
            key = CriterionKey.from_ref(decision.target)
            label = decision.corrected_label or EligibilityLabel.UNKNOWN
            if is_dropout(key.section, label):
                raise DecisionError(
                    f"corrected label {label.value} would still drop a "
                    f"{key.section.value} criterion"
                )
    else:
        manual_ids = {entry.trial_id for entry in run.queue.manual_trials}
        if decision.target not in manual_ids:
            raise DecisionError(f"{decision.target} is not a manual-review trial")


def _apply_rejection(result: TrialScreeningResult, decision: ReviewDecision) -> TrialScreeningResult:
    key = CriterionKey.from_ref(decision.target)
    label = decision.corrected_label or EligibilityLabel.UNKNOWN
    assessments = []
    for assessment in result.assessments:
        if assessment.key == key:
            assessment = CriterionAssessment.build(
                key=assessment.key,
                screenable=assessment.screenable,
                label=label,
                reasoning=assessment.reasoning,
                provenance=assessment.provenance,
            )
        assessments.append(assessment)
    return result.model_copy(
        update={
            "assessments": tuple(assessments),
            "verdict": trial_verdict(assessments),
            "dropout_keys": tuple(a.key for a in assessments if a.dropout),
            "all_unknown": all_unknown(assessments),
        }
    )


def apply_decisions(
    run: ScreeningRun,
    decisions: Sequence[ReviewDecision],
    expected_version: Optional[int] = None,
) -> ScreeningRun:
    """Apply a physician decision batch atomically.

    The whole batch is validated against the queue first; any invalid
    decision (unknown target, duplicate, corrected label that still drops)
    rejects the batch with the run untouched, as does a version mismatch.
    Rejections recompute the affected trial verdicts; once every queue
    item and manual trial is decided the run is finalized.
    """
    if run.state is not RunState.IN_REVIEW:
        raise StateError(f"decisions require state in_review, not {run.state.value}")
    if expected_version is not None and expected_version != run.version:
        raise VersionConflict(
            f"expected version {expected_version}, run is at {run.version}"
        )
    decided = {d.target for d in run.decisions}
    for decision in decisions:
        _validate_decision(run, decision, decided)
        decided.add(decision.target)

    results = {r.trial_id: r for r in run.results}
    for decision in decisions:
        if decision.action is ReviewAction.REJECT_DROPOUT:
            key = CriterionKey.from_ref(decision.target)
            results[key.trial_id] = _apply_rejection(results[key.trial_id], decision)
        elif decision.action in TRIAL_ACTIONS:
            resolved = (
                VerdictValue.PREDICTED_ELIGIBLE
                if decision.action is ReviewAction.CONFIRM_TRIAL_ELIGIBLE
                else VerdictValue.PREDICTED_INELIGIBLE
            )
            results[decision.target] = results[decision.target].model_copy(
                update={"resolved_verdict": resolved}
            )
    run.results = tuple(results[r.trial_id] for r in run.results)
    run.decisions = run.decisions + tuple(decisions)
    run.version += 1
    if _review_complete(run):
        run.state = RunState.FINALIZED
        run.version += 1
    return run


def _review_complete(run: ScreeningRun) -> bool:
    decided = {d.target for d in run.decisions}
    for item in run.queue.items:
        if item.assessment.key.as_ref() not in decided:
            return False
    for entry in run.queue.manual_trials:
        if entry.trial_id not in decided:
            return False
    return True


def workload_stats(run: ScreeningRun) -> WorkloadStats:
    """How much of the criterion volume a physician actually has to read."""
    if run.state is RunState.SCREENED:
        raise StateError("workload stats require the review queue to be built")
    total = sum(len(r.assessments) for r in run.evaluated_results())
    queued = len(run.queue.items)
    fraction = round(queued / total, 4) if total else 0.0
    return WorkloadStats(
        queued_criteria=queued,
        total_criteria=total,
        fraction=fraction,
        manual_trials=len(run.queue.manual_trials),
    )


# ---------------------------------------------------------------------------
# Run export / import


def export_run(run: ScreeningRun, directory: Path | str) -> Path:
    """Write a run directory: metadata, assessments, queue, and decisions.

    run.json holds the complete run and is what import_run reads back; the
    JSONL projections exist for streaming consumers and quick inspection.
    All files are canonical JSON, so identical runs export identical bytes.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write(directory / "run.json", canonical_json(run.model_dump(mode="json")) + "\n")
    write_jsonl(
        directory / "assessments.jsonl",
        (
            dict(a.model_dump(mode="json"), trial_id=r.trial_id)
            for r in run.results
            for a in r.assessments
        ),
    )
    if run.queue is not None:
        atomic_write(
            directory / "queue.json", canonical_json(run.queue.model_dump(mode="json")) + "\n"
        )
    write_jsonl(
        directory / "decisions.jsonl", (d.model_dump(mode="json") for d in run.decisions)
    )
    return directory / "run.json"


def import_run(directory: Path | str) -> ScreeningRun:
    import json

    payload = json.loads((Path(directory) / "run.json").read_text("utf-8"))
    return ScreeningRun(**payload)
