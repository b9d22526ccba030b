"""Domain types and the pure decision logic shared by every other module.

Everything here is an immutable value or a pure function, so the rest of
the pipeline can use it from any thread without coordination.
"""
from __future__ import annotations

import re
from datetime import datetime, timezone
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, model_validator

ISO_COUNTRY_RE = re.compile(r"^[A-Za-z]{2}$")


class ContractViolation(ValueError):
    """An operation was called with inputs that break its preconditions."""


class Sex(str, Enum):
    FEMALE = "female"
    MALE = "male"


class AcceptedSex(str, Enum):
    FEMALE = "female"
    MALE = "male"
    ALL = "all"


class Section(str, Enum):
    INCLUSION = "inclusion"
    EXCLUSION = "exclusion"


class TrialStatus(str, Enum):
    RECRUITING = "recruiting"
    OTHER = "other"


class EligibilityLabel(str, Enum):
    MET = "met"
    NOT_MET = "not_met"
    UNKNOWN = "unknown"


class VerdictValue(str, Enum):
    PREDICTED_ELIGIBLE = "predicted_eligible"
    PREDICTED_INELIGIBLE = "predicted_ineligible"
    MANUAL_ROUTE = "manual_route"


class ManualReason(str, Enum):
    PARSE_FAILURE = "parse_failure"
    PIPELINE_ERROR = "pipeline_error"


class PatientProfile(BaseModel):
    """Demographics plus the free-text medical summary used for screening."""

    model_config = ConfigDict(frozen=True)

    profile_id: str
    condition_code: str
    condition_name: str
    age: int
    sex: Sex
    country: str
    medical_summary: str

    @model_validator(mode="after")
    def _check(self) -> "PatientProfile":
        if self.age < 0:
            raise ValueError("age must be >= 0")
        if not self.medical_summary.strip():
            raise ValueError("medical_summary must be non-empty")
        if not self.profile_id:
            raise ValueError("profile_id must be non-empty")
        if not ISO_COUNTRY_RE.match(self.country):
            raise ValueError(f"country must be a two-letter ISO code, got {self.country!r}")
        return self


class TrialRecord(BaseModel):
    """One registry trial with its raw eligibility text preserved verbatim."""

    model_config = ConfigDict(frozen=True)

    trial_id: str
    title: str = ""
    condition_codes: tuple[str, ...] = ()
    eligibility_text: str = ""
    min_age: Optional[int] = None
    max_age: Optional[int] = None
    accepted_sex: AcceptedSex = AcceptedSex.ALL
    countries: tuple[str, ...] = ()
    status: TrialStatus = TrialStatus.OTHER

    @model_validator(mode="after")
    def _check(self) -> "TrialRecord":
        if not self.trial_id:
            raise ValueError("trial_id must be non-empty")
        if self.min_age is not None and self.max_age is not None and self.min_age > self.max_age:
            raise ValueError("min_age must not exceed max_age")
        return self


class CriterionKey(BaseModel):
    """Stable address of one criterion: trial, section, position in section."""

    model_config = ConfigDict(frozen=True)

    trial_id: str
    section: Section
    ordinal: int

    @model_validator(mode="after")
    def _check(self) -> "CriterionKey":
        if self.ordinal < 0:
            raise ValueError("ordinal must be >= 0")
        return self

    def sort_key(self) -> tuple[str, int, int]:
        return (self.trial_id, 0 if self.section is Section.INCLUSION else 1, self.ordinal)

    def as_ref(self) -> str:
        """Compact string form used in files and HTTP payloads."""
        return f"{self.trial_id}:{self.section.value}:{self.ordinal}"

    @classmethod
    def from_ref(cls, ref: str) -> "CriterionKey":
        trial_id, section, ordinal = ref.rsplit(":", 2)
        return cls(trial_id=trial_id, section=Section(section), ordinal=int(ordinal))


class Criterion(BaseModel):
    model_config = ConfigDict(frozen=True)

    key: CriterionKey
    text: str

    @model_validator(mode="after")
    def _check(self) -> "Criterion":
        if not self.text.strip():
            raise ValueError("criterion text must be non-empty")
        return self


class Provenance(BaseModel):
    """Where a criterion assessment came from."""

    model_config = ConfigDict(frozen=True)

    model_name: str = "unknown"
    temperature: float = 0.0
    prompt_hash: str = ""
    created_at: datetime = datetime(1970, 1, 1, tzinfo=timezone.utc)


class CriterionAssessment(BaseModel):
    """Per-criterion pipeline output: selection, reasoning, label, dropout flag.

    ``dropout`` is derived: a not-met inclusion criterion or a met exclusion
    criterion. An ``unknown`` label never drops, and an unselected criterion
    is always ``unknown`` with empty reasoning.
    """

    model_config = ConfigDict(frozen=True)

    key: CriterionKey
    screenable: bool
    reasoning: str = ""
    label: EligibilityLabel = EligibilityLabel.UNKNOWN
    dropout: bool = False
    provenance: Provenance = Provenance()

    @model_validator(mode="after")
    def _check(self) -> "CriterionAssessment":
        expected = is_dropout(self.key.section, self.label)
        if self.dropout != expected:
            raise ValueError(
                f"dropout flag {self.dropout} inconsistent with "
                f"({self.key.section.value}, {self.label.value})"
            )
        if not self.screenable:
            if self.label is not EligibilityLabel.UNKNOWN:
                raise ValueError("unscreenable criterion must carry label unknown")
            if self.reasoning:
                raise ValueError("unscreenable criterion must carry empty reasoning")
        return self

    @classmethod
    def build(
        cls,
        key: CriterionKey,
        screenable: bool,
        label: EligibilityLabel = EligibilityLabel.UNKNOWN,
        reasoning: str = "",
        provenance: Provenance = Provenance(),
    ) -> "CriterionAssessment":
        """Construct with the dropout flag derived, never passed in."""
        return cls(
            key=key,
            screenable=screenable,
            reasoning=reasoning,
            label=label,
            dropout=is_dropout(key.section, label),
            provenance=provenance,
        )


class TrialVerdict(BaseModel):
    model_config = ConfigDict(frozen=True)

    value: VerdictValue
    manual_reason: Optional[ManualReason] = None

    @model_validator(mode="after")
    def _check(self) -> "TrialVerdict":
        if (self.value is VerdictValue.MANUAL_ROUTE) != (self.manual_reason is not None):
            raise ValueError("manual_reason must be present iff value is manual_route")
        return self


def is_dropout(section: Section, label: EligibilityLabel) -> bool:
    """True only for a not-met inclusion criterion or a met exclusion criterion."""
    if section is Section.INCLUSION:
        return label is EligibilityLabel.NOT_MET
    return label is EligibilityLabel.MET


def trial_verdict(assessments: list[CriterionAssessment]) -> TrialVerdict:
    """Ineligible iff any assessment dropped; eligible otherwise.

    An empty list and an all-unknown list are both predicted_eligible:
    unknowns are resolved later, at on-site screening.
    """
    trial_ids = {a.key.trial_id for a in assessments}
    if len(trial_ids) > 1:
        raise ContractViolation(f"assessments span multiple trials: {sorted(trial_ids)}")
    if any(a.dropout for a in assessments):
        return TrialVerdict(value=VerdictValue.PREDICTED_INELIGIBLE)
    return TrialVerdict(value=VerdictValue.PREDICTED_ELIGIBLE)


def all_unknown(assessments: list[CriterionAssessment]) -> bool:
    """Informational flag: every criterion of the trial came back unknown."""
    return bool(assessments) and all(
        a.label is EligibilityLabel.UNKNOWN for a in assessments
    )


def demographic_prefilter(profile: PatientProfile, trial: TrialRecord) -> bool:
    """Age in range, sex accepted, country served. Missing trial data is permissive."""
    if trial.min_age is not None and profile.age < trial.min_age:
        return False
    if trial.max_age is not None and profile.age > trial.max_age:
        return False
    if trial.accepted_sex is not AcceptedSex.ALL and trial.accepted_sex.value != profile.sex.value:
        return False
    if trial.countries and profile.country.upper() not in {c.upper() for c in trial.countries}:
        return False
    return True
