"""LLM-assisted clinical-trial eligibility pre-screening with a physician in the loop."""

__version__ = "0.1.0"

from prescreen.model import (
    AcceptedSex,
    Criterion,
    CriterionAssessment,
    CriterionKey,
    EligibilityLabel,
    PatientProfile,
    Section,
    Sex,
    TrialRecord,
    TrialVerdict,
    VerdictValue,
    demographic_prefilter,
    is_dropout,
    trial_verdict,
)

__all__ = [
    "AcceptedSex",
    "Criterion",
    "CriterionAssessment",
    "CriterionKey",
    "EligibilityLabel",
    "PatientProfile",
    "Section",
    "Sex",
    "TrialRecord",
    "TrialVerdict",
    "VerdictValue",
    "demographic_prefilter",
    "is_dropout",
    "trial_verdict",
]
