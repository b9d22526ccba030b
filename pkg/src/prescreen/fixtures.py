"""Deterministic benchmark fixture with known ground-truth counts.

Builds a complete synthetic screening workload: 10 patient profiles, 182
trials (146 parseable, 36 that fail parsing), mock backend rules that
script every criterion's selection and label, and gold annotations. The
construction fixes, criterion by criterion, which cell of every confusion
matrix it lands in, so the expected metrics are known exactly up front:

    screenability  TP 471   FP 865   FN 276   TN 2523   (4135 criteria)
    labels correct on 341 of the 471 correctly selected criteria
    dropout        TP 108   FP 220 (33+187)   FN 43     TN 3764
    trials         TP 32    FP 13    FN 33    TN 68     (+36 manual)
    review queue   328 of 4135 criteria

Each criterion belongs to one behavior category:

    A  selected, correct dropout label            (dropout TP)
    B  selected, false dropout label              (dropout FP, good selection)
    C  selected but labeled unknown, real dropout (dropout FN, good selection)
    D1 selected, correct benign label
    D2 selected but labeled unknown, benign
    E  selected wrongly, dropout label            (dropout FP, bad selection)
    F  selected wrongly, benign label
    G  not selected, real dropout missed          (dropout FN)
    H  not selected, benign, was screenable
    I  not selected, correctly

Selection and labels are driven by marker phrases appended to each
criterion text; the generated mock rule file keys on those phrases. The
whole construction is pure arithmetic with no randomness, so repeated
builds are byte-identical.

Run ``python -m prescreen.fixtures --out DIR`` to write the fixture files.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from prescreen.engine import RunState, ScreeningRun, TrialScreeningResult
from prescreen.evaluation import ErrorPattern, GoldAnnotations, GoldCriterion, GoldTrial
from prescreen.gateway import BackendKind, ModelParams
from prescreen.ioutil import atomic_write, canonical_json, write_jsonl
from prescreen.model import (
    Criterion,
    CriterionAssessment,
    CriterionKey,
    EligibilityLabel,
    ManualReason,
    PatientProfile,
    Section,
    Sex,
    TrialRecord,
    TrialStatus,
    TrialVerdict,
    VerdictValue,
    all_unknown,
    trial_verdict,
)

# profile id, condition, condition code, evaluated trials, criteria, unparseable trials
PROFILE_ROWS = [
    ("FP001", "Cancer of the Uterine Cervix", "M0003943", 10, 302, 4),
    ("FP002", "Leukemia, Myeloid, Acute", "M0023827", 11, 335, 4),
    ("FP003", "Colorectal Cancer", "M000655646", 15, 489, 5),
    ("FP004", "Cholangiocarcinoma", "M0027512", 34, 1109, 0),
    ("FP005", "Glioblastoma", "M0009269", 9, 252, 4),
    ("FP006", "Muscular Dystrophy, Duchenne", "M0014253", 10, 158, 4),
    ("FP007", "Breast Cancer", "M0002909", 17, 420, 4),
    ("FP008", "Amyotrophic Lateral Sclerosis", "M0001056", 5, 103, 4),
    ("FP009", "Cancer of Pancreas", "M0333232", 14, 402, 4),
    ("FP010", "Carcinoma, Non-Small-Cell Lung", "M0003440", 21, 565, 3),
]

TRIAL_CLASS_COUNTS = {"TP": 32, "FP": 13, "FN": 33, "TN": 68}

# category budgets; see the module docstring for what each category means
BUDGET_A = 108
BUDGET_B = 33
BUDGET_C = 28
BUDGET_D1 = 233
BUDGET_D2 = 69
BUDGET_E = 187
BUDGET_F = 678
BUDGET_G = 15
BUDGET_H = 261
BUDGET_I = 2523

PHRASE_MET = "documented in the referral summary"
PHRASE_NOT_MET = "explicitly excluded in the referral summary"
PHRASE_UNKNOWN = "pending confirmation at the site visit"

REASONING_MET = "The referral summary contains this finding."
REASONING_NOT_MET = "The referral summary rules this finding out."
REASONING_UNKNOWN = "The referral summary does not settle this point."

INCLUSION_STEMS = [
    "Histologically or cytologically confirmed diagnosis of the condition under study",
    "Eastern Cooperative Oncology Group performance status of 2 or less",
    "Measurable disease according to the applicable response criteria",
    "Adequate bone marrow function defined as absolute neutrophil count above 1,500 per microliter",
    "Adequate hepatic function defined as total bilirubin below 1.5 times the upper limit of normal",
    "Adequate renal function defined as creatinine clearance above 60 milliliters per minute",
    "Life expectancy of at least 12 weeks in the judgement of the investigator",
    "Recovered from the acute toxic effects of prior anticancer therapy",
    "Willing and able to comply with scheduled visits and study procedures",
    "Left ventricular ejection fraction of at least 50 percent on baseline echocardiography",
    "At least one prior line of systemic therapy for advanced disease",
    "Documented disease progression on or after the most recent therapy",
    "Ability to swallow oral medication without crushing or chewing",
    "Negative pregnancy test at screening for participants of childbearing potential",
    "Archival tumor tissue available for central biomarker analysis",
    "Body weight of at least 40 kilograms at screening",
    "Hemoglobin of at least 9 grams per deciliter without transfusion in the prior 2 weeks",
    "Platelet count of at least 100,000 per microliter at screening",
]

EXCLUSION_STEMS = [
    "Known central nervous system metastases that are symptomatic or untreated",
    "Major surgery within 4 weeks before the first dose of study treatment",
    "Active infection requiring systemic antimicrobial therapy",
    "Known history of human immunodeficiency virus infection",
    "Active hepatitis B or hepatitis C infection",
    "Myocardial infarction or unstable angina within 6 months before enrollment",
    "Concurrent participation in another interventional clinical study",
    "Prior treatment with any agent of the same drug class",
    "History of severe hypersensitivity to the study drug or its excipients",
    "Pregnancy or breastfeeding",
    "Uncontrolled hypertension despite optimal medical management",
    "Second primary malignancy within the past 3 years other than treated non-melanoma skin cancer",
    "Psychiatric illness or social situation that would limit compliance with study requirements",
    "Corrected QT interval above 470 milliseconds on screening electrocardiogram",
    "Chronic systemic corticosteroid use above physiologic replacement doses",
    "Known active autoimmune disease requiring immunosuppressive treatment",
    "Radiotherapy within 2 weeks before the first dose of study treatment",
    "Live vaccine administration within 30 days before enrollment",
]

PROFILE_DETAILS = {
    "FP001": (34, Sex.FEMALE, "NL",
        "34-year-old woman with FIGO stage IIB squamous cell carcinoma of the uterine "
        "cervix, diagnosed four months ago. She completed cisplatin-based chemoradiation "
        "with brachytherapy boost and now shows persistent parametrial disease on MRI. "
        "ECOG performance status 1. No prior surgery. Renal, hepatic and bone marrow "
        "function within normal limits. Not pregnant, no relevant comorbidities."),
    "FP002": (61, Sex.MALE, "DE",
        "61-year-old man with acute myeloid leukemia, first diagnosed two months ago, "
        "refractory to one cycle of 7+3 induction chemotherapy. Bone marrow blast count "
        "35 percent. ECOG performance status 2. History of well-controlled type 2 "
        "diabetes. No active infection. Cardiac ejection fraction 55 percent."),
    "FP003": (58, Sex.MALE, "NL",
        "58-year-old man with metastatic colorectal adenocarcinoma involving the liver, "
        "progressed on FOLFOX plus bevacizumab and on second-line FOLFIRI. ECOG "
        "performance status 1. Primary tumor resected a year ago. Adequate organ "
        "function. No cardiac history, no active infection."),
    "FP004": (55, Sex.FEMALE, "US",
        "55-year-old woman with unresectable intrahepatic cholangiocarcinoma, diagnosed "
        "five months ago, progressing after gemcitabine and cisplatin. ECOG performance "
        "status 1. Mild cholestasis with bilirubin 1.2 times the upper limit of normal; "
        "otherwise adequate organ function. No biliary stent, no active cholangitis."),
    "FP005": (47, Sex.MALE, "DE",
        "47-year-old man with glioblastoma of the right temporal lobe, status post gross "
        "total resection and chemoradiation with temozolomide, now with radiographic "
        "recurrence. Karnofsky performance status 80. On a stable low dose of "
        "dexamethasone. No seizures in the past month. Normal blood counts."),
    "FP006": (9, Sex.MALE, "NL",
        "9-year-old boy with genetically confirmed Duchenne muscular dystrophy, exon 45 "
        "deletion, ambulatory with bilateral Gowers sign. On stable daily corticosteroid "
        "therapy for 14 months. Left ventricular ejection fraction 58 percent. Forced "
        "vital capacity 85 percent of predicted. No prior exon-skipping therapy."),
    "FP007": (49, Sex.FEMALE, "US",
        "49-year-old woman with hormone-receptor-positive, HER2-negative invasive ductal "
        "carcinoma of the left breast with bone metastases, progressing on letrozole "
        "plus a CDK4/6 inhibitor. ECOG performance status 0. Postmenopausal. Adequate "
        "organ function. No visceral crisis, no prior chemotherapy for advanced disease."),
    "FP008": (52, Sex.MALE, "GB",
        "52-year-old man with probable amyotrophic lateral sclerosis by El Escorial "
        "criteria, limb onset, symptom duration 18 months. On riluzole. Forced vital "
        "capacity 75 percent of predicted. Ambulatory with a cane. No gastrostomy, no "
        "non-invasive ventilation. Cognition intact."),
    "FP009": (66, Sex.FEMALE, "DE",
        "66-year-old woman with metastatic pancreatic ductal adenocarcinoma with liver "
        "metastases, progressing after first-line FOLFIRINOX. ECOG performance status 1. "
        "Biliary obstruction relieved with a metal stent two months ago. CA 19-9 "
        "elevated. Adequate hematologic and renal function, bilirubin normal."),
    "FP010": (63, Sex.MALE, "NL",
        "63-year-old man with stage IV non-small-cell lung carcinoma, adenocarcinoma "
        "histology, no actionable driver mutation, PD-L1 expression 30 percent, "
        "progressing after carboplatin, pemetrexed and pembrolizumab. ECOG performance "
        "status 1. Former smoker. Asymptomatic treated brain metastasis, stable for "
        "four months. Adequate organ function."),
}


@dataclass
class PlannedCriterion:
    key: CriterionKey
    category: str
    text: str
    pred_screenable: bool
    pred_label: EligibilityLabel
    gold_screenable: bool
    gold_label: EligibilityLabel
    pattern: ErrorPattern = ErrorPattern.NONE


@dataclass
class PlannedTrial:
    trial_id: str
    profile_id: str
    klass: str  # TP/FP/FN/TN at trial level, or MANUAL
    title: str = ""
    categories: list[str] = field(default_factory=list)
    criteria: list[PlannedCriterion] = field(default_factory=list)
    eligibility_text: str = ""
    manual_reason: Optional[ManualReason] = None


@dataclass
class Benchmark:
    profiles: list[PatientProfile]
    trials: list[TrialRecord]
    planned: list[PlannedTrial]
    gold: GoldAnnotations
    mock_rules: dict


def build_profiles() -> list[PatientProfile]:
    profiles = []
    for profile_id, condition, code, _, _, _ in PROFILE_ROWS:
        age, sex, country, summary = PROFILE_DETAILS[profile_id]
        profiles.append(
            PatientProfile(
                profile_id=profile_id,
                condition_code=code,
                condition_name=condition,
                age=age,
                sex=sex,
                country=country,
                medical_summary=summary,
            )
        )
    return profiles


def build_mock_rules() -> dict:
    return {
        "rules": [
            {
                "pattern": f"*{PHRASE_MET}*",
                "screenable": True,
                "label": "met",
                "reasoning": REASONING_MET,
            },
            {
                "pattern": f"*{PHRASE_NOT_MET}*",
                "screenable": True,
                "label": "not met",
                "reasoning": REASONING_NOT_MET,
            },
            {
                "pattern": f"*{PHRASE_UNKNOWN}*",
                "screenable": True,
                "label": "unknown",
                "reasoning": REASONING_UNKNOWN,
            },
        ],
        "default": {"screenable": False, "label": "unknown"},
    }


def _interleave(budgets: dict[str, int]) -> list[str]:
    """Order category draws so each pool drains proportionally (deterministic)."""
    remaining = dict(budgets)
    original = dict(budgets)
    out = []
    for _ in range(sum(budgets.values())):
        name = max(remaining, key=lambda n: (remaining[n] / original[n], n))
        out.append(name)
        remaining[name] -= 1
    return out


def _plan_trials() -> list[PlannedTrial]:
    trials: list[PlannedTrial] = []
    serial = 0
    for profile_id, condition, _, n_trials, n_criteria, n_manual in PROFILE_ROWS:
        base, rem = divmod(n_criteria, n_trials)
        for i in range(n_trials):
            serial += 1
            count = base + (1 if i < rem else 0)
            trials.append(
                PlannedTrial(
                    trial_id=f"T{serial:04d}",
                    profile_id=profile_id,
                    klass="",
                    title=f"Interventional study {serial} in {condition.lower()}",
                    categories=[""] * count,
                )
            )
        for _ in range(n_manual):
            serial += 1
            trials.append(
                PlannedTrial(
                    trial_id=f"T{serial:04d}",
                    profile_id=profile_id,
                    klass="MANUAL",
                    title=f"Interventional study {serial} in {condition.lower()}",
                )
            )
    evaluated = [t for t in trials if t.klass != "MANUAL"]
    # stride permutation spreads trial classes across profiles; 59 is coprime with 146
    class_seq = (
        ["TP"] * TRIAL_CLASS_COUNTS["TP"]
        + ["FP"] * TRIAL_CLASS_COUNTS["FP"]
        + ["FN"] * TRIAL_CLASS_COUNTS["FN"]
        + ["TN"] * TRIAL_CLASS_COUNTS["TN"]
    )
    for i, trial in enumerate(evaluated):
        trial.klass = class_seq[(i * 59) % len(evaluated)]
    return trials


def _place_categories(trials: list[PlannedTrial]) -> None:
    evaluated = [t for t in trials if t.klass != "MANUAL"]
    tn = [t for t in evaluated if t.klass == "TN"]
    fp = [t for t in evaluated if t.klass == "FP"]
    fn = [t for t in evaluated if t.klass == "FN"]

    placements: list[tuple[PlannedTrial, str]] = []
    for trial in tn:
        placements.append((trial, "A"))
    for k in range(BUDGET_A - len(tn)):
        placements.append((tn[k % len(tn)], "A"))
    for trial in fp:
        placements.append((trial, "C"))
    for k in range(BUDGET_C - len(fp)):
        placements.append((tn[k % len(tn)], "C"))
    for trial in fn:
        placements.append((trial, "B"))
    for k, trial in enumerate(tn[-BUDGET_G:]):
        placements.append((trial, "G"))
    dropout_hosts = fn + tn
    for k in range(BUDGET_E):
        placements.append((dropout_hosts[k % len(dropout_hosts)], "E"))

    slots: dict[str, list[int]] = {t.trial_id: [] for t in evaluated}
    counts: dict[str, int] = {t.trial_id: len(t.categories) for t in evaluated}
    specials: dict[str, list[str]] = {t.trial_id: [] for t in evaluated}
    for trial, category in placements:
        specials[trial.trial_id].append(category)

    filler_seq = _interleave(
        {"D1": BUDGET_D1, "D2": BUDGET_D2, "F": BUDGET_F, "H": BUDGET_H, "I": BUDGET_I}
    )
    cursor = 0
    for trial in evaluated:
        chosen = specials[trial.trial_id]
        n = counts[trial.trial_id]
        fillers_needed = n - len(chosen)
        fillers = filler_seq[cursor : cursor + fillers_needed]
        cursor += fillers_needed
        # spread the specials through the trial instead of clumping them
        merged = list(fillers)
        for j, category in enumerate(chosen):
            position = ((j + 1) * n) // (len(chosen) + 1)
            merged.insert(min(position, len(merged)), category)
        trial.categories = merged
    assert cursor == len(filler_seq)


_PRED_BY_CATEGORY = {
    # category -> (screenable, label for inclusion, label for exclusion)
    "A": (True, EligibilityLabel.NOT_MET, EligibilityLabel.MET),
    "B": (True, EligibilityLabel.NOT_MET, EligibilityLabel.MET),
    "C": (True, EligibilityLabel.UNKNOWN, EligibilityLabel.UNKNOWN),
    "D1": (True, EligibilityLabel.MET, EligibilityLabel.NOT_MET),
    "D2": (True, EligibilityLabel.UNKNOWN, EligibilityLabel.UNKNOWN),
    "E": (True, EligibilityLabel.NOT_MET, EligibilityLabel.MET),
    "F": (True, EligibilityLabel.MET, EligibilityLabel.NOT_MET),
    "G": (False, EligibilityLabel.UNKNOWN, EligibilityLabel.UNKNOWN),
    "H": (False, EligibilityLabel.UNKNOWN, EligibilityLabel.UNKNOWN),
    "I": (False, EligibilityLabel.UNKNOWN, EligibilityLabel.UNKNOWN),
}

_GOLD_BY_CATEGORY = {
    # category -> (gold screenable, gold label for inclusion, for exclusion)
    "A": (True, EligibilityLabel.NOT_MET, EligibilityLabel.MET),
    "B": (True, EligibilityLabel.MET, EligibilityLabel.NOT_MET),
    "C": (True, EligibilityLabel.NOT_MET, EligibilityLabel.MET),
    "D1": (True, EligibilityLabel.MET, EligibilityLabel.NOT_MET),
    "D2": (True, EligibilityLabel.MET, EligibilityLabel.NOT_MET),
    "E": (False, EligibilityLabel.UNKNOWN, EligibilityLabel.UNKNOWN),
    "F": (False, EligibilityLabel.UNKNOWN, EligibilityLabel.UNKNOWN),
    "G": (True, EligibilityLabel.NOT_MET, EligibilityLabel.MET),
    "H": (True, EligibilityLabel.MET, EligibilityLabel.NOT_MET),
    "I": (False, EligibilityLabel.UNKNOWN, EligibilityLabel.UNKNOWN),
}


def _phrase_for(pred_label: EligibilityLabel, screenable: bool) -> Optional[str]:
    if not screenable:
        return None
    if pred_label is EligibilityLabel.MET:
        return PHRASE_MET
    if pred_label is EligibilityLabel.NOT_MET:
        return PHRASE_NOT_MET
    return PHRASE_UNKNOWN


def _materialize(trials: list[PlannedTrial]) -> None:
    """Turn category plans into criterion texts, labels, and gold entries."""
    # audited-pattern budgets, grouped by category in deterministic global order
    pattern_plan = {
        "B": [ErrorPattern.D] * BUDGET_B,
        "C": [ErrorPattern.D] * BUDGET_C,
        "D2": [ErrorPattern.D] * 24 + [ErrorPattern.E] * 13 + [ErrorPattern.F] * 32,
        "D1": [ErrorPattern.F] * 6 + [ErrorPattern.NONE] * (BUDGET_D1 - 6),
        "E": [ErrorPattern.D] * BUDGET_E,
        "F": [ErrorPattern.D] * 255 + [ErrorPattern.NONE] * (BUDGET_F - 255),
    }
    pattern_cursor = {category: 0 for category in pattern_plan}
    stem_cursor = {Section.INCLUSION: 0, Section.EXCLUSION: 0}

    for trial in trials:
        if trial.klass == "MANUAL":
            continue
        n = len(trial.categories)
        n_inclusion = max(1, min(n - 1, (n * 13) // 20)) if n > 1 else n
        for ordinal_all, category in enumerate(trial.categories):
            if ordinal_all < n_inclusion:
                section, ordinal = Section.INCLUSION, ordinal_all
            else:
                section, ordinal = Section.EXCLUSION, ordinal_all - n_inclusion
            stems = INCLUSION_STEMS if section is Section.INCLUSION else EXCLUSION_STEMS
            stem = stems[stem_cursor[section] % len(stems)]
            stem_cursor[section] += 1

            screenable, label_inc, label_exc = _PRED_BY_CATEGORY[category]
            pred_label = label_inc if section is Section.INCLUSION else label_exc
            phrase = _phrase_for(pred_label, screenable)
            text = f"{stem}, {phrase}" if phrase else stem

            gold_screenable, gold_inc, gold_exc = _GOLD_BY_CATEGORY[category]
            gold_label = gold_inc if section is Section.INCLUSION else gold_exc

            pattern = ErrorPattern.NONE
            if category in pattern_plan:
                pattern = pattern_plan[category][pattern_cursor[category]]
                pattern_cursor[category] += 1

            trial.criteria.append(
                PlannedCriterion(
                    key=CriterionKey(trial_id=trial.trial_id, section=section, ordinal=ordinal),
                    category=category,
                    text=text,
                    pred_screenable=screenable,
                    pred_label=pred_label,
                    gold_screenable=gold_screenable,
                    gold_label=gold_label,
                    pattern=pattern,
                )
            )
        inclusion = [c.text for c in trial.criteria if c.key.section is Section.INCLUSION]
        exclusion = [c.text for c in trial.criteria if c.key.section is Section.EXCLUSION]
        lines = ["Inclusion Criteria:"]
        lines += [f"- {text}" for text in inclusion]
        if exclusion:
            lines.append("Exclusion Criteria:")
            lines += [f"- {text}" for text in exclusion]
        trial.eligibility_text = "\n".join(lines) + "\n"

    unparseable = [t for t in trials if t.klass == "MANUAL"]
    for i, trial in enumerate(unparseable):
        trial.manual_reason = ManualReason.PARSE_FAILURE
        if i % 3 == 2:
            # two inclusion headings: ambiguous structure
            trial.eligibility_text = (
                "Inclusion Criteria:\n- Adults with the condition under study\n"
                "Inclusion Criteria:\n- See the study protocol for details\n"
            )
        else:
            trial.eligibility_text = (
                "Participants will be selected according to the investigator's "
                "judgement. Please contact the study site for details on "
                "eligibility requirements.\n"
            )


def build_benchmark() -> Benchmark:
    planned = _plan_trials()
    _place_categories(planned)
    _materialize(planned)

    code_by_profile = {row[0]: row[2] for row in PROFILE_ROWS}
    trials = [
        TrialRecord(
            trial_id=t.trial_id,
            title=t.title,
            condition_codes=(code_by_profile[t.profile_id],),
            eligibility_text=t.eligibility_text,
            status=TrialStatus.RECRUITING,
        )
        for t in planned
    ]

    gold_criteria = [
        GoldCriterion(
            key=c.key,
            gold_screenable=c.gold_screenable,
            gold_label=c.gold_label,
            error_pattern=c.pattern,
        )
        for t in planned
        for c in t.criteria
    ]
    gold_trials = [
        GoldTrial(trial_id=t.trial_id, gold_eligible=t.klass in ("TP", "FN"))
        for t in planned
    ]
    return Benchmark(
        profiles=build_profiles(),
        trials=trials,
        planned=planned,
        gold=GoldAnnotations.from_records(gold_criteria, gold_trials),
        mock_rules=build_mock_rules(),
    )


def planned_run(bench: Benchmark, profile_id: Optional[str] = None) -> ScreeningRun:
    """The ScreeningRun the mock pipeline is expected to produce.

    Assembled directly from the plan (assessment provenance left blank),
    pooled over all profiles unless one profile_id is given.
    """
    results = []
    for trial in bench.planned:
        if profile_id is not None and trial.profile_id != profile_id:
            continue
        if trial.klass == "MANUAL":
            results.append(
                TrialScreeningResult(
                    trial_id=trial.trial_id,
                    title=trial.title,
                    verdict=TrialVerdict(
                        value=VerdictValue.MANUAL_ROUTE, manual_reason=trial.manual_reason
                    ),
                )
            )
            continue
        assessments = []
        criteria = []
        for c in trial.criteria:
            criteria.append(Criterion(key=c.key, text=c.text))
            reasoning = ""
            if c.pred_screenable:
                body = {
                    EligibilityLabel.MET: REASONING_MET,
                    EligibilityLabel.NOT_MET: REASONING_NOT_MET,
                    EligibilityLabel.UNKNOWN: REASONING_UNKNOWN,
                }[c.pred_label]
                token = {"met": "met", "not_met": "not met", "unknown": "unknown"}[
                    c.pred_label.value
                ]
                reasoning = f"{body} Conclusion: {token}"
            assessments.append(
                CriterionAssessment.build(
                    key=c.key,
                    screenable=c.pred_screenable,
                    label=c.pred_label,
                    reasoning=reasoning,
                )
            )
        results.append(
            TrialScreeningResult(
                trial_id=trial.trial_id,
                title=trial.title,
                verdict=trial_verdict(assessments),
                assessments=tuple(assessments),
                criteria=tuple(criteria),
                dropout_keys=tuple(a.key for a in assessments if a.dropout),
                all_unknown=all_unknown(assessments),
            )
        )
    results.sort(key=lambda r: r.trial_id)
    return ScreeningRun(
        run_id="benchmark" if profile_id is None else f"benchmark-{profile_id}",
        profile_id=profile_id or ",".join(sorted(PROFILE_DETAILS)),
        params=ModelParams(),
        backend_kind=BackendKind.MOCK,
        results=tuple(results),
        state=RunState.SCREENED,
    )


def write_benchmark(out_dir: Path | str) -> None:
    """Write profiles, trials, mock rules, and gold annotations as files."""
    bench = build_benchmark()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "profiles.jsonl", (p.model_dump(mode="json") for p in bench.profiles))
    write_jsonl(out / "trials.jsonl", (t.model_dump(mode="json") for t in bench.trials))
    atomic_write(out / "mock_rules.json", canonical_json(bench.mock_rules) + "\n")
    rows = []
    for ref in sorted(bench.gold.criteria):
        entry = bench.gold.criteria[ref]
        rows.append(
            {
                "kind": "criterion",
                "key": ref,
                "gold_screenable": entry.gold_screenable,
                "gold_label": entry.gold_label.value,
                "error_pattern": entry.error_pattern.value,
            }
        )
    for trial_id in sorted(bench.gold.trials):
        entry = bench.gold.trials[trial_id]
        rows.append(
            {"kind": "trial", "trial_id": trial_id, "gold_eligible": entry.gold_eligible}
        )
    write_jsonl(out / "gold.jsonl", rows)


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="output directory for fixture files")
    write_benchmark(parser.parse_args().out)
    print("benchmark fixture written")
