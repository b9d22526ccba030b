"""Eligibility-text parsing: section splitting and criterion segmentation.

A trial's raw eligibility text is first split into an inclusion and an
exclusion body by locating heading lines, then each body is segmented into
atomic criteria. Trials whose structure cannot be established are returned
as a ParseFailure value (never an exception) so the caller can route them
to manual review.

Segmentation rules (the heading variants and marker set live in
data/parser_rules.json, versioned separately from this engine):

* A "marker line" starts, after indentation, with a bullet character
  followed by whitespace, or with a number marker such as ``1.`` / ``2)`` /
  ``(3)``.
* The minimum indentation over all marker lines in a section body is the
  top level. Marker lines at that indentation start a new criterion.
* Marker lines indented deeper are sub-bullets and fold into the criterion
  above them (recorded in diagnostics); a sub-bullet is rarely evaluable on
  its own.
* Non-marker lines continue the open criterion (registry texts wrap long
  criteria over indented plain lines).
* Text appearing before the first marker line forms its own criteria, one
  per blank-line-separated block.
* A body with no marker lines at all is segmented into blank-line-separated
  blocks.

Whitespace inside a criterion is collapsed to single spaces; markers are
dropped. Nothing else is removed, so joining the criterion texts of a
section reproduces every non-whitespace character of its source body.
"""
from __future__ import annotations

import json
import re
from enum import Enum
from importlib import resources
from typing import Optional, Union

from pydantic import BaseModel, ConfigDict

from prescreen.model import Criterion, CriterionKey, Section, TrialRecord

_DASHES = str.maketrans({"–": "-", "—": "-"})


class FailureReason(str, Enum):
    NO_HEADINGS = "no_headings"
    AMBIGUOUS_HEADINGS = "ambiguous_headings"
    EMPTY_SECTIONS = "empty_sections"


class ParseFailure(BaseModel):
    model_config = ConfigDict(frozen=True)

    trial_id: str = ""
    reason: FailureReason
    detail: str = ""


class SectionBodies(BaseModel):
    model_config = ConfigDict(frozen=True)

    inclusion_body: str
    exclusion_body: str


class ParsedCriteria(BaseModel):
    model_config = ConfigDict(frozen=True)

    trial_id: str
    inclusion: tuple[Criterion, ...] = ()
    exclusion: tuple[Criterion, ...] = ()
    diagnostics: tuple[str, ...] = ()

    @property
    def criteria(self) -> tuple[Criterion, ...]:
        return self.inclusion + self.exclusion

    def section(self, section: Section) -> tuple[Criterion, ...]:
        return self.inclusion if section is Section.INCLUSION else self.exclusion


class ParserRules:
    """Marker set and heading variants loaded from the versioned data file."""

    def __init__(self, raw: dict):
        self.version: int = raw["version"]
        self.inclusion_headings = {self._normalize_heading(h) for h in raw["inclusion_headings"]}
        self.exclusion_headings = {self._normalize_heading(h) for h in raw["exclusion_headings"]}
        self.bullet_markers: list[str] = list(raw["bullet_markers"])
        bullets = "|".join(re.escape(b) for b in self.bullet_markers)
        # bullet must be followed by whitespace so "-5 mg" is not a marker
        self.marker_re = re.compile(rf"^(?:(?:{bullets})(?=\s)|{raw['numbered_marker_pattern']})")

    @staticmethod
    def _normalize_heading(line: str) -> str:
        line = line.translate(_DASHES).lower()
        line = line.lstrip("#").strip()
        line = line.rstrip(":").strip()
        return " ".join(line.split())

    def heading_family(self, line: str) -> Optional[Section]:
        norm = self._normalize_heading(line)
        if norm in self.inclusion_headings:
            return Section.INCLUSION
        if norm in self.exclusion_headings:
            return Section.EXCLUSION
        return None

    def strip_marker(self, line: str) -> tuple[bool, str]:
        """(was a marker line, text with the leading marker removed)."""
        stripped = line.lstrip()
        m = self.marker_re.match(stripped)
        if m:
            return True, stripped[m.end():]
        return False, stripped


_default_rules: Optional[ParserRules] = None


def load_rules() -> ParserRules:
    global _default_rules
    if _default_rules is None:
        raw = json.loads(
            resources.files("prescreen").joinpath("data/parser_rules.json").read_text("utf-8")
        )
        _default_rules = ParserRules(raw)
    return _default_rules


def split_sections(
    eligibility_text: str, rules: Optional[ParserRules] = None
) -> Union[SectionBodies, ParseFailure]:
    """Split raw eligibility text into inclusion and exclusion bodies.

    The heading lines themselves are excluded from the bodies; text before
    the first heading is not part of either section. A single inclusion
    heading is required; repeated headings of either family (per-cohort
    criteria blocks) are ambiguous and fail.
    """
    rules = rules or load_rules()
    lines = eligibility_text.splitlines()
    headings = [(i, fam) for i, ln in enumerate(lines) if (fam := rules.heading_family(ln))]

    inclusion_at = [i for i, fam in headings if fam is Section.INCLUSION]
    exclusion_at = [i for i, fam in headings if fam is Section.EXCLUSION]
    if not inclusion_at:
        return ParseFailure(reason=FailureReason.NO_HEADINGS, detail="no inclusion heading found")
    if len(inclusion_at) > 1 or len(exclusion_at) > 1:
        return ParseFailure(
            reason=FailureReason.AMBIGUOUS_HEADINGS,
            detail=(
                f"{len(inclusion_at)} inclusion and {len(exclusion_at)} exclusion headings; "
                "per-cohort criteria cannot be separated"
            ),
        )

    boundaries = sorted(i for i, _ in headings)

    def body_after(idx: int) -> str:
        following = [b for b in boundaries if b > idx]
        end = following[0] if following else len(lines)
        return "\n".join(lines[idx + 1 : end])

    inclusion_body = body_after(inclusion_at[0])
    exclusion_body = body_after(exclusion_at[0]) if exclusion_at else ""
    if not inclusion_body.strip() and not exclusion_body.strip():
        return ParseFailure(reason=FailureReason.EMPTY_SECTIONS, detail="headings carry no content")
    return SectionBodies(inclusion_body=inclusion_body, exclusion_body=exclusion_body)


def segment_criteria(
    section_body: str,
    section: Section,
    trial_id: str = "",
    rules: Optional[ParserRules] = None,
    diagnostics: Optional[list[str]] = None,
) -> list[Criterion]:
    """Segment one section body into ordered atomic criteria.

    See the module docstring for the exact rules. Empty bodies give an
    empty list; ordinals are dense in source order.
    """
    rules = rules or load_rules()
    diagnostics = diagnostics if diagnostics is not None else []
    lines = section_body.splitlines()

    marker_indents = []
    for line in lines:
        is_marker, _ = rules.strip_marker(line)
        if is_marker and line.strip():
            marker_indents.append(len(line) - len(line.lstrip()))
    base_indent = min(marker_indents) if marker_indents else None

    texts: list[str] = []
    parts: Optional[list[str]] = None  # parts of the criterion being built
    seen_marker = False

    def flush() -> None:
        nonlocal parts
        if parts is not None:
            text = " ".join(" ".join(parts).split())
            if text:
                texts.append(text)
            parts = None

    for line in lines:
        if not line.strip():
            if not seen_marker:
                flush()  # blank line separates pre-marker blocks
            continue
        indent = len(line) - len(line.lstrip())
        is_marker, remainder = rules.strip_marker(line)
        if is_marker:
            if not seen_marker:
                flush()
                seen_marker = True
            if indent == base_indent:
                flush()
                parts = [remainder]
            else:
                if parts is None:
                    parts = [remainder]
                else:
                    parts.append(remainder)
                    diagnostics.append(
                        f"{section.value}: folded sub-bullet into criterion {len(texts)}"
                    )
        else:
            if parts is None:
                parts = [remainder]
            else:
                parts.append(remainder)
    flush()

    return [
        Criterion(key=CriterionKey(trial_id=trial_id, section=section, ordinal=i), text=t)
        for i, t in enumerate(texts)
    ]


def parse_trial(
    trial: TrialRecord, rules: Optional[ParserRules] = None
) -> Union[ParsedCriteria, ParseFailure]:
    """Split and segment a trial's eligibility text.

    Inclusion-only texts are accepted (empty exclusion list). A text whose
    sections yield no criteria at all fails as empty_sections.
    """
    rules = rules or load_rules()
    bodies = split_sections(trial.eligibility_text, rules)
    if isinstance(bodies, ParseFailure):
        return bodies.model_copy(update={"trial_id": trial.trial_id})

    diagnostics: list[str] = []
    inclusion = segment_criteria(
        bodies.inclusion_body, Section.INCLUSION, trial.trial_id, rules, diagnostics
    )
    exclusion = segment_criteria(
        bodies.exclusion_body, Section.EXCLUSION, trial.trial_id, rules, diagnostics
    )
    if not inclusion and not exclusion:
        return ParseFailure(
            trial_id=trial.trial_id,
            reason=FailureReason.EMPTY_SECTIONS,
            detail="no criteria could be segmented from either section",
        )
    return ParsedCriteria(
        trial_id=trial.trial_id,
        inclusion=tuple(inclusion),
        exclusion=tuple(exclusion),
        diagnostics=tuple(diagnostics),
    )


def render_criteria(parsed: ParsedCriteria) -> str:
    """Render parsed criteria back to canonical eligibility text.

    parse_trial on the rendered text reproduces the same criteria, which is
    the parser's idempotence check.
    """
    lines = ["Inclusion Criteria:"]
    lines += [f"- {c.text}" for c in parsed.inclusion]
    lines.append("Exclusion Criteria:")
    lines += [f"- {c.text}" for c in parsed.exclusion]
    return "\n".join(lines) + "\n"
