"""Trial registry ingest: fixture loading, a generic HTTP adapter, profiles.

Trials arrive either from a line-delimited JSON fixture file (one trial
per line, field names as in TrialRecord) or from a registry HTTP endpoint
described by a RegistrySource. Either way the output is the same: a
deterministically ordered list of canonical TrialRecords plus an
IngestReport of what was fetched, filtered, deduplicated, or rejected.

Wire records are normalized leniently (age strings like "18 Years",
comma-separated country lists, mixed-case sex values); a record that still
cannot become a valid TrialRecord is listed in the report's failures and
never aborts the batch. HTTP responses are cached on disk keyed by a hash
of the query so past experiments stay reproducible offline.
"""
from __future__ import annotations

import re
import time
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import httpx
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from prescreen.ioutil import canonical_json, read_jsonl, sha256_hex, write_jsonl
from prescreen.model import (
    AcceptedSex,
    PatientProfile,
    Sex,
    TrialRecord,
    TrialStatus,
)


class RegistryError(Exception):
    pass


class TransportFailure(RegistryError):
    """Registry endpoint unreachable after retries; safe to retry later."""

    def __init__(self, source: str, detail: str):
        super().__init__(f"registry fetch from {source} failed: {detail}")
        self.source = source


class ProfileLoadError(RegistryError):
    pass


class RegistryQuery(BaseModel):
    model_config = ConfigDict(frozen=True)

    condition: str
    country: Optional[str] = None
    age: Optional[int] = None
    sex: Optional[Sex] = None
    max_results: int = 1000

    @model_validator(mode="after")
    def _check(self) -> "RegistryQuery":
        if not self.condition.strip():
            raise ValueError("condition must be non-empty")
        if self.max_results < 1:
            raise ValueError("max_results must be >= 1")
        return self


class RegistrySource(BaseModel):
    """Where trials come from: a fixture file and/or an HTTP endpoint.

    ``param_map`` renames our query fields to the endpoint's parameter
    names; ``records_path`` is a dotted path to the record list inside the
    response JSON, and ``next_page_path`` to the next page number (absent
    or null ends pagination). The API key, if any, comes from the
    environment variable named by ``api_key_env``.
    """

    model_config = ConfigDict(frozen=True)

    fixture_path: Optional[str] = None
    base_url: Optional[str] = None
    param_map: dict[str, str] = {}
    records_path: str = "records"
    next_page_path: str = "next_page"
    page_size: int = 100
    api_key_env: str = ""
    cache_dir: Optional[str] = None
    max_attempts: int = 3
    backoff_s: tuple[float, ...] = (1.0, 2.0, 4.0)

    @model_validator(mode="after")
    def _check(self) -> "RegistrySource":
        if not self.fixture_path and not self.base_url:
            raise ValueError("source needs a fixture_path or a base_url")
        return self


class IngestReport(BaseModel):
    fetched: int = 0
    prefilter_passed: int = 0
    deduplicated: int = 0
    failures: list[tuple[str, str]] = []
    warnings: list[str] = []

    @model_validator(mode="after")
    def _check(self) -> "IngestReport":
        if self.prefilter_passed > self.fetched:
            raise ValueError("prefilter_passed cannot exceed fetched")
        return self


class FetchResult(NamedTuple):
    records: list[TrialRecord]
    report: IngestReport


_AGE_RE = re.compile(r"^\s*(\d+)\s*(year|month|week|day)s?\s*$", re.I)


def normalize_age(value, warnings: list[str], context: str) -> Optional[int]:
    """Registry age fields as integer years; sub-year units floor to 0."""
    if value is None or value == "":
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    m = _AGE_RE.match(str(value))
    if not m:
        raise ValueError(f"unrecognized age value {value!r}")
    amount, unit = int(m.group(1)), m.group(2).lower()
    if unit == "year":
        return amount
    warnings.append(f"{context}: age {value!r} below one year, normalized to 0")
    return 0


def _normalize_sex(value) -> AcceptedSex:
    if value is None or value == "":
        return AcceptedSex.ALL
    return AcceptedSex(str(value).strip().lower())


def _normalize_status(value) -> TrialStatus:
    if str(value).strip().lower() == "recruiting":
        return TrialStatus.RECRUITING
    return TrialStatus.OTHER


def _normalize_list(value) -> tuple[str, ...]:
    if value is None or value == "":
        return ()
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return tuple(str(v) for v in value)


def normalize_record(raw: dict, warnings: list[str]) -> TrialRecord:
    """One wire/fixture record as a canonical TrialRecord (raises on bad data)."""
    trial_id = str(raw.get("trial_id") or "").strip()
    if not trial_id:
        raise ValueError("missing trial_id")
    text = raw.get("eligibility_text")
    if not isinstance(text, str) or not text.strip():
        raise ValueError("missing eligibility_text")
    return TrialRecord(
        trial_id=trial_id,
        title=str(raw.get("title") or ""),
        condition_codes=_normalize_list(raw.get("condition_codes")),
        eligibility_text=text,
        min_age=normalize_age(raw.get("min_age"), warnings, trial_id),
        max_age=normalize_age(raw.get("max_age"), warnings, trial_id),
        accepted_sex=_normalize_sex(raw.get("accepted_sex")),
        countries=_normalize_list(raw.get("countries")),
        status=_normalize_status(raw.get("status", "")),
    )


def query_accepts(query: RegistryQuery, trial: TrialRecord) -> bool:
    """Demographic prefilter driven by whichever query fields are present.

    Field semantics match core demographic_prefilter exactly; a query with
    age, sex, and country set accepts a trial iff a profile with those
    demographics passes the core prefilter. The condition matches by code
    equality only ("*" matches anything), and records that carry no
    condition codes always pass the condition check.
    """
    if query.age is not None:
        if trial.min_age is not None and query.age < trial.min_age:
            return False
        if trial.max_age is not None and query.age > trial.max_age:
            return False
    if query.sex is not None:
        if trial.accepted_sex is not AcceptedSex.ALL and trial.accepted_sex.value != query.sex.value:
            return False
    if query.country is not None and trial.countries:
        if query.country.upper() not in {c.upper() for c in trial.countries}:
            return False
    wanted = query.condition.strip().lower()
    if trial.condition_codes and wanted != "*":
        if wanted not in {c.lower() for c in trial.condition_codes}:
            return False
    return True


def _load_raw_records(path: Path | str, report: IngestReport) -> list[TrialRecord]:
    records = []
    for lineno, raw in read_jsonl(path):
        report.fetched += 1
        try:
            records.append(normalize_record(raw, report.warnings))
        except (ValueError, ValidationError) as exc:
            source_id = str(raw.get("trial_id") or f"line {lineno}")
            report.failures.append((source_id, _first_reason(exc)))
    return records


def _first_reason(exc: Exception) -> str:
    if isinstance(exc, ValidationError):
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"]) or "record"
        return f"{loc}: {err['msg']}"
    return str(exc)


def _finalize(
    records: list[TrialRecord], query: RegistryQuery, report: IngestReport
) -> FetchResult:
    kept: dict[str, TrialRecord] = {}
    for record in records:
        if not query_accepts(query, record):
            continue
        if record.trial_id in kept:
            report.deduplicated += 1
            continue
        kept[record.trial_id] = record
    ordered = [kept[tid] for tid in sorted(kept)][: query.max_results]
    report.prefilter_passed = len(ordered)
    return FetchResult(ordered, report)


def _cache_path(source: RegistrySource, query: RegistryQuery) -> Optional[Path]:
    if not source.cache_dir:
        return None
    digest = sha256_hex(
        canonical_json({"query": query.model_dump(mode="json"), "base_url": source.base_url})
    )
    return Path(source.cache_dir) / f"registry-{digest[:16]}.jsonl"


def _fetch_http(
    source: RegistrySource,
    query: RegistryQuery,
    report: IngestReport,
    client: Optional[httpx.Client],
    sleeper: Callable[[float], None],
) -> list[TrialRecord]:
    import os

    headers = {}
    if source.api_key_env:
        key = os.environ.get(source.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
    own_client = client is None
    client = client or httpx.Client(timeout=60.0, headers=headers)
    try:
        records: list[TrialRecord] = []
        page: Optional[int] = 1
        while page is not None and len(records) < query.max_results:
            payload = _get_page(source, query, page, client, sleeper)
            raw_records = _dig(payload, source.records_path) or []
            for raw in raw_records:
                report.fetched += 1
                try:
                    records.append(normalize_record(raw, report.warnings))
                except (ValueError, ValidationError) as exc:
                    source_id = str(raw.get("trial_id") or f"page {page}")
                    report.failures.append((source_id, _first_reason(exc)))
            page = _dig_optional(payload, source.next_page_path)
        return records
    finally:
        if own_client:
            client.close()


def _get_page(
    source: RegistrySource,
    query: RegistryQuery,
    page: int,
    client: httpx.Client,
    sleeper: Callable[[float], None],
) -> dict:
    params = {"page": page, "page_size": source.page_size}
    for field, value in (
        ("condition", query.condition),
        ("country", query.country),
        ("age", query.age),
        ("sex", query.sex.value if query.sex else None),
    ):
        if value is not None:
            params[source.param_map.get(field, field)] = value
    last_error = ""
    for attempt in range(source.max_attempts):
        if attempt:
            sleeper(source.backoff_s[min(attempt - 1, len(source.backoff_s) - 1)])
        try:
            response = client.get(source.base_url, params=params)
        except httpx.TransportError as exc:
            last_error = f"transport error: {exc}"
            continue
        if response.status_code == 429 or response.status_code >= 500:
            last_error = f"HTTP {response.status_code}"
            continue
        if response.status_code != 200:
            raise RegistryError(f"registry returned HTTP {response.status_code} for {source.base_url}")
        return response.json()
    raise TransportFailure(str(source.base_url), last_error)


def _dig(payload: dict, dotted: str):
    value = payload
    for part in dotted.split("."):
        if value is None:
            return None
        value = value.get(part) if isinstance(value, dict) else None
    return value


def _dig_optional(payload: dict, dotted: str) -> Optional[int]:
    value = _dig(payload, dotted)
    return int(value) if value is not None else None


def fetch_trials(
    query: RegistryQuery,
    source: RegistrySource,
    client: Optional[httpx.Client] = None,
    sleeper: Callable[[float], None] = time.sleep,
) -> FetchResult:
    """Trials matching the query, deterministically ordered by trial_id.

    Fixture sources are read directly. HTTP sources are paged through
    with retries on transport errors, 5xx, and 429; with ``cache_dir`` set
    the normalized result set is served from and written to a per-query
    cache file. Records that fail normalization are reported, not fatal.
    """
    report = IngestReport()
    if source.fixture_path:
        records = _load_raw_records(source.fixture_path, report)
        return _finalize(records, query, report)
    cache = _cache_path(source, query)
    if cache and cache.exists():
        records = _load_raw_records(cache, report)
        return _finalize(records, query, report)
    records = _fetch_http(source, query, report, client, sleeper)
    if cache:
        write_jsonl(cache, (r.model_dump(mode="json") for r in records))
    return _finalize(records, query, report)


def write_trials(path: Path | str, records: list[TrialRecord]) -> None:
    """Serialize trials in the same line-delimited format fetch_trials reads."""
    write_jsonl(path, (r.model_dump(mode="json") for r in records))


def load_profiles(path: Path | str) -> list[PatientProfile]:
    """Patient profiles from a line-delimited JSON file, one per line."""
    profiles: list[PatientProfile] = []
    seen: dict[str, int] = {}
    for lineno, raw in read_jsonl(path):
        try:
            profile = PatientProfile(**raw)
        except ValidationError as exc:
            raise ProfileLoadError(f"{path} line {lineno}: {_first_reason(exc)}") from exc
        if profile.profile_id in seen:
            raise ProfileLoadError(
                f"{path} line {lineno}: duplicate profile_id {profile.profile_id!r} "
                f"(first seen on line {seen[profile.profile_id]})"
            )
        seen[profile.profile_id] = lineno
        profiles.append(profile)
    return profiles
