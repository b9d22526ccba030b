"""Prompt construction, pluggable completion backends, and response parsing.

Screening talks to a language model in three stages: a selection prompt
asks which of a batch of criteria can be evaluated from the patient
summary, a reasoning prompt asks for step-by-step reasoning on one
selected criterion, and a labeling prompt converts that reasoning into one
of the literal values met / not met / unknown.

Backends share one interface, complete(bundle, params) -> CompletionRecord:

* RemoteBackend posts to an HTTP JSON completion endpoint with bounded
  retries and a bounded number of in-flight requests.
* MockBackend scripts responses from a rule file keyed by criterion-text
  patterns; with a noise seed it perturbs them temperature-dependently.
* ReplayBackend serves previously recorded CompletionRecords verbatim,
  keyed by prompt hash; RecordingBackend wraps another backend and appends
  every record to a replay file.

A prompt hash is the SHA-256 of the canonical JSON of the prompt text plus
the model parameters, over UTF-8 bytes, so it is stable across platforms.
"""
from __future__ import annotations

import json
import random
import re
import threading
import time
from datetime import datetime, timezone
from enum import Enum
from fnmatch import fnmatchcase
from importlib import resources
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import httpx
from pydantic import BaseModel, ConfigDict, model_validator

from prescreen.ioutil import canonical_json, read_jsonl, sha256_hex
from prescreen.model import Criterion, CriterionKey, EligibilityLabel, PatientProfile

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class GatewayError(Exception):
    pass


class BackendError(GatewayError):
    """A backend could not produce a completion (after retries, if any)."""


class ReplayMiss(BackendError):
    """The replay cache has no record for the requested prompt hash."""


class LabelParseError(GatewayError):
    """No label token could be found in a completion."""


class PromptStage(str, Enum):
    SELECTION = "selection"
    REASONING = "reasoning"
    LABELING = "labeling"


class BackendKind(str, Enum):
    REMOTE = "remote"
    MOCK = "mock"
    REPLAY = "replay"


class ModelParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    model_name: str = "mock"
    temperature: float = 0.0
    max_output_tokens: int = 512

    @model_validator(mode="after")
    def _check(self) -> "ModelParams":
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        return self


class PromptBundle(BaseModel):
    model_config = ConfigDict(frozen=True)

    stage: PromptStage
    text: str
    exemplar_id: str
    criterion_keys: tuple[CriterionKey, ...]
    token_estimate: int

    @model_validator(mode="after")
    def _check(self) -> "PromptBundle":
        if not self.criterion_keys:
            raise ValueError("a prompt bundle must reference at least one criterion")
        if self.stage is not PromptStage.SELECTION and len(self.criterion_keys) != 1:
            raise ValueError(f"{self.stage.value} bundles reference exactly one criterion")
        return self


class CompletionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    prompt_hash: str
    raw_response: str
    backend: BackendKind
    latency_ms: int = 0
    created_at: datetime = EPOCH
    retries: int = 0


def prompt_hash(text: str, params: ModelParams) -> str:
    payload = {
        "text": text,
        "model_name": params.model_name,
        "temperature": params.temperature,
        "max_output_tokens": params.max_output_tokens,
    }
    return sha256_hex(canonical_json(payload))


def estimate_tokens(text: str) -> int:
    # rough chars/4 heuristic; only used for batch budgeting
    return max(1, len(text) // 4)


# ---------------------------------------------------------------------------
# Templates


class PromptTemplates:
    """Stage templates plus the one-shot exemplar, loaded from template files.

    The packaged templates carry our own wording; point ``load`` at another
    directory to substitute different wording (e.g. a published prompt set)
    without touching code.
    """

    def __init__(self, selection: str, reasoning: str, labeling: str, exemplar: dict):
        self.selection = selection
        self.reasoning = reasoning
        self.labeling = labeling
        self.exemplar_id: str = exemplar["exemplar_id"]
        self.exemplars = {
            PromptStage.SELECTION: exemplar["selection"],
            PromptStage.REASONING: exemplar["reasoning"],
            PromptStage.LABELING: exemplar["labeling"],
        }

    @classmethod
    def load(cls, directory: Optional[Path | str] = None) -> "PromptTemplates":
        if directory is None:
            root = resources.files("prescreen").joinpath("templates")
            read = lambda name: root.joinpath(name).read_text("utf-8")
        else:
            base = Path(directory)
            read = lambda name: (base / name).read_text("utf-8")
        return cls(
            selection=read("selection.txt"),
            reasoning=read("reasoning.txt"),
            labeling=read("labeling.txt"),
            exemplar=json.loads(read("exemplar.json")),
        )


def _fill(template: str, **slots: str) -> str:
    # plain replacement, not str.format: criterion texts may contain braces
    out = template
    for name, value in slots.items():
        out = out.replace("{" + name + "}", value)
    return out


_CRITERIA_LINE_RE = re.compile(r"^\[(\d+)\] (.*)$", re.M)
_CRITERION_LINE_RE = re.compile(r"^CRITERION: (.*)$", re.M)


def criteria_block(criteria: Sequence[Criterion]) -> str:
    return "\n".join(f"[{i}] {c.text}" for i, c in enumerate(criteria))


def extract_criteria_lines(prompt_text: str) -> list[str]:
    """Criterion texts as enumerated in a selection prompt (used by the mock).

    The one-shot exemplar embeds its own CRITERIA block, so only the block
    after the last "CRITERIA:" header (the actual task) is read.
    """
    head, sep, tail = prompt_text.rpartition("\nCRITERIA:\n")
    segment = tail if sep else prompt_text
    return [m.group(2) for m in _CRITERIA_LINE_RE.finditer(segment)]


def extract_criterion_line(prompt_text: str) -> str:
    # last match: the exemplar's CRITERION line precedes the task's
    matches = _CRITERION_LINE_RE.findall(prompt_text)
    return matches[-1] if matches else ""


def build_selection_prompts(
    profile: PatientProfile,
    criteria: Sequence[Criterion],
    templates: PromptTemplates,
    batch_size: int = 20,
    token_budget: int = 2000,
) -> list[PromptBundle]:
    """Build one or more selection prompts over a section's criteria.

    Criteria are packed into batches of at most ``batch_size`` whose
    rendered prompts stay under ``token_budget`` estimated tokens; the
    batches partition the input in order. A single criterion that alone
    exceeds the budget still gets its own bundle (never silently dropped).
    """
    if not criteria:
        raise ValueError("criteria must be non-empty")
    trial_ids = {c.key.trial_id for c in criteria}
    sections = {c.key.section for c in criteria}
    if len(trial_ids) > 1 or len(sections) > 1:
        raise ValueError("selection batches must come from one trial section")

    def render(batch: Sequence[Criterion]) -> str:
        return _fill(
            templates.selection,
            exemplar=templates.exemplars[PromptStage.SELECTION],
            summary=profile.medical_summary,
            criteria_block=criteria_block(batch),
        )

    bundles: list[PromptBundle] = []
    batch: list[Criterion] = []
    for criterion in criteria:
        candidate = batch + [criterion]
        if batch and (
            len(candidate) > batch_size
            or estimate_tokens(render(candidate)) > token_budget
        ):
            bundles.append(_selection_bundle(render(batch), batch, templates))
            batch = [criterion]
        else:
            batch = candidate
    bundles.append(_selection_bundle(render(batch), batch, templates))
    return bundles


def _selection_bundle(
    text: str, batch: Sequence[Criterion], templates: PromptTemplates
) -> PromptBundle:
    return PromptBundle(
        stage=PromptStage.SELECTION,
        text=text,
        exemplar_id=templates.exemplar_id,
        criterion_keys=tuple(c.key for c in batch),
        token_estimate=estimate_tokens(text),
    )


def build_reasoning_prompt(
    profile: PatientProfile, criterion: Criterion, templates: PromptTemplates
) -> PromptBundle:
    text = _fill(
        templates.reasoning,
        exemplar=templates.exemplars[PromptStage.REASONING],
        summary=profile.medical_summary,
        criterion=criterion.text,
    )
    return PromptBundle(
        stage=PromptStage.REASONING,
        text=text,
        exemplar_id=templates.exemplar_id,
        criterion_keys=(criterion.key,),
        token_estimate=estimate_tokens(text),
    )


def build_labeling_prompt(
    reasoning_text: str, criterion: Criterion, templates: PromptTemplates
) -> PromptBundle:
    text = _fill(
        templates.labeling,
        exemplar=templates.exemplars[PromptStage.LABELING],
        criterion=criterion.text,
        reasoning=reasoning_text,
    )
    return PromptBundle(
        stage=PromptStage.LABELING,
        text=text,
        exemplar_id=templates.exemplar_id,
        criterion_keys=(criterion.key,),
        token_estimate=estimate_tokens(text),
    )


# ---------------------------------------------------------------------------
# Response parsing


class SelectionParse(NamedTuple):
    keys: frozenset[CriterionKey]
    warnings: tuple[str, ...]


_INT_RE = re.compile(r"\d+")
_NONE_RE = re.compile(r"\bnone\b", re.I)
_LABEL_RE = re.compile(r"\bnot[\s_-]+met\b|\bmet\b|\bunknown\b", re.I)


def parse_selection(
    raw_response: str, offered_keys: Sequence[CriterionKey]
) -> SelectionParse:
    """Map the numbers in a selection response back to the offered criteria.

    Numbers refer to the 0-based positions used in the prompt's criteria
    block. Out-of-range numbers are discarded with a warning; a response
    with no numbers at all selects nothing (and is flagged unless it says
    "none").
    """
    warnings: list[str] = []
    numbers = [int(m.group()) for m in _INT_RE.finditer(raw_response)]
    if not numbers and not _NONE_RE.search(raw_response):
        warnings.append(f"unparseable selection response: {raw_response[:80]!r}")
    keys = set()
    for n in numbers:
        if 0 <= n < len(offered_keys):
            keys.add(offered_keys[n])
        else:
            warnings.append(f"selection index {n} outside offered range 0..{len(offered_keys) - 1}")
    return SelectionParse(frozenset(keys), tuple(warnings))


def parse_label(raw_response: str) -> EligibilityLabel:
    """The final label token in a completion, case-insensitively.

    Raises LabelParseError when no token occurs; callers map that to
    unknown plus a diagnostic so garbage can never create a dropout.
    """
    matches = _LABEL_RE.findall(raw_response)
    if not matches:
        raise LabelParseError(f"no label token in response: {raw_response[:80]!r}")
    token = matches[-1].lower()
    if "not" in token:
        return EligibilityLabel.NOT_MET
    if token == "met":
        return EligibilityLabel.MET
    return EligibilityLabel.UNKNOWN


# ---------------------------------------------------------------------------
# Backends


class CompletionBackend:
    """Interface: complete(bundle, params) -> CompletionRecord."""

    kind: BackendKind

    def complete(self, bundle: PromptBundle, params: ModelParams) -> CompletionRecord:
        raise NotImplementedError


class MockRule(BaseModel):
    model_config = ConfigDict(frozen=True)

    pattern: str
    screenable: bool = True
    label: str = "unknown"
    reasoning: str = ""


class MockBackend(CompletionBackend):
    """Scripted backend driven by criterion-text pattern rules.

    The rule file is JSON: {"rules": [{"pattern", "screenable", "label",
    "reasoning"}...], "default": {...}}. Patterns are case-insensitive
    shell-style globs matched against the full criterion text (so "age*"
    matches criteria starting with "age"); the first matching rule wins and
    the default applies otherwise. Labels use the literal response tokens
    "met" / "not met" / "unknown".

    With ``noise_seed`` set, scripted outcomes are perturbed with
    probability min(0.5, 0.25 * temperature) per criterion; the RNG is
    derived from (seed, prompt hash), so results do not depend on call
    order or parallelism, and temperature 0 stays noise-free.
    """

    kind = BackendKind.MOCK

    def __init__(self, rules: Sequence[MockRule], default: MockRule, noise_seed: Optional[int] = None):
        self.rules = list(rules)
        self.default = default
        self.noise_seed = noise_seed

    @classmethod
    def from_file(cls, path: Path | str, noise_seed: Optional[int] = None) -> "MockBackend":
        raw = json.loads(Path(path).read_text("utf-8"))
        return cls.from_dict(raw, noise_seed=noise_seed)

    @classmethod
    def from_dict(cls, raw: dict, noise_seed: Optional[int] = None) -> "MockBackend":
        rules = [MockRule(**r) for r in raw.get("rules", [])]
        default = MockRule(pattern="*", **raw.get("default", {"screenable": False}))
        return cls(rules, default, noise_seed=noise_seed)

    def _rule_for(self, criterion_text: str) -> MockRule:
        lowered = criterion_text.lower()
        for rule in self.rules:
            if fnmatchcase(lowered, rule.pattern.lower()):
                return rule
        return self.default

    def _rng(self, phash: str) -> random.Random:
        return random.Random(f"{self.noise_seed}:{phash}")

    def _noise_rate(self, params: ModelParams) -> float:
        if self.noise_seed is None:
            return 0.0
        return min(0.5, 0.25 * params.temperature)

    def complete(self, bundle: PromptBundle, params: ModelParams) -> CompletionRecord:
        phash = prompt_hash(bundle.text, params)
        rate = self._noise_rate(params)
        rng = self._rng(phash)
        if bundle.stage is PromptStage.SELECTION:
            lines = extract_criteria_lines(bundle.text)
            picked = []
            for i, text in enumerate(lines):
                screenable = self._rule_for(text).screenable
                if rate and rng.random() < rate:
                    screenable = not screenable
                if screenable:
                    picked.append(i)
            response = ", ".join(str(i) for i in picked) if picked else "none"
        elif bundle.stage is PromptStage.REASONING:
            rule = self._rule_for(extract_criterion_line(bundle.text))
            body = rule.reasoning or "The summary addresses this criterion directly."
            response = f"{body} Conclusion: {rule.label}"
        else:
            rule = self._rule_for(extract_criterion_line(bundle.text))
            label = rule.label
            if rate and rng.random() < rate:
                label = rng.choice([v for v in ("met", "not met", "unknown") if v != label])
            response = label
        return CompletionRecord(
            prompt_hash=phash,
            raw_response=response,
            backend=BackendKind.MOCK,
            latency_ms=0,
            created_at=EPOCH,
        )


class RemoteConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    base_url: str
    api_key_env: str = ""
    timeout_s: float = 60.0
    max_in_flight: int = 4
    max_attempts: int = 3
    backoff_s: tuple[float, ...] = (1.0, 2.0, 4.0)
    response_text_path: str = "text"


def _dig(payload: dict, dotted: str):
    value = payload
    for part in dotted.split("."):
        if isinstance(value, list):
            value = value[int(part)]
        else:
            value = value[part]
    return value


class RemoteBackend(CompletionBackend):
    """HTTP JSON completion endpoint client.

    Request body: {"model", "prompt", "temperature", "max_output_tokens"};
    the response text is read from ``response_text_path`` (dotted path,
    default "text"). Retries transport errors, 5xx, and 429, with 1s/2s/4s
    backoff; anything else fails immediately. The API key is read from the
    environment variable named in the config, never from the config itself.
    """

    kind = BackendKind.REMOTE

    def __init__(
        self,
        config: RemoteConfig,
        client: Optional[httpx.Client] = None,
        sleeper: Callable[[float], None] = time.sleep,
        clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
    ):
        import os

        self.config = config
        headers = {}
        if config.api_key_env:
            key = os.environ.get(config.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        self._client = client or httpx.Client(timeout=config.timeout_s, headers=headers)
        self._sleeper = sleeper
        self._clock = clock
        self._slots = threading.BoundedSemaphore(config.max_in_flight)

    def complete(self, bundle: PromptBundle, params: ModelParams) -> CompletionRecord:
        phash = prompt_hash(bundle.text, params)
        body = {
            "model": params.model_name,
            "prompt": bundle.text,
            "temperature": params.temperature,
            "max_output_tokens": params.max_output_tokens,
        }
        started = time.monotonic()
        last_error = ""
        for attempt in range(self.config.max_attempts):
            if attempt:
                self._sleeper(self.config.backoff_s[min(attempt - 1, len(self.config.backoff_s) - 1)])
            try:
                with self._slots:
                    response = self._client.post(self.config.base_url, json=body)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                continue
            if response.status_code == 429 or response.status_code >= 500:
                last_error = f"HTTP {response.status_code}"
                continue
            if response.status_code != 200:
                raise BackendError(
                    f"completion endpoint {self.config.base_url} returned HTTP {response.status_code}"
                )
            try:
                text = _dig(response.json(), self.config.response_text_path)
            except (KeyError, IndexError, ValueError, json.JSONDecodeError) as exc:
                raise BackendError(f"malformed completion response: {exc}") from exc
            return CompletionRecord(
                prompt_hash=phash,
                raw_response=str(text),
                backend=BackendKind.REMOTE,
                latency_ms=int((time.monotonic() - started) * 1000),
                created_at=self._clock(),
                retries=attempt,
            )
        raise BackendError(
            f"completion endpoint {self.config.base_url} failed after "
            f"{self.config.max_attempts} attempts ({last_error})"
        )


class ReplayBackend(CompletionBackend):
    """Serves recorded completions verbatim; a miss is a hard error."""

    kind = BackendKind.REPLAY

    def __init__(self, records: dict[str, CompletionRecord]):
        self._records = records

    @classmethod
    def from_file(cls, path: Path | str) -> "ReplayBackend":
        records: dict[str, CompletionRecord] = {}
        for _, raw in read_jsonl(path):
            record = CompletionRecord(**raw)
            records[record.prompt_hash] = record  # last record wins
        return cls(records)

    def complete(self, bundle: PromptBundle, params: ModelParams) -> CompletionRecord:
        phash = prompt_hash(bundle.text, params)
        record = self._records.get(phash)
        if record is None:
            raise ReplayMiss(f"no recorded completion for prompt hash {phash}")
        return record


class RecordingBackend(CompletionBackend):
    """Wraps a backend and appends every completion to a replay file.

    Repeated prompts are served from memory rather than re-requested, so a
    recorded session is always internally consistent and replayable.
    """

    def __init__(self, inner: CompletionBackend, path: Path | str):
        self.inner = inner
        self.kind = inner.kind
        self.path = Path(path)
        self._seen: dict[str, CompletionRecord] = {}
        self._lock = threading.Lock()

    def complete(self, bundle: PromptBundle, params: ModelParams) -> CompletionRecord:
        from prescreen.ioutil import append_jsonl

        phash = prompt_hash(bundle.text, params)
        with self._lock:
            cached = self._seen.get(phash)
        if cached is not None:
            return cached
        record = self.inner.complete(bundle, params)
        with self._lock:
            if phash not in self._seen:
                self._seen[phash] = record
                append_jsonl(self.path, record.model_dump(mode="json"))
            record = self._seen[phash]
        return record
