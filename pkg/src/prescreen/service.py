"""HTTP service over the screening engine, with durable per-run storage.

Each run lives in its own directory as an append-only event log (created,
screened, queue_built, decisions) plus a snapshot written after every
mutation. Reload replays the log through the same engine functions that
produced it, so a crash between snapshot writes loses nothing and a
reloaded run carries identical verdicts and version numbers.

The API is small and JSON-only:

    POST /runs                  start screening (async; status pollable)
    GET  /runs/{id}             run envelope: status, version, etag, links
    GET  /runs/{id}/queue       the physician review queue
    POST /runs/{id}/decisions   apply decisions (If-Match etag required)
    GET  /runs/{id}/verdicts    per-trial verdicts incl. manual resolutions
    GET  /runs/{id}/report      evaluation report (gold-based or workload-only)

Writes are serialized per store through a lock plus the run's version
counter; a stale If-Match leaves the run untouched. GETs never mutate:
the review queue is built eagerly right after screening finishes.
"""
from __future__ import annotations

import threading
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from fastapi import BackgroundTasks, FastAPI, Header, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, ValidationError

from prescreen import engine as engine_mod
from prescreen.engine import (
    DecisionError,
    EngineConfig,
    ReviewDecision,
    RunState,
    ScreeningRun,
    StateError,
    VersionConflict,
    apply_decisions,
    build_review_queue,
    workload_stats,
)
from prescreen.evaluation import EvaluationError, GoldAnnotations, evaluate
from prescreen.gateway import (
    CompletionBackend,
    MockBackend,
    ModelParams,
    RecordingBackend,
    RemoteBackend,
    RemoteConfig,
    ReplayBackend,
)
from prescreen.ioutil import append_jsonl, atomic_write, canonical_json, read_jsonl
from prescreen.model import PatientProfile, VerdictValue
from prescreen.registry import load_profiles, normalize_record


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


class ServiceConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    storage_dir: str
    profiles_path: str
    fixtures_root: str
    gold_path: Optional[str] = None
    backend: str = "mock"
    mock_rules_path: Optional[str] = None
    noise_seed: Optional[int] = None
    replay_path: Optional[str] = None
    record_path: Optional[str] = None
    remote: Optional[RemoteConfig] = None
    params: ModelParams = ModelParams()
    engine: EngineConfig = EngineConfig()

    @classmethod
    def load(cls, path: Path | str) -> "ServiceConfig":
        import json

        return cls(**json.loads(Path(path).read_text("utf-8")))


def build_backend(config: ServiceConfig) -> CompletionBackend:
    if config.backend == "mock":
        if not config.mock_rules_path:
            raise ValueError("mock backend requires mock_rules_path")
        backend: CompletionBackend = MockBackend.from_file(
            config.mock_rules_path, noise_seed=config.noise_seed
        )
    elif config.backend == "replay":
        if not config.replay_path:
            raise ValueError("replay backend requires replay_path")
        backend = ReplayBackend.from_file(config.replay_path)
    elif config.backend == "remote":
        if config.remote is None:
            raise ValueError("remote backend requires a remote config block")
        backend = RemoteBackend(config.remote)
    else:
        raise ValueError(f"unknown backend {config.backend!r}")
    if config.record_path:
        backend = RecordingBackend(backend, config.record_path)
    return backend


class RunRecord:
    """In-memory handle for one run: the engine object plus job status."""

    def __init__(self, run_id: str):
        self.run_id = run_id
        self.status = "pending"
        self.run: Optional[ScreeningRun] = None
        self.error: Optional[str] = None
        self.profile: Optional[PatientProfile] = None


class RunStore:
    """Runs on disk: one directory per run with events.jsonl and snapshot.json."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.root = Path(config.storage_dir)
        self.runs_dir = self.root / "runs"
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.jsonl"
        self._lock = threading.Lock()
        self._records: dict[str, RunRecord] = {}
        self._idempotency: dict[str, str] = {}
        self._profiles = {p.profile_id: p for p in load_profiles(config.profiles_path)}
        self._gold: Optional[GoldAnnotations] = (
            GoldAnnotations.load(config.gold_path) if config.gold_path else None
        )
        self._backend = build_backend(config)
        self._reload()

    # -- persistence ----------------------------------------------------

    def _run_dir(self, run_id: str) -> Path:
        return self.runs_dir / run_id

    def _append_event(self, run_id: str, event: dict) -> None:
        append_jsonl(self._run_dir(run_id) / "events.jsonl", event)

    def _write_snapshot(self, record: RunRecord) -> None:
        payload = {
            "status": record.status,
            "error": record.error,
            "run": record.run.model_dump(mode="json") if record.run else None,
        }
        atomic_write(self._run_dir(record.run_id) / "snapshot.json", canonical_json(payload) + "\n")

    def _reload(self) -> None:
        if self.index_path.exists():
            for _, raw in read_jsonl(self.index_path):
                if raw.get("idempotency_key"):
                    self._idempotency[raw["idempotency_key"]] = raw["run_id"]
        for run_dir in sorted(self.runs_dir.iterdir()) if self.runs_dir.exists() else []:
            if not run_dir.is_dir():
                continue
            record = self._replay_events(run_dir)
            if record is not None:
                self._records[record.run_id] = record

    def _replay_events(self, run_dir: Path) -> Optional[RunRecord]:
        events_path = run_dir / "events.jsonl"
        if not events_path.exists():
            return None
        record: Optional[RunRecord] = None
        for _, event in read_jsonl(events_path):
            kind = event["type"]
            if kind == "created":
                record = RunRecord(event["run_id"])
                record.profile = self._profiles.get(event["profile_id"])
            elif record is None:
                continue
            elif kind == "failed":
                record.status = "failed"
                record.error = event["error"]
            elif kind == "screened":
                record.run = ScreeningRun(**event["run"])
                record.status = record.run.state.value
            elif kind == "queue_built" and record.run is not None:
                build_review_queue(record.run)
                record.status = record.run.state.value
            elif kind == "decisions" and record.run is not None:
                decisions = [ReviewDecision(**d) for d in event["decisions"]]
                apply_decisions(record.run, decisions)
                record.status = record.run.state.value
        if record is not None and record.run is None and record.status == "pending":
            record.status = "failed"
            record.error = "screening was interrupted before completion"
        return record

    # -- resolution -----------------------------------------------------

    def profile_for(self, profile_id: str) -> PatientProfile:
        profile = self._profiles.get(profile_id)
        if profile is None:
            raise ServiceError(404, "not_found", f"unknown profile {profile_id!r}")
        return profile

    def resolve_trials(self, trial_set_ref: str):
        root = Path(self.config.fixtures_root).resolve()
        path = (root / trial_set_ref).resolve()
        if root not in path.parents and path != root:
            raise ServiceError(422, "invalid_ref", f"trial_set_ref escapes the fixtures root")
        if not path.is_file():
            raise ServiceError(404, "not_found", f"unknown trial set {trial_set_ref!r}")
        trials = []
        warnings: list[str] = []
        for lineno, raw in read_jsonl(path):
            try:
                trials.append(normalize_record(raw, warnings))
            except (ValueError, ValidationError) as exc:
                raise ServiceError(
                    422, "invalid_ref", f"{trial_set_ref} line {lineno}: {exc}"
                ) from exc
        return trials

    def gold_for(self, gold_ref: Optional[str]) -> Optional[GoldAnnotations]:
        if gold_ref:
            root = Path(self.config.fixtures_root).resolve()
            path = (root / gold_ref).resolve()
            if root not in path.parents or not path.is_file():
                raise ServiceError(404, "not_found", f"unknown gold file {gold_ref!r}")
            return GoldAnnotations.load(path)
        return self._gold

    # -- operations -----------------------------------------------------

    def create_run(
        self,
        profile_id: str,
        trial_set_ref: str,
        params: Optional[ModelParams],
        idempotency_key: Optional[str],
    ) -> RunRecord:
        with self._lock:
            if idempotency_key and idempotency_key in self._idempotency:
                return self._records[self._idempotency[idempotency_key]]
            profile = self.profile_for(profile_id)
            self.resolve_trials(trial_set_ref)  # validate before accepting
            run_id = uuid.uuid4().hex[:12]
            record = RunRecord(run_id)
            record.profile = profile
            self._records[run_id] = record
            if idempotency_key:
                self._idempotency[idempotency_key] = run_id
            self._run_dir(run_id).mkdir(parents=True, exist_ok=True)
            self._append_event(
                run_id,
                {
                    "type": "created",
                    "run_id": run_id,
                    "profile_id": profile_id,
                    "trial_set_ref": trial_set_ref,
                    "params": (params or self.config.params).model_dump(mode="json"),
                    "idempotency_key": idempotency_key,
                    "created_at": datetime.now(timezone.utc).isoformat(),
                },
            )
            append_jsonl(
                self.index_path, {"run_id": run_id, "idempotency_key": idempotency_key}
            )
            return record

    def execute(self, record: RunRecord, trial_set_ref: str, params: Optional[ModelParams]) -> None:
        """Screen and build the queue; any failure marks the run failed."""
        try:
            trials = self.resolve_trials(trial_set_ref)
            run = engine_mod.screen(
                record.profile,
                trials,
                params or self.config.params,
                self._backend,
                self.config.engine,
                run_id=record.run_id,
            )
            with self._lock:
                record.run = run
                self._append_event(
                    record.run_id, {"type": "screened", "run": run.model_dump(mode="json")}
                )
                build_review_queue(run)
                self._append_event(record.run_id, {"type": "queue_built"})
                record.status = run.state.value
                self._write_snapshot(record)
        except Exception as exc:
            with self._lock:
                record.status = "failed"
                record.error = str(exc)
                self._append_event(record.run_id, {"type": "failed", "error": str(exc)})
                self._write_snapshot(record)

    def get(self, run_id: str) -> RunRecord:
        record = self._records.get(run_id)
        if record is None:
            raise ServiceError(404, "not_found", f"unknown run {run_id!r}")
        return record

    def ready(self, run_id: str) -> RunRecord:
        record = self.get(run_id)
        if record.status == "failed":
            raise ServiceError(409, "run_failed", record.error or "screening failed")
        if record.run is None:
            raise ServiceError(409, "not_ready", "screening still in progress")
        return record

    def apply(self, run_id: str, decisions: list[ReviewDecision], etag: Optional[str]) -> RunRecord:
        with self._lock:
            record = self.ready(run_id)
            expected = _version_from_etag(etag, record.run)
            try:
                apply_decisions(record.run, decisions, expected_version=expected)
            except VersionConflict as exc:
                raise ServiceError(412, "version_conflict", str(exc)) from exc
            except StateError as exc:
                raise ServiceError(409, "invalid_state", str(exc)) from exc
            except DecisionError as exc:
                raise ServiceError(422, "invalid_decision", str(exc)) from exc
            self._append_event(
                run_id,
                {
                    "type": "decisions",
                    "decisions": [d.model_dump(mode="json") for d in decisions],
                    "version_after": record.run.version,
                },
            )
            record.status = record.run.state.value
            self._write_snapshot(record)
            return record


def make_etag(run: ScreeningRun) -> str:
    return f'"{run.run_id}-v{run.version}"'


def _version_from_etag(etag: Optional[str], run: ScreeningRun) -> int:
    if etag is None:
        raise ServiceError(428, "precondition_required", "If-Match header is required")
    expected = etag.strip().strip('"')
    prefix = f"{run.run_id}-v"
    if not expected.startswith(prefix):
        raise ServiceError(412, "version_conflict", f"etag {etag!r} does not match this run")
    try:
        return int(expected[len(prefix):])
    except ValueError:
        raise ServiceError(412, "version_conflict", f"malformed etag {etag!r}")


# ---------------------------------------------------------------------------
# FastAPI wiring


class CreateRunBody(BaseModel):
    profile_id: str
    trial_set_ref: str
    params: Optional[ModelParams] = None
    idempotency_key: Optional[str] = None


class DecisionsBody(BaseModel):
    decisions: list[ReviewDecision]


def _links(run_id: str) -> dict[str, str]:
    base = f"/runs/{run_id}"
    return {
        "self": base,
        "queue": f"{base}/queue",
        "decisions": f"{base}/decisions",
        "verdicts": f"{base}/verdicts",
        "report": f"{base}/report",
    }


def _envelope(record: RunRecord) -> dict:
    body = {
        "run_id": record.run_id,
        "status": record.status,
        "error": record.error,
        "links": _links(record.run_id),
    }
    if record.profile is not None:
        body["profile"] = {
            "profile_id": record.profile.profile_id,
            "medical_summary": record.profile.medical_summary,
        }
    if record.run is not None:
        run = record.run
        body.update(
            {
                "state": run.state.value,
                "version": run.version,
                "etag": make_etag(run),
                "params": run.params.model_dump(mode="json"),
                "trials": len(run.results),
                "manual_trials": len(run.manual_results()),
                "decided": len(run.decisions),
                "queued": len(run.queue.items) if run.queue else 0,
            }
        )
    return body


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="prescreen", docs_url=None, redoc_url=None)
    store = RunStore(config)
    app.state.store = store

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status,
            content={"error": {"code": exc.code, "message": exc.message}},
        )

    @app.post("/runs", status_code=202)
    def create_run(body: CreateRunBody, tasks: BackgroundTasks):
        record = store.create_run(
            body.profile_id, body.trial_set_ref, body.params, body.idempotency_key
        )
        if record.status == "pending" and record.run is None:
            tasks.add_task(store.execute, record, body.trial_set_ref, body.params)
        return {"run_id": record.run_id, "status": record.status, "links": _links(record.run_id)}

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        return _envelope(store.get(run_id))

    @app.get("/runs/{run_id}/queue")
    def get_queue(run_id: str):
        record = store.ready(run_id)
        if record.run.queue is None:
            raise ServiceError(409, "invalid_state", "queue not built yet")
        decided = {d.target for d in record.run.decisions}
        queue = record.run.queue.model_dump(mode="json")
        for item in queue["items"]:
            ref = item["assessment"]["key"]
            ref = f"{ref['trial_id']}:{ref['section']}:{ref['ordinal']}"
            item["target"] = ref
            item["decided"] = ref in decided
        for entry in queue["manual_trials"]:
            entry["decided"] = entry["trial_id"] in decided
        queue["etag"] = make_etag(record.run)
        return queue

    @app.post("/runs/{run_id}/decisions")
    def post_decisions(run_id: str, body: DecisionsBody, if_match: Optional[str] = Header(None)):
        record = store.apply(run_id, body.decisions, if_match)
        return _envelope(record)

    @app.get("/runs/{run_id}/verdicts")
    def get_verdicts(run_id: str):
        record = store.ready(run_id)
        verdicts = []
        for result in record.run.results:
            verdicts.append(
                {
                    "trial_id": result.trial_id,
                    "title": result.title,
                    "verdict": result.verdict.value.value,
                    "manual_reason": (
                        result.verdict.manual_reason.value if result.verdict.manual_reason else None
                    ),
                    "resolved_verdict": (
                        result.resolved_verdict.value if result.resolved_verdict else None
                    ),
                    "dropout_count": len(result.dropout_keys),
                    "all_unknown": result.all_unknown,
                }
            )
        return {"run_id": run_id, "etag": make_etag(record.run), "verdicts": verdicts}

    @app.get("/runs/{run_id}/report")
    def get_report(run_id: str, gold_ref: Optional[str] = None):
        record = store.ready(run_id)
        try:
            gold = store.gold_for(gold_ref)
            report = evaluate(record.run, gold)
        except EvaluationError as exc:
            raise ServiceError(422, "evaluation_error", str(exc)) from exc
        return report.model_dump(mode="json")

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    return app
