"""Command-line entry points for the batch experiment loop.

Subcommands mirror the pipeline stages: ingest trials, parse eligibility
texts, screen a patient (or every profile) against trials, build the
review queue, evaluate against gold annotations, repeat screening for
stochasticity statistics, and serve the HTTP API. Outputs are written
atomically and, with the mock or replay backend, are byte-identical
across invocations.

Exit codes: 0 success, 1 failure (diagnostic on stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from prescreen import engine as engine_mod
from prescreen.engine import EngineConfig, ScreeningRun, build_review_queue, export_run, import_run, merge_runs
from prescreen.evaluation import (
    GoldAnnotations,
    evaluate,
    render_report,
    stochasticity as stochasticity_report,
)
from prescreen.gateway import (
    CompletionBackend,
    MockBackend,
    ModelParams,
    RecordingBackend,
    RemoteBackend,
    RemoteConfig,
    ReplayBackend,
)
from prescreen.ioutil import atomic_write, canonical_json, write_jsonl
from prescreen.model import PatientProfile, TrialRecord
from prescreen.parsing import ParseFailure, parse_trial
from prescreen.registry import (
    RegistryQuery,
    RegistrySource,
    fetch_trials,
    load_profiles,
    write_trials,
)
from prescreen.service import ServiceConfig, create_app


class CliError(Exception):
    pass


def _require_file(path: Optional[str], flag: str) -> Path:
    if not path:
        raise CliError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{flag}: no such file: {path}")
    return p


def make_backend(args: argparse.Namespace) -> CompletionBackend:
    if args.backend == "mock":
        rules = _require_file(args.mock_rules, "--mock-rules")
        backend: CompletionBackend = MockBackend.from_file(rules, noise_seed=args.noise_seed)
    elif args.backend == "replay":
        backend = ReplayBackend.from_file(_require_file(args.replay, "--replay"))
    elif args.backend == "remote":
        cfg = _require_file(args.remote_config, "--remote-config")
        backend = RemoteBackend(RemoteConfig(**json.loads(cfg.read_text("utf-8"))))
    else:
        raise CliError(f"unknown backend {args.backend!r}")
    if getattr(args, "record", None):
        backend = RecordingBackend(backend, args.record)
    return backend


def make_params(args: argparse.Namespace, temperature: Optional[float] = None) -> ModelParams:
    return ModelParams(
        model_name=args.model,
        temperature=args.temperature if temperature is None else temperature,
        max_output_tokens=args.max_output_tokens,
    )


def load_trials(path: Path | str) -> list[TrialRecord]:
    from prescreen.ioutil import read_jsonl
    from prescreen.registry import normalize_record

    trials = []
    warnings: list[str] = []
    for lineno, raw in read_jsonl(path):
        try:
            trials.append(normalize_record(raw, warnings))
        except ValueError as exc:
            raise CliError(f"{path} line {lineno}: {exc}") from exc
    return trials


def trials_for_profile(trials: Sequence[TrialRecord], profile: PatientProfile) -> list[TrialRecord]:
    """The trials a profile's registry query would have returned.

    Matching is by condition-code equality; trials without condition codes
    are offered to every profile.
    """
    wanted = profile.condition_code.lower()
    return [
        t
        for t in trials
        if not t.condition_codes or wanted in {c.lower() for c in t.condition_codes}
    ]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_ingest(args: argparse.Namespace) -> int:
    if args.registry_config:
        source = RegistrySource(
            **json.loads(_require_file(args.registry_config, "--registry-config").read_text("utf-8"))
        )
    else:
        source = RegistrySource(fixture_path=str(_require_file(args.trials, "--trials")))
    query = RegistryQuery(
        condition=args.condition or "*",
        country=args.country,
        age=args.age,
        sex=args.sex,
        max_results=args.max_results,
    )
    records, report = fetch_trials(query, source)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trials(out / "trials.jsonl", records)
    atomic_write(out / "ingest_report.json", canonical_json(report.model_dump(mode="json")) + "\n")
    print(
        f"fetched {report.fetched}, kept {report.prefilter_passed}, "
        f"deduplicated {report.deduplicated}, failures {len(report.failures)}"
    )
    return 0


def cmd_parse(args: argparse.Namespace) -> int:
    trials = load_trials(_require_file(args.trials, "--trials"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    criteria_rows = []
    failure_rows = []
    for trial in trials:
        parsed = parse_trial(trial)
        if isinstance(parsed, ParseFailure):
            failure_rows.append(parsed.model_dump(mode="json"))
        else:
            for criterion in parsed.criteria:
                criteria_rows.append(
                    {
                        "trial_id": criterion.key.trial_id,
                        "section": criterion.key.section.value,
                        "ordinal": criterion.key.ordinal,
                        "text": criterion.text,
                    }
                )
    write_jsonl(out / "criteria.jsonl", criteria_rows)
    write_jsonl(out / "parse_failures.jsonl", failure_rows)
    print(
        f"parsed {len(trials) - len(failure_rows)}/{len(trials)} trials "
        f"into {len(criteria_rows)} criteria; {len(failure_rows)} parse failures"
    )
    return 0


def _screen_one(
    profile: PatientProfile,
    trials: Sequence[TrialRecord],
    params: ModelParams,
    backend: CompletionBackend,
    config: EngineConfig,
) -> ScreeningRun:
    return engine_mod.screen(profile, trials_for_profile(trials, profile), params, backend, config)


def cmd_screen(args: argparse.Namespace) -> int:
    profiles = load_profiles(_require_file(args.profiles, "--profiles"))
    trials = load_trials(_require_file(args.trials, "--trials"))
    if args.profile:
        profiles = [p for p in profiles if p.profile_id == args.profile]
        if not profiles:
            raise CliError(f"profile {args.profile!r} not found in {args.profiles}")
    backend = make_backend(args)
    params = make_params(args)
    config = EngineConfig(max_parallel=args.max_parallel)
    out = Path(args.out)
    runs = []
    for profile in profiles:
        run = _screen_one(profile, trials, params, backend, config)
        export_run(run, out / "runs" / profile.profile_id)
        runs.append(run)
        manual = len(run.manual_results())
        print(f"{profile.profile_id}: {len(run.results)} trials screened ({manual} manual)")
    if len(runs) > 1:
        export_run(merge_runs(runs), out / "pooled")
        print(f"pooled run written to {out / 'pooled'}")
    return 0


def cmd_queue(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    run = import_run(run_dir)
    queue = build_review_queue(run)
    export_run(run, run_dir)
    print(
        f"queued {len(queue.items)} dropout criteria, "
        f"{len(queue.manual_trials)} manual trials (run {run.run_id})"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    run = import_run(Path(args.run))
    gold = GoldAnnotations.load(_require_file(args.gold, "--gold")) if args.gold else None
    report = evaluate(run, gold)
    rendered = render_report(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "report.json", canonical_json(report.model_dump(mode="json")) + "\n")
        atomic_write(out / "report.txt", rendered)
    print(rendered, end="")
    return 0


def cmd_stochasticity(args: argparse.Namespace) -> int:
    profiles = load_profiles(_require_file(args.profiles, "--profiles"))
    trials = load_trials(_require_file(args.trials, "--trials"))
    gold = GoldAnnotations.load(_require_file(args.gold, "--gold"))
    temperatures = args.temperature or [0.0, 1.0]
    if args.backend != "mock":
        raise CliError("stochasticity requires the mock backend with a noise seed")
    if args.noise_seed is None:
        raise CliError("stochasticity requires --noise-seed (noise-capable mock)")
    config = EngineConfig(max_parallel=args.max_parallel)
    runs = []
    for temperature in temperatures:
        for index in range(args.runs):
            seeded = argparse.Namespace(**vars(args))
            seeded.noise_seed = args.noise_seed + index
            backend = make_backend(seeded)
            params = make_params(args, temperature=temperature)
            for profile in profiles:
                runs.append(_screen_one(profile, trials, params, backend, config))
    report = stochasticity_report(runs, gold)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(
            out / "stochasticity.json", canonical_json(report.model_dump(mode="json")) + "\n"
        )
    for group in report.groups:
        recall = group.metrics["trial_recall"]
        print(
            f"{group.profile_id} T={group.temperature}: {group.n_runs} runs, "
            f"trial recall mean {recall.mean} std {recall.std}"
        )
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    config = ServiceConfig.load(_require_file(args.config, "--config"))
    uvicorn.run(create_app(config), host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------
# Argument wiring


def _add_backend_args(parser: argparse.ArgumentParser, sweep_temperature: bool = False) -> None:
    parser.add_argument("--backend", choices=["mock", "replay", "remote"], default="mock")
    parser.add_argument("--mock-rules", help="mock backend rule file (JSON)")
    parser.add_argument("--replay", help="replay cache file (JSONL of completions)")
    parser.add_argument("--record", help="record completions to this replay file")
    parser.add_argument("--remote-config", help="remote backend config file (JSON)")
    parser.add_argument("--noise-seed", type=int, help="enable seeded mock noise")
    parser.add_argument("--model", default="mock", help="model name for prompts/hashing")
    if sweep_temperature:
        parser.add_argument(
            "--temperature",
            type=float,
            action="append",
            help="temperature to sweep (repeatable; default 0 and 1)",
        )
    else:
        parser.add_argument("--temperature", type=float, default=0.0)
    parser.add_argument("--max-output-tokens", type=int, default=512)
    parser.add_argument("--max-parallel", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prescreen",
        description="Pre-screen patients against clinical-trial eligibility criteria.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("ingest", help="fetch/normalize trial records")
    p.add_argument("--trials", help="trial fixture file (JSONL)")
    p.add_argument("--registry-config", help="registry source descriptor (JSON)")
    p.add_argument("--condition", help="condition code or name to filter by")
    p.add_argument("--country")
    p.add_argument("--age", type=int)
    p.add_argument("--sex", choices=["female", "male"])
    p.add_argument("--max-results", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("parse", help="split eligibility texts into criteria")
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("screen", help="screen profiles against trials")
    p.add_argument("--profiles", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--profile", help="screen a single profile id")
    p.add_argument("--out", required=True)
    _add_backend_args(p)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("queue", help="build the review queue for an exported run")
    p.add_argument("--run", required=True, help="run export directory")
    p.set_defaults(func=cmd_queue)

    p = sub.add_parser("evaluate", help="evaluate an exported run")
    p.add_argument("--run", required=True, help="run export directory")
    p.add_argument("--gold", help="gold annotation file (JSONL)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stochasticity", help="repeat screening and report metric spread")
    p.add_argument("--profiles", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--out")
    _add_backend_args(p, sweep_temperature=True)
    p.set_defaults(func=cmd_stochasticity)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", required=True, help="service config file (JSON)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
