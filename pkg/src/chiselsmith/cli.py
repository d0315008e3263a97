"""Operator entrypoints: generate one case, run a bench, emit reports.

Exit codes are stable: 0 success, 1 model failure (the loop ended without
correct code), 2 infrastructure or usage failure (missing key/toolchain,
malformed input, provider/tool breakdown).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
from pathlib import Path
from typing import Any, Sequence

from . import config as config_mod
from .catalog import default_catalog
from .compile_adapter import (
    ScaffoldError,
    ToolchainCompiler,
    ToolchainMissingError,
    load_contract,
)
from .domain import CaseSpec, RunConfig, Verdict, dumps
from .engine import CaseOutcome, outcome_to_record, run_case
from .gateway import HttpProvider, LlmGateway, ProviderError
from .harness import (
    CaseLoadError,
    _load_one_case,
    error_mix_by_iteration,
    load_cases,
    pass_at_k_summary,
    results_by_model,
    run_bench,
    success_vs_iterations,
)
from .mocks import PlaylistError, load_playlist, scripted_pipeline
from .sim_adapter import SimulatorMissingError, VerilogSimulator

EXIT_OK = 0
EXIT_MODEL_FAILURE = 1
EXIT_INFRA = 2

_MODEL_FAILURE_VERDICTS = (Verdict.SYNTAX_ERROR, Verdict.FUNCTIONAL_ERROR, Verdict.EXHAUSTED)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_INFRA


def _apply_overrides(run: RunConfig, args: argparse.Namespace) -> RunConfig:
    fields: dict[str, Any] = {}
    if getattr(args, "trials", None) is not None:
        fields["trials"] = args.trials
    if getattr(args, "max_iters", None) is not None:
        fields["max_iterations"] = args.max_iters
    if getattr(args, "k", None) is not None:
        fields["k_values"] = tuple(int(x) for x in args.k.split(","))
    if getattr(args, "parallelism", None) is not None:
        fields["parallelism"] = args.parallelism
    return dataclasses.replace(run, **fields)


def _build_trial_pieces(app: config_mod.AppConfig, args: argparse.Namespace):
    """Return a callable producing fresh (gateway, compiler, simulator)."""
    catalog = default_catalog()
    if args.mock:
        if app.mock_playlist is None:
            raise config_mod.ConfigError("--mock requires mock.playlist in the config")
        playlist = load_playlist(app.mock_playlist)

        def fresh():
            provider, compiler, simulator = scripted_pipeline(playlist, catalog=catalog)
            return LlmGateway(provider, catalog=catalog), compiler, simulator

        return fresh

    if app.provider is None:
        raise config_mod.ConfigError("config names no provider endpoint (or pass --mock)")
    if not os.environ.get(app.provider.api_key_env):
        raise ProviderError(
            f"missing API key: set the {app.provider.api_key_env} environment variable"
        )
    if app.toolchain.scaffold_dir is None:
        raise config_mod.ConfigError("config names no toolchain.scaffold_dir (or pass --mock)")
    provider = HttpProvider(app.provider)
    compiler = ToolchainCompiler(
        app.toolchain.scaffold_dir,
        app.run.compile_timeout_s,
        workspace_root=app.toolchain.workspace_root,
        keep_workspaces=app.toolchain.keep_workspaces,
        catalog=catalog,
    )
    simulator = VerilogSimulator(
        app.run.sim_timeout_s,
        sim_cfg=app.toolchain.simulator,
        workspace_root=app.toolchain.workspace_root,
        keep_workspaces=app.toolchain.keep_workspaces,
        default_seed=args.seed,
    )

    def fresh():
        return LlmGateway(provider, catalog=catalog), compiler, simulator

    return fresh


def _write_generate_artifacts(out_dir: Path, outcome: CaseOutcome) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    records = outcome.trace.records
    if records:
        final = records[-1].candidate
        (out_dir / "candidate.scala").write_text(final.chisel_src, encoding="utf-8")
        if final.verilog_src:
            (out_dir / "candidate.sv").write_text(final.verilog_src, encoding="utf-8")
    (out_dir / "trace.json").write_text(dumps(outcome.trace) + "\n", encoding="utf-8")
    (out_dir / "outcome.json").write_text(
        json.dumps(outcome_to_record(outcome), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        app = config_mod.load_config(args.config)
        case = _load_one_case(Path(args.case))
        if args.seed is not None and case.seed is None:
            case = dataclasses.replace(case, seed=args.seed)
        if case.excluded is not None:
            return _fail(f"case {case.case_id} is excluded: {case.excluded}")
        run_cfg = _apply_overrides(app.run, args)
        fresh = _build_trial_pieces(app, args)
    except (config_mod.ConfigError, CaseLoadError, PlaylistError, ValueError) as exc:
        return _fail(str(exc))
    except (ToolchainMissingError, SimulatorMissingError) as exc:
        return _fail(f"toolchain unavailable: {exc}")
    except ProviderError as exc:
        return _fail(str(exc))

    gateway, compiler, simulator = fresh()
    out_dir = Path(args.out) if args.out else Path("out") / case.case_id

    def on_event(event: dict[str, Any]) -> None:
        if args.verbose:
            print(json.dumps(event, sort_keys=True))

    outcome = run_case(
        case, run_cfg, gateway, compiler, simulator, on_event=on_event
    )
    _write_generate_artifacts(out_dir, outcome)
    print(
        f"{case.case_id}: {outcome.final_verdict.value} "
        f"after {outcome.iterations_used} iteration(s); artifacts in {out_dir}"
    )
    if outcome.final_verdict is Verdict.SUCCESS:
        return EXIT_OK
    if outcome.final_verdict in _MODEL_FAILURE_VERDICTS:
        return EXIT_MODEL_FAILURE
    return EXIT_INFRA


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        app = config_mod.load_config(args.config)
        run_cfg = _apply_overrides(app.run, args)
        if args.mock and not run_cfg.model_id:
            run_cfg = dataclasses.replace(run_cfg, model_id="mock")
        cases = load_cases(args.suite)
        fresh = _build_trial_pieces(app, args)
    except (config_mod.ConfigError, CaseLoadError, PlaylistError, ValueError) as exc:
        return _fail(str(exc))
    except (ToolchainMissingError, SimulatorMissingError) as exc:
        return _fail(f"toolchain unavailable: {exc}")
    except ProviderError as exc:
        return _fail(str(exc))

    excluded = [c for c in cases if c.excluded is not None]
    for case in excluded:
        print(f"excluded: {case.case_id} ({case.excluded})")

    def on_event(event: dict[str, Any]) -> None:
        if args.verbose:
            print(json.dumps(event, sort_keys=True))

    def engine(case: CaseSpec, trial: int) -> CaseOutcome:
        gateway, compiler, simulator = fresh()
        return run_case(case, run_cfg, gateway, compiler, simulator, on_event=on_event)

    def progress(case_id: str, trial: int, outcome: CaseOutcome) -> None:
        print(f"[{case_id} trial {trial}] {outcome.final_verdict.value}")

    try:
        result = run_bench(
            cases,
            run_cfg,
            engine,
            results_path=args.out,
            resume=args.resume,
            on_progress=progress,
        )
    except (FileExistsError, ValueError) as exc:
        return _fail(str(exc))
    total = sum(len(v) for v in result.per_case.values())
    print(f"persisted {total} outcome(s) to {args.out}")
    if result.aborted:
        return _fail(f"run aborted: {result.aborted}")
    summary = pass_at_k_summary(result)
    for k, value in summary.items():
        print(f"pass@{k}: {value:.4f}")
    return EXIT_OK


def _tsv(rows: list[list[Any]]) -> str:
    return "\n".join("\t".join(str(cell) for cell in row) for row in rows) + "\n"


def cmd_report(args: argparse.Namespace) -> int:
    path = Path(args.results)
    if not path.is_file():
        return _fail(f"results log not found: {path}")
    by_model, skipped = results_by_model(path)
    if skipped:
        print(f"warning: skipped {skipped} unreadable line(s)", file=sys.stderr)

    pass_rows: list[list[Any]] = [["model", "k", "pass_at_k"]]
    curve_rows: list[list[Any]] = [["model", "k", "max_iterations", "pass_at_k"]]
    mix_rows: list[list[Any]] = [
        ["model", "iteration", "syntax", "functional", "success", "exhausted"]
    ]
    for model, result in sorted(by_model.items()):
        for k, value in pass_at_k_summary(result).items():
            pass_rows.append([model, k, f"{value:.6f}"])
        for k, row in success_vs_iterations(result).items():
            for cap, value in row.items():
                curve_rows.append([model, k, cap, f"{value:.6f}"])
        for iteration, row in error_mix_by_iteration(result).items():
            mix_rows.append(
                [model, iteration]
                + [f"{row[b]:.6f}" for b in ("syntax", "functional", "success", "exhausted")]
            )

    tables = {
        "pass_at_k.tsv": _tsv(pass_rows),
        "success_vs_iterations.tsv": _tsv(curve_rows),
        "error_mix.tsv": _tsv(mix_rows),
    }
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, body in tables.items():
            (out_dir / name).write_text(body, encoding="utf-8")
        print(f"wrote {', '.join(tables)} to {out_dir}")
    else:
        for name, body in tables.items():
            print(f"# {name}")
            print(body, end="")
    return EXIT_OK


def cmd_doctor(args: argparse.Namespace) -> int:
    problems: list[str] = []

    def check(label: str, ok: bool, detail: str = "") -> None:
        print(f"{'ok' if ok else 'PROBLEM'}: {label}" + (f" ({detail})" if detail else ""))
        if not ok:
            problems.append(label)

    try:
        app = config_mod.load_config(args.config)
        check("config parses", True)
    except config_mod.ConfigError as exc:
        check("config parses", False, str(exc))
        return EXIT_INFRA

    if args.mock:
        if app.mock_playlist is None:
            check("mock playlist loads", False, "config names no mock.playlist")
        else:
            try:
                load_playlist(app.mock_playlist)
                check("mock playlist loads", True, app.mock_playlist)
            except PlaylistError as exc:
                check("mock playlist loads", False, str(exc))
        return EXIT_INFRA if problems else EXIT_OK

    if app.provider is None:
        check("provider endpoint configured", False)
    else:
        check("provider endpoint configured", True, app.provider.endpoint)
        check(
            f"API key env {app.provider.api_key_env} set",
            bool(os.environ.get(app.provider.api_key_env)),
        )
        if not args.no_ping:
            import requests

            try:
                # any HTTP answer proves the endpoint is reachable
                status = requests.get(app.provider.endpoint, timeout=5).status_code
                check("provider endpoint reachable", True, f"HTTP {status}")
            except requests.RequestException as exc:
                check("provider endpoint reachable", False, str(exc))
    if app.toolchain.scaffold_dir is None:
        check("toolchain.scaffold_dir configured", False)
    else:
        try:
            contract = load_contract(app.toolchain.scaffold_dir)
            check("scaffold contract valid", True, f"pins {contract.versions}")
            launcher = contract.entry_command[0]
            check(f"toolchain launcher {launcher!r} on PATH", shutil.which(launcher) is not None)
        except ScaffoldError as exc:
            check("scaffold contract valid", False, str(exc))
    sim = app.toolchain.simulator
    for binary in (sim.compile_cmd[0], sim.run_cmd[0]):
        check(f"simulator binary {binary!r} on PATH", shutil.which(binary) is not None)
    return EXIT_INFRA if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chiselsmith",
        description="Generate Chisel modules with an LLM repair loop and benchmark the results.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="path to the JSON config file")
        p.add_argument("--mock", action="store_true", help="scripted provider and adapters; no network, no toolchain")
        p.add_argument("--seed", type=int, default=None, help="default simulation seed")
        p.add_argument("--max-iters", type=int, default=None, help="override run.max_iterations")
        p.add_argument("--verbose", action="store_true", help="print engine events")

    g = sub.add_parser("generate", help="run the repair loop on one case")
    common(g)
    g.add_argument("--case", required=True, help="case directory (spec.md, tb.v, manifest)")
    g.add_argument("--out", default=None, help="artifact output directory")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="run a benchmark suite")
    common(b)
    b.add_argument("--suite", required=True, help="suite root directory")
    b.add_argument("--out", required=True, help="results log path (JSON lines)")
    b.add_argument("--trials", type=int, default=None, help="override run.trials")
    b.add_argument("--k", default=None, help="override k values, e.g. 1,5,10")
    b.add_argument("--parallelism", type=int, default=None, help="override run.parallelism")
    b.add_argument("--resume", action="store_true", help="skip already-persisted (case, trial) pairs")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="emit Pass@k, iteration-curve, and error-mix tables")
    r.add_argument("--results", required=True, help="results log path")
    r.add_argument("--out", default=None, help="directory for TSV tables (default: stdout)")
    r.set_defaults(func=cmd_report)

    d = sub.add_parser("doctor", help="validate config, toolchain pinning, and provider setup")
    d.add_argument("--config", required=True, help="path to the JSON config file")
    d.add_argument("--mock", action="store_true", help="validate mock setup instead")
    d.add_argument("--no-ping", action="store_true", help="skip the provider reachability probe")
    d.set_defaults(func=cmd_doctor)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
