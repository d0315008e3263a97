"""Scripted compile/sim adapters for hermetic runs.

A playlist file drives a whole mock pipeline: per-role provider responses
plus step-by-step compile and simulation results.  Scripted logs flow
through the real diagnostic and mismatch parsers, so mock runs exercise the
same parsing paths as live ones.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping, Sequence

from .catalog import CatalogEntry
from .compile_adapter import CompileResult, parse_diagnostics
from .domain import Candidate, CaseSpec, ErrorEntry, ErrorKind
from .gateway import ScriptedProvider
from .sim_adapter import MISMATCH_CAP, SimResult, evaluate_sim_log

PROVIDER_ROLES = ("generator", "reviewer", "inspector")


class PlaylistError(ValueError):
    """Playlist file is malformed or missing required sections."""


class ScriptedCompiler:
    """Replays a list of compile steps; failed logs go through the parser.

    Steps: ``{"status": "ok", "verilog": ...}``, ``{"status": "failed",
    "log": ...}``, or ``{"status": "timeout"}``.  The playlist repeats its
    last step once exhausted, so "always fails the same way" scripts stay
    short.
    """

    def __init__(
        self,
        steps: Sequence[Mapping[str, Any]],
        *,
        catalog: tuple[CatalogEntry, ...] | None = None,
    ):
        if not steps:
            raise PlaylistError("compile playlist must have at least one step")
        self._steps = list(steps)
        self._catalog = catalog
        self._cursor = 0

    def run(self, candidate: Candidate, case: CaseSpec) -> CompileResult:
        step = self._steps[min(self._cursor, len(self._steps) - 1)]
        self._cursor += 1
        status = step.get("status")
        if status == "ok":
            verilog = step.get("verilog") or f"module {case.module_name}();\nendmodule\n"
            return CompileResult(status="ok", raw_log=step.get("log", ""), verilog_src=verilog)
        if status == "failed":
            log = step.get("log", "")
            entries = parse_diagnostics(log, catalog=self._catalog)
            if not entries:
                entries = [ErrorEntry(kind=ErrorKind.SYNTAX, message="scripted compile failure")]
            return CompileResult(status="failed", raw_log=log, entries=tuple(entries))
        if status == "timeout":
            return CompileResult(status="timeout", raw_log=step.get("log", ""))
        raise PlaylistError(f"unknown compile step status {status!r}")


class ScriptedSimulator:
    """Replays simulation steps; fail logs go through the mismatch parser."""

    def __init__(self, steps: Sequence[Mapping[str, Any]], *, cap: int = MISMATCH_CAP):
        if not steps:
            raise PlaylistError("sim playlist must have at least one step")
        self._steps = list(steps)
        self._cap = cap
        self._cursor = 0

    def run(self, verilog_src: str, case: CaseSpec) -> SimResult:
        step = self._steps[min(self._cursor, len(self._steps) - 1)]
        self._cursor += 1
        status = step.get("status")
        log = step.get("log", "")
        if status == "pass":
            return SimResult(status="pass", raw_log=log)
        if status == "fail":
            parsed_status, mismatches, failed, total = evaluate_sim_log(
                log, exit_code=1, cap=self._cap
            )
            assert parsed_status == "fail"
            return SimResult(
                status="fail",
                raw_log=log,
                mismatches=mismatches,
                failed_count=failed,
                total_count=total,
            )
        if status == "build_error":
            return SimResult(status="build_error", raw_log=log)
        if status == "timeout":
            return SimResult(status="timeout", raw_log=log)
        raise PlaylistError(f"unknown sim step status {status!r}")


def load_playlist(path: str | Path) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise PlaylistError(f"playlist file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise PlaylistError(f"playlist is not valid JSON: {exc}") from None
    if not any(role in data for role in PROVIDER_ROLES):
        raise PlaylistError("playlist defines no provider roles")
    if "compile" not in data or "sim" not in data:
        raise PlaylistError("playlist must define 'compile' and 'sim' step lists")
    return data


def scripted_pipeline(
    playlist: Mapping[str, Any], *, catalog: tuple[CatalogEntry, ...] | None = None
) -> tuple[ScriptedProvider, ScriptedCompiler, ScriptedSimulator]:
    """Fresh provider and adapters from one playlist (call once per trial)."""
    provider = ScriptedProvider(
        {role: playlist[role] for role in PROVIDER_ROLES if role in playlist}
    )
    compiler = ScriptedCompiler(playlist["compile"], catalog=catalog)
    simulator = ScriptedSimulator(playlist["sim"])
    return provider, compiler, simulator
