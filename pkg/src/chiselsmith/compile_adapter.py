"""Runs one Chisel candidate through the elaboration toolchain.

Each compile happens in a fresh copy of a pinned scaffold project.  The
coupling with the scaffold is a small contract file (entry command, module
slot, artifact path, pinned versions); diagnostics on the standard streams
are parsed into structured entries.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import signal
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

from .catalog import CatalogEntry, match_message
from .domain import (
    FUNCTIONAL_STATIC_CLASSES,
    Candidate,
    CaseSpec,
    ErrorEntry,
    ErrorKind,
    SourceLocation,
)

CONTRACT_FILENAME = "contract.json"
_REQUIRED_PINS = ("chisel", "scala")


class ScaffoldError(RuntimeError):
    """Scaffold directory or contract is unusable."""


class ToolchainMissingError(RuntimeError):
    """The scaffold's entry command is not runnable on this machine."""


@dataclass(frozen=True)
class ScaffoldContract:
    module_slot: str
    entry_command: tuple[str, ...]
    output_path: str
    pinned_versions: tuple[tuple[str, str], ...]
    top_env: str = "CANDIDATE_TOP"

    @property
    def versions(self) -> dict[str, str]:
        return dict(self.pinned_versions)


def load_contract(scaffold_dir: str | Path) -> ScaffoldContract:
    """Load and validate the scaffold contract.

    Refuses contracts that do not pin the toolchain versions: diagnostic text
    is version-sensitive and the parser is fixtured against the pinned one.
    """
    path = Path(scaffold_dir) / CONTRACT_FILENAME
    if not path.is_file():
        raise ScaffoldError(f"scaffold contract not found: {path}")
    try:
        data = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ScaffoldError(f"scaffold contract is not valid JSON: {exc}") from None
    for key in ("module_slot", "entry_command", "output_path", "pinned_versions"):
        if key not in data:
            raise ScaffoldError(f"scaffold contract missing field {key!r}")
    pins = data["pinned_versions"]
    missing = [k for k in _REQUIRED_PINS if not pins.get(k)]
    if missing:
        raise ScaffoldError(
            f"scaffold versions are not pinned (missing {', '.join(missing)}); refusing to run"
        )
    if not data["entry_command"]:
        raise ScaffoldError("scaffold entry_command is empty")
    return ScaffoldContract(
        module_slot=data["module_slot"],
        entry_command=tuple(data["entry_command"]),
        output_path=data["output_path"],
        pinned_versions=tuple(sorted(pins.items())),
        top_env=data.get("top_env", "CANDIDATE_TOP"),
    )


@dataclass(frozen=True)
class CompileResult:
    status: str  # ok | failed | timeout
    raw_log: str
    verilog_src: str | None = None
    entries: tuple[ErrorEntry, ...] = ()
    wall_time_s: float = 0.0

    def __post_init__(self) -> None:
        if self.status == "ok" and not self.verilog_src:
            raise ValueError("ok result requires nonempty verilog_src")
        if self.status == "ok" and self.entries:
            raise ValueError("ok result must carry no error entries")
        if self.status == "failed" and not self.entries:
            raise ValueError("failed result requires parsed entries")


def prepare_workspace(
    candidate: Candidate, scaffold: str | Path, *, root: str | Path | None = None
) -> Path:
    """Copy the scaffold into a fresh directory and install the candidate.

    The returned directory shares no files with any other workspace.
    """
    scaffold = Path(scaffold)
    if not scaffold.is_dir():
        raise ScaffoldError(f"scaffold directory does not exist: {scaffold}")
    contract = load_contract(scaffold)
    if root is not None:
        Path(root).mkdir(parents=True, exist_ok=True)
    workspace = Path(tempfile.mkdtemp(prefix="compile-", dir=root))
    shutil.copytree(scaffold, workspace, dirs_exist_ok=True)
    slot = workspace / contract.module_slot
    slot.parent.mkdir(parents=True, exist_ok=True)
    slot.write_text(candidate.chisel_src, encoding="utf-8")
    return workspace


def _run_killing_tree(
    cmd: tuple[str, ...],
    cwd: Path,
    timeout_s: float,
    env: Mapping[str, str] | None,
) -> tuple[int | None, str]:
    """Run a command; on deadline, kill the whole process group.

    Returns (returncode, combined output); returncode None means timeout.
    """
    try:
        proc = subprocess.Popen(
            cmd,
            cwd=cwd,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
            start_new_session=True,
            env=dict(env) if env is not None else None,
        )
    except FileNotFoundError as exc:
        raise ToolchainMissingError(f"entry command not runnable: {cmd[0]} ({exc})") from None
    try:
        out, _ = proc.communicate(timeout=timeout_s)
        return proc.returncode, out or ""
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        out, _ = proc.communicate()
        return None, out or ""


def compile(
    workspace: str | Path,
    timeout_s: float,
    *,
    module_name: str | None = None,
    contract: ScaffoldContract | None = None,
    catalog: tuple[CatalogEntry, ...] | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> CompileResult:
    """Invoke the scaffold's build entrypoint on a prepared workspace."""
    workspace = Path(workspace)
    contract = contract if contract is not None else load_contract(workspace)
    env = dict(os.environ)
    if module_name:
        env[contract.top_env] = module_name
    start = clock()
    returncode, out = _run_killing_tree(contract.entry_command, workspace, timeout_s, env)
    wall = clock() - start
    if returncode is None:
        return CompileResult(status="timeout", raw_log=out, wall_time_s=wall)
    artifact = workspace / contract.output_path
    if returncode == 0:
        if artifact.is_file() and artifact.stat().st_size > 0:
            return CompileResult(
                status="ok",
                raw_log=out,
                verilog_src=artifact.read_text("utf-8"),
                wall_time_s=wall,
            )
        out = out + "\ntoolchain exited 0 but produced no artifact"
    entries = parse_diagnostics(out, catalog=catalog)
    if not entries:
        entries = [
            _build_entry(f"toolchain failed with exit status {returncode}", None, catalog)
        ]
    return CompileResult(
        status="failed", raw_log=out, entries=tuple(entries), wall_time_s=wall
    )


# ---------------------------------------------------------------------------
# Diagnostic parsing
# ---------------------------------------------------------------------------

_ANSI_RE = re.compile(r"\x1b\[[0-9;]*m")
_ERROR_PREFIX_RE = re.compile(r"^\s*\[error\]\s?")
_NOISE_RE = re.compile(
    r"^\s*(?:\[(?:info|warn|debug|success)\]"
    r"|at\s+\S+\("
    r"|(?:one|two|three|\d+)\s+errors?\s+found"
    r"|\d+\s+warnings?\s+found)"
)
_LOCATED_RE = re.compile(
    r"^(?P<file>[^\s:]+\.(?:scala|fir|sv|v)):(?P<line>\d+)(?::(?P<col>\d+))?:?\s*"
    r"(?:error\s*:\s*)?(?P<msg>.*\S)\s*$"
)
_BARE_ERROR_RE = re.compile(r"^error\s*:\s*(?P<msg>.*\S)\s*$", re.IGNORECASE)
_EXCEPTION_RE = re.compile(
    r"^(?:Exception in thread \"[^\"]+\"\s+)?"
    r"(?:[\w.$]+\.)?[\w$]*(?:Exception|Error):\s*(?P<msg>.*\S)\s*$"
)
_SUGGESTION_RE = re.compile(r"Did you mean `?(\w+)'?`?\?")
_SOURCE_LOCATOR_RE = re.compile(r"@\[(?P<file>\S+)\s+(?P<line>\d+):(?P<col>\d+)\]")

_FALLBACK_HEAD_CHARS = 500


def _build_entry(
    message: str,
    location: SourceLocation | None,
    catalog: tuple[CatalogEntry, ...] | None,
) -> ErrorEntry:
    hit = match_message(message, catalog)
    catalog_class = hit.class_id if hit else None
    kind = (
        ErrorKind.FUNCTIONAL_STATIC
        if catalog_class in FUNCTIONAL_STATIC_CLASSES
        else ErrorKind.SYNTAX
    )
    suggestion_m = _SUGGESTION_RE.search(message)
    return ErrorEntry(
        kind=kind,
        message=message,
        location=location,
        suggestion=suggestion_m.group(1) if suggestion_m else None,
        catalog_class=catalog_class,
    )


def parse_diagnostics(
    raw_log: str, *, catalog: tuple[CatalogEntry, ...] | None = None
) -> list[ErrorEntry]:
    """Parse a toolchain log into one entry per distinct diagnostic.

    Recognizes scalac/sbt ``file:line:col:`` locators, bare ``error:`` lines,
    and exception messages; continuation lines attach to the open entry.
    A nonempty log with nothing recognizable yields a single unknown-location
    entry carrying the log head.
    """
    log = _ANSI_RE.sub("", raw_log or "")
    drafts: list[tuple[SourceLocation | None, list[str]]] = []
    current: tuple[SourceLocation | None, list[str]] | None = None

    for raw_line in log.splitlines():
        if _NOISE_RE.match(raw_line):
            current = None
            continue
        line = _ERROR_PREFIX_RE.sub("", raw_line)
        if not line.strip():
            current = None
            continue
        located = _LOCATED_RE.match(line)
        if located:
            loc = SourceLocation(
                file=located.group("file"),
                line=int(located.group("line")),
                column=int(located.group("col")) if located.group("col") else None,
            )
            current = (loc, [located.group("msg")])
            drafts.append(current)
            continue
        bare = _BARE_ERROR_RE.match(line.strip())
        if bare:
            current = (None, [bare.group("msg")])
            drafts.append(current)
            continue
        exc = _EXCEPTION_RE.match(line.strip())
        if exc:
            msg = exc.group("msg")
            loc = None
            locator = _SOURCE_LOCATOR_RE.search(msg)
            if locator:
                loc = SourceLocation(
                    file=locator.group("file"),
                    line=int(locator.group("line")),
                    column=int(locator.group("col")),
                )
                msg = _SOURCE_LOCATOR_RE.sub("", msg).strip()
            current = (loc, [msg])
            drafts.append(current)
            continue
        if current is not None:
            current[1].append(line.strip())

    entries: list[ErrorEntry] = []
    seen: set[tuple[str, int, int, str] | tuple[None, str]] = set()
    for loc, lines in drafts:
        message = "\n".join(lines).strip()
        if not message:
            continue
        key = (
            (loc.file, loc.line, loc.column or -1, message)
            if loc is not None
            else (None, message)
        )
        if key in seen:
            continue
        seen.add(key)
        entries.append(_build_entry(message, loc, catalog))

    if not entries and log.strip():
        head = log.strip()[:_FALLBACK_HEAD_CHARS]
        entries.append(_build_entry(head, None, catalog))
    return entries


def render_entries(entries: list[ErrorEntry] | tuple[ErrorEntry, ...]) -> str:
    """Render entries back into parseable diagnostic text.

    ``parse_diagnostics(render_entries(parse_diagnostics(log)))`` reproduces
    the same entries.
    """
    lines: list[str] = []
    for e in entries:
        first, *rest = e.message.splitlines() or [""]
        if e.location is not None:
            col = f":{e.location.column}" if e.location.column is not None else ""
            lines.append(f"{e.location.file}:{e.location.line}{col}: error: {first}")
        else:
            lines.append(f"error: {first}")
        lines.extend(f"  {r}" for r in rest)
    return "\n".join(lines)


class ToolchainCompiler:
    """Engine-facing compiler: prepares a workspace per call and compiles.

    Probes the entry command at construction so a missing toolchain fails at
    startup, not per case.
    """

    def __init__(
        self,
        scaffold_dir: str | Path,
        timeout_s: float,
        *,
        workspace_root: str | Path | None = None,
        keep_workspaces: bool = False,
        catalog: tuple[CatalogEntry, ...] | None = None,
    ):
        self._scaffold = Path(scaffold_dir)
        self._contract = load_contract(self._scaffold)
        launcher = self._contract.entry_command[0]
        if shutil.which(launcher) is None:
            raise ToolchainMissingError(
                f"toolchain launcher {launcher!r} not found on PATH"
            )
        self._timeout_s = timeout_s
        self._root = Path(workspace_root) if workspace_root is not None else None
        self._keep = keep_workspaces
        self._catalog = catalog

    def run(self, candidate: Candidate, case: CaseSpec) -> CompileResult:
        workspace = prepare_workspace(candidate, self._scaffold, root=self._root)
        try:
            return compile(
                workspace,
                self._timeout_s,
                module_name=case.module_name,
                contract=self._contract,
                catalog=self._catalog,
            )
        finally:
            if not self._keep:
                shutil.rmtree(workspace, ignore_errors=True)
