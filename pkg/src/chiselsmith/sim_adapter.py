"""Assembles DUT + testbench (+ reference) and runs an event-driven simulator.

The subprocess contract has two steps (simulator compile, then run).  Two log
dialects are understood: per-check ``CHECK <id> IN=.. EXP=.. GOT=.. PASS|FAIL``
lines from self-checking testbenches, and ``Mismatches: N in M samples``
summaries from pre-existing benchmark testbenches.
"""

from __future__ import annotations

import re
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .compile_adapter import _run_killing_tree
from .domain import CaseSpec, MismatchEntry

DUT_FILENAME = "dut.sv"
TB_FILENAME = "tb.sv"
REF_FILENAME = "ref.sv"

MISMATCH_CAP = 16


class SimBuildError(RuntimeError):
    """DUT/testbench interface mismatch detected while assembling the sim."""


class SimulatorMissingError(RuntimeError):
    """Simulator binaries are not runnable on this machine."""


@dataclass(frozen=True)
class SimulatorConfig:
    """Command templates; ``{exe}`` is replaced by the sim image path."""

    compile_cmd: tuple[str, ...] = ("iverilog", "-g2012", "-o", "{exe}")
    run_cmd: tuple[str, ...] = ("vvp", "{exe}")
    seed_plusarg: str = "+seed={seed}"
    mismatch_cap: int = MISMATCH_CAP


@dataclass(frozen=True)
class SimResult:
    status: str  # pass | fail | timeout | build_error
    raw_log: str
    mismatches: tuple[MismatchEntry, ...] = ()
    failed_count: int = 0
    total_count: int = 0
    wall_time_s: float = 0.0

    def __post_init__(self) -> None:
        if self.status == "pass" and self.mismatches:
            raise ValueError("pass result must carry no mismatches")
        if self.status == "fail" and self.failed_count < 1:
            raise ValueError("fail result requires failed_count >= 1")


def assemble_sim(
    verilog_src: str, case: CaseSpec, *, root: str | Path | None = None
) -> Path:
    """Create a fresh directory holding DUT, testbench, and reference sources.

    Raises :class:`SimBuildError` when the emitted Verilog does not define the
    module the testbench instantiates; that message is meant to be fed back
    to the reviewer as interface feedback.
    """
    if not verilog_src:
        raise ValueError("verilog_src must be nonempty")
    if not re.search(rf"\bmodule\s+{re.escape(case.module_name)}\b", verilog_src):
        raise SimBuildError(
            f"emitted Verilog defines no module named {case.module_name!r}; "
            f"the testbench instantiates {case.module_name!r}, so the top-level "
            "module (and its ports) must use exactly the specified names"
        )
    if root is not None:
        Path(root).mkdir(parents=True, exist_ok=True)
    workspace = Path(tempfile.mkdtemp(prefix="sim-", dir=root))
    (workspace / DUT_FILENAME).write_text(verilog_src, encoding="utf-8")
    (workspace / TB_FILENAME).write_text(case.testbench_src, encoding="utf-8")
    if case.reference_src:
        (workspace / REF_FILENAME).write_text(case.reference_src, encoding="utf-8")
    return workspace


_CHECK_RE = re.compile(
    r"^\s*CHECK\s+(?P<id>\S+)\s+IN=(?P<stim>.*?)\s+EXP=(?P<exp>.*?)\s+"
    r"GOT=(?P<got>.*?)\s+(?P<res>PASS|FAIL)\s*$",
    re.MULTILINE,
)
_SUMMARY_RE = re.compile(
    r"^\s*Mismatches:\s*(?P<failed>\d+)\s+in\s+(?P<total>\d+)\s+samples?\s*$",
    re.IGNORECASE | re.MULTILINE,
)
_TIME_RE = re.compile(r"(?:^|[\s,])T=(?P<time>\d+(?:\.\d+)?)(?=[\s,]|$)")


def _check_lines(raw_log: str) -> tuple[int, int, list[re.Match[str]]]:
    """(failed, total, failing matches) over all CHECK lines."""
    matches = list(_CHECK_RE.finditer(raw_log or ""))
    failing = [m for m in matches if m.group("res") == "FAIL"]
    return len(failing), len(matches), failing


def parse_mismatches(raw_log: str, *, cap: int = MISMATCH_CAP) -> list[MismatchEntry]:
    """Extract failed testpoints, capped to bound prompt size.

    Counts are not capped; see :func:`evaluate_sim_log` for exact totals.
    """
    _, _, failing = _check_lines(raw_log)
    entries: list[MismatchEntry] = []
    for m in failing[:cap]:
        expected, actual = m.group("exp"), m.group("got")
        if expected == actual:  # testbench flagged FAIL despite equal rendering
            actual = f"{actual} (flagged FAIL by testbench)"
        time_m = _TIME_RE.search(m.group("stim"))
        entries.append(
            MismatchEntry(
                testpoint_id=m.group("id"),
                stimulus=m.group("stim"),
                expected=expected,
                actual=actual,
                time=float(time_m.group("time")) if time_m else None,
            )
        )
    if entries:
        return entries
    summary = _SUMMARY_RE.search(raw_log or "")
    if summary and int(summary.group("failed")) > 0:
        failed, total = int(summary.group("failed")), int(summary.group("total"))
        return [
            MismatchEntry(
                testpoint_id="aggregate",
                stimulus="(per-point detail not reported)",
                expected="0 failing samples",
                actual=f"{failed} of {total} samples failed",
            )
        ]
    return []


def evaluate_sim_log(
    raw_log: str, exit_code: int, *, cap: int = MISMATCH_CAP
) -> tuple[str, tuple[MismatchEntry, ...], int, int]:
    """Classify a simulator run from its log and exit status.

    Returns (status, mismatches, failed_count, total_count); counts are exact
    even when the extracted entries are capped.
    """
    failed, total, _ = _check_lines(raw_log)
    summary = _SUMMARY_RE.search(raw_log or "")
    if total == 0 and summary:
        failed, total = int(summary.group("failed")), int(summary.group("total"))
    mismatches = tuple(parse_mismatches(raw_log, cap=cap))
    if failed > 0:
        return "fail", mismatches, failed, total
    if exit_code != 0:
        head = (raw_log or "").strip()[:200] or "(no output)"
        unparsed = MismatchEntry(
            testpoint_id="unparsed",
            stimulus="(no recognizable check lines)",
            expected="simulation pass",
            actual=f"exit status {exit_code}: {head}",
        )
        return "fail", (unparsed,), 1, max(total, 1)
    return "pass", (), 0, total


def simulate(
    workspace: str | Path,
    timeout_s: float,
    *,
    sim_cfg: SimulatorConfig | None = None,
    seed: int | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> SimResult:
    """Compile and run the simulation under the deadline.

    Runaway processes are killed with their whole process tree at the
    deadline; each of the two steps gets the full ``timeout_s`` budget.
    """
    cfg = sim_cfg if sim_cfg is not None else SimulatorConfig()
    workspace = Path(workspace)
    sources = [workspace / DUT_FILENAME, workspace / TB_FILENAME]
    ref = workspace / REF_FILENAME
    if ref.is_file():
        sources.append(ref)
    exe = workspace / "sim.image"

    start = clock()
    compile_cmd = tuple(t.replace("{exe}", str(exe)) for t in cfg.compile_cmd) + tuple(
        str(s) for s in sources
    )
    rc, build_out = _run_killing_tree(compile_cmd, workspace, timeout_s, None)
    if rc is None:
        return SimResult(status="timeout", raw_log=build_out, wall_time_s=clock() - start)
    if rc != 0:
        return SimResult(status="build_error", raw_log=build_out, wall_time_s=clock() - start)

    run_cmd = tuple(t.replace("{exe}", str(exe)) for t in cfg.run_cmd)
    if seed is not None:
        run_cmd = run_cmd + (cfg.seed_plusarg.format(seed=seed),)
    rc, out = _run_killing_tree(run_cmd, workspace, timeout_s, None)
    wall = clock() - start
    if rc is None:
        return SimResult(status="timeout", raw_log=out, wall_time_s=wall)
    status, mismatches, failed, total = evaluate_sim_log(out, rc, cap=cfg.mismatch_cap)
    return SimResult(
        status=status,
        raw_log=out,
        mismatches=mismatches,
        failed_count=failed,
        total_count=total,
        wall_time_s=wall,
    )


class VerilogSimulator:
    """Engine-facing simulator: assembles a workspace per call and runs it.

    Missing simulator binaries fail at construction, not per case.
    """

    def __init__(
        self,
        timeout_s: float,
        *,
        sim_cfg: SimulatorConfig | None = None,
        workspace_root: str | Path | None = None,
        keep_workspaces: bool = False,
        default_seed: int | None = None,
    ):
        self._cfg = sim_cfg if sim_cfg is not None else SimulatorConfig()
        for launcher in (self._cfg.compile_cmd[0], self._cfg.run_cmd[0]):
            if shutil.which(launcher) is None:
                raise SimulatorMissingError(f"simulator binary {launcher!r} not found on PATH")
        self._timeout_s = timeout_s
        self._root = Path(workspace_root) if workspace_root is not None else None
        self._keep = keep_workspaces
        self._default_seed = default_seed

    def run(self, verilog_src: str, case: CaseSpec) -> SimResult:
        try:
            workspace = assemble_sim(verilog_src, case, root=self._root)
        except SimBuildError as exc:
            return SimResult(status="build_error", raw_log=str(exc))
        try:
            seed = case.seed if case.seed is not None else self._default_seed
            return simulate(workspace, self._timeout_s, sim_cfg=self._cfg, seed=seed)
        finally:
            if not self._keep:
                shutil.rmtree(workspace, ignore_errors=True)
