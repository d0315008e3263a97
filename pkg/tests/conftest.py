from __future__ import annotations

import json
import textwrap
from pathlib import Path

import pytest

from chiselsmith.domain import CaseSpec, RunConfig

DATA_DIR = Path(__file__).parent / "data"
MINI_SUITE = DATA_DIR / "mini_suite"

# Verbatim compiler-feedback fixtures for the twelve cataloged error classes.
GOLDEN_DIAGNOSTICS = {
    "A1": "Value sgnal is not a member. Did you mean signal?",
    "A2": "class chisel3.UInt cannot be cast to class chisel3.SInt.",
    "A3": "Too many arguments. Found 2, expected 1 for method apply:(i:Int)",
    "B1": "A port rst with abstract reset type was unable to be inferred by InferResets.",
    "B2": (
        "Clock must be hardware, not a bare Chisel type. "
        "Perhaps you forgot to wrap it in Wire(_) or IO(_)?"
    ),
    "B3": "Reference w not fully initialized.",
    "B4": (
        "Connection between sink (... OneBdl) and source (... AnotherBdl) failed: "
        ".cSource Record missing field (c)."
    ),
    "B5": "found: chisel3.Bool\nrequired: chisel3.UInt",
    "B6": "Value asClock is not a member of chisel3.UInt.",
    "B7": "-1 is out of bounds. (min 0, max 3)",
    "C1": "No implicit clock.",
    "C2": (
        "Detected combinational cycle in a FIRRTL module. "
        "Sample path: {a <- a_T_1 <- ... <- a_T <- ... <- a}."
    ),
}

CODE_RESPONSE = "```scala\nimport chisel3._\nclass Top extends Module {}\n```"
PLAN_RESPONSE = (
    "ITEM 1\n"
    "LOCATION: line 3, wire w\n"
    "CAUSE: wire w lacks a default value\n"
    "SOLUTION: declare it with WireDefault(0.U)\n"
)
AFFIRMING_VERDICT = "IS_LOOP: yes\nMATCHED_ITERATION: 0\nCAUSE: same uninitialized wire w\n"
DENYING_VERDICT = "IS_LOOP: no\nMATCHED_ITERATION: none\nCAUSE: causes differ\n"

B3_LOG = "Mod.scala:14:3: error: Reference w not fully initialized."
A1_LOG = "Mod.scala:3:7: error: Value sgnal is not a member. Did you mean signal?"
B5_LOG = "Mod.scala:5:9: error: found: chisel3.Bool\n  required: chisel3.UInt"
FUNCTIONAL_LOG = "CHECK 3 IN=a=1,b=2 EXP=3 GOT=4 FAIL\nCHECK 4 IN=a=2,b=2 EXP=4 GOT=4 PASS"


def make_case(case_id: str = "adder8", module_name: str = "Adder8", **overrides) -> CaseSpec:
    fields = dict(
        case_id=case_id,
        spec_text="8-bit adder with ports a, b, sum",
        testbench_src="module tb; endmodule\n",
        module_name=module_name,
    )
    fields.update(overrides)
    return CaseSpec(**fields)


def make_config(**overrides) -> RunConfig:
    fields = dict(max_iterations=10, trials=3, k_values=(1, 3), model_id="mock")
    fields.update(overrides)
    return RunConfig(**fields)


def write_case_dir(
    root: Path,
    case_id: str,
    module_name: str | None = None,
    *,
    manifest_extra: dict | None = None,
    with_ref: bool = False,
    with_tb: bool = True,
) -> Path:
    case_dir = root / case_id
    case_dir.mkdir(parents=True)
    (case_dir / "spec.md").write_text(f"Spec for {case_id}\n", encoding="utf-8")
    if with_tb:
        (case_dir / "tb.v").write_text("module tb; endmodule\n", encoding="utf-8")
    if with_ref:
        (case_dir / "ref.v").write_text("module Ref(); endmodule\n", encoding="utf-8")
    manifest = {"module_name": module_name or case_id.capitalize(), "origin": "test"}
    manifest.update(manifest_extra or {})
    (case_dir / "manifest").write_text(json.dumps(manifest), encoding="utf-8")
    return case_dir


class FakeClock:
    """Deterministic perf counter: advances one unit per call."""

    def __init__(self) -> None:
        self.t = 0.0

    def __call__(self) -> float:
        self.t += 1.0
        return self.t


@pytest.fixture
def fake_clock() -> FakeClock:
    return FakeClock()


_STUB_TOOL = textwrap.dedent(
    """\
    import os, sys, time
    from pathlib import Path

    sys.stdout.write("[info] stub toolchain starting\\n")
    src = Path("candidate.scala").read_text(encoding="utf-8")
    Path("out").mkdir(exist_ok=True)
    Path("out/cwd.txt").write_text(str(Path.cwd()), encoding="utf-8")
    if "SLEEP_FOREVER" in src:
        time.sleep(60)
    fail_lines = [l[len("FAIL_WITH:"):] for l in src.splitlines() if l.startswith("FAIL_WITH:")]
    if fail_lines:
        for line in fail_lines:
            sys.stdout.write(line + "\\n")
        sys.exit(1)
    top = os.environ.get("CANDIDATE_TOP", "Top")
    Path("out/candidate.sv").write_text(
        "module %s();\\nendmodule\\n" % top, encoding="utf-8"
    )
    sys.stdout.write("[info] done\\n")
    """
)


@pytest.fixture
def stub_scaffold(tmp_path: Path) -> Path:
    """A scaffold whose 'toolchain' is a python script driven by the source.

    Candidate sources containing ``FAIL_WITH:<line>`` lines fail with those
    diagnostics; ``SLEEP_FOREVER`` hangs; anything else emits an artifact.
    """
    scaffold = tmp_path / "stub_scaffold"
    scaffold.mkdir()
    (scaffold / "tool.py").write_text(_STUB_TOOL, encoding="utf-8")
    (scaffold / "contract.json").write_text(
        json.dumps(
            {
                "schema": "scaffold-contract@1",
                "module_slot": "candidate.scala",
                "entry_command": ["python3", "tool.py"],
                "output_path": "out/candidate.sv",
                "top_env": "CANDIDATE_TOP",
                "pinned_versions": {"chisel": "stub", "scala": "stub", "sbt": "stub"},
            }
        ),
        encoding="utf-8",
    )
    return scaffold


_FAKE_SIM_COMPILE = textwrap.dedent(
    """\
    import sys
    from pathlib import Path

    args = sys.argv[1:]
    exe = Path(args[args.index("-o") + 1])
    sources = [Path(p) for p in args[args.index("-o") + 2:]]
    text = "\\n".join(p.read_text(encoding="utf-8") for p in sources)
    if "BUILD_FAIL" in text:
        sys.stderr.write("tb.sv:12: error: port mismatch against DUT\\n")
        sys.exit(2)
    if "BUILD_HANG" in text:
        import time; time.sleep(60)
    exe.write_text(text, encoding="utf-8")
    """
)

_FAKE_SIM_RUN = textwrap.dedent(
    """\
    import sys, time
    from pathlib import Path

    text = Path(sys.argv[1]).read_text(encoding="utf-8")
    if "SIMHANG" in text:
        time.sleep(60)
    exit_code = 0
    for line in text.splitlines():
        if line.startswith("//SIMLOG:"):
            sys.stdout.write(line[len("//SIMLOG:"):] + "\\n")
        if line.startswith("//SIMEXIT:"):
            exit_code = int(line[len("//SIMEXIT:"):])
    for arg in sys.argv[2:]:
        sys.stdout.write("plusarg %s\\n" % arg)
    sys.exit(exit_code)
    """
)


@pytest.fixture
def fake_simulator_cfg(tmp_path: Path):
    """SimulatorConfig whose compile/run steps are scripted python files.

    Testbench sources drive behavior: ``//SIMLOG:<line>`` lines are echoed by
    the run step, ``//SIMEXIT:<n>`` sets its exit code, ``BUILD_FAIL`` /
    ``BUILD_HANG`` / ``SIMHANG`` trigger those paths.
    """
    from chiselsmith.sim_adapter import SimulatorConfig

    compile_py = tmp_path / "fake_sim_compile.py"
    run_py = tmp_path / "fake_sim_run.py"
    compile_py.write_text(_FAKE_SIM_COMPILE, encoding="utf-8")
    run_py.write_text(_FAKE_SIM_RUN, encoding="utf-8")
    return SimulatorConfig(
        compile_cmd=("python3", str(compile_py), "-o", "{exe}"),
        run_cmd=("python3", str(run_py), "{exe}"),
    )
