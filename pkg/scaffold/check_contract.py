#!/usr/bin/env python3
"""Scaffold self-check: contract coherence, plus a live smoke when possible.

Structural checks need nothing but Python. The live section (copy scaffold,
install the adder fixture, run the entry command, expect the artifact) runs
only when an sbt launcher and a JDK are available, and reports SKIP
otherwise. Exit 0 means every executed check passed.
"""

from __future__ import annotations

import json
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

SCAFFOLD = Path(__file__).resolve().parent
LIVE_TIMEOUT_S = 600


def main() -> int:
    failures: list[str] = []

    def check(label: str, ok: bool, detail: str = "") -> None:
        print(f"{'ok' if ok else 'FAIL'}: {label}" + (f" ({detail})" if detail else ""))
        if not ok:
            failures.append(label)

    contract_path = SCAFFOLD / "contract.json"
    check("contract.json exists", contract_path.is_file())
    if failures:
        return 1
    contract = json.loads(contract_path.read_text("utf-8"))

    for field in ("module_slot", "entry_command", "output_path", "pinned_versions"):
        check(f"contract field {field!r} present", field in contract)
    pins = contract.get("pinned_versions", {})
    for tool in ("chisel", "scala", "sbt"):
        check(f"version pinned: {tool}", bool(pins.get(tool)))

    slot = SCAFFOLD / contract["module_slot"]
    check("module slot file exists", slot.is_file(), str(slot))
    check("elaboration driver exists", (SCAFFOLD / "src/main/scala/Elaborate.scala").is_file())
    check("sbt build definition exists", (SCAFFOLD / "build.sbt").is_file())
    check(
        "sbt version pin matches contract",
        f"sbt.version={pins.get('sbt')}"
        in (SCAFFOLD / "project/build.properties").read_text("utf-8"),
    )
    build = (SCAFFOLD / "build.sbt").read_text("utf-8")
    check("chisel version pin matches contract", f'"{pins.get("chisel")}"' in build)
    check("scala version pin matches contract", f'"{pins.get("scala")}"' in build)
    for fixture in ("adder8.scala", "uninit_wire.scala", "comb_loop.scala"):
        check(f"fixture {fixture} exists", (SCAFFOLD / "fixtures" / fixture).is_file())
    check(
        "entry command declared",
        isinstance(contract["entry_command"], list) and bool(contract["entry_command"]),
    )

    launcher = contract["entry_command"][0]
    if shutil.which(launcher) is None:
        print(f"SKIP: live elaboration ({launcher!r} not on PATH)")
        return 1 if failures else 0

    with tempfile.TemporaryDirectory(prefix="scaffold-check-") as tmp:
        workspace = Path(tmp) / "ws"
        shutil.copytree(SCAFFOLD, workspace)
        shutil.copyfile(SCAFFOLD / "fixtures/adder8.scala", workspace / contract["module_slot"])
        env = dict(os.environ, **{contract.get("top_env", "CANDIDATE_TOP"): "Adder8"})
        proc = subprocess.run(
            contract["entry_command"],
            cwd=workspace,
            env=env,
            capture_output=True,
            text=True,
            timeout=LIVE_TIMEOUT_S,
        )
        artifact = workspace / contract["output_path"]
        check("live: adder elaboration exits 0", proc.returncode == 0, proc.stderr[-300:])
        check(
            "live: artifact emitted with module name",
            artifact.is_file() and "Adder8" in artifact.read_text("utf-8"),
        )

    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
