"""Benchmark harness: suite loading, resumable trial runs, Pass@k, reports.

Each completed (case, trial) outcome is appended to a line-delimited results
log as it finishes, so a killed run resumes without repeating work.  Reports
are pure functions recomputed from the raw outcomes, never maintained
incrementally.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .domain import CaseSpec, RunConfig, Verdict, from_record, to_record
from .engine import CaseOutcome, outcome_from_record, outcome_to_record

LOG_SCHEMA = "results-log@1"
MANIFEST_FILENAME = "manifest"
SPEC_FILENAME = "spec.md"
TB_FILENAME = "tb.v"
REF_FILENAME = "ref.v"


class CaseLoadError(ValueError):
    """A case directory is malformed; the message names the case."""


@dataclass(frozen=True)
class BenchResult:
    config: RunConfig
    per_case: Mapping[str, tuple[CaseOutcome, ...]]
    started_at: str
    finished_at: str
    provider_usage: Mapping[str, int]
    aborted: str | None = None


# ---------------------------------------------------------------------------
# Suite loading
# ---------------------------------------------------------------------------


def _load_one_case(case_dir: Path) -> CaseSpec:
    case_id = case_dir.name
    manifest_path = case_dir / MANIFEST_FILENAME
    if not manifest_path.is_file():
        raise CaseLoadError(f"case {case_id}: missing {MANIFEST_FILENAME}")
    try:
        manifest = json.loads(manifest_path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise CaseLoadError(f"case {case_id}: manifest is not valid JSON: {exc}") from None
    spec_path = case_dir / SPEC_FILENAME
    tb_path = case_dir / TB_FILENAME
    if not spec_path.is_file():
        raise CaseLoadError(f"case {case_id}: missing {SPEC_FILENAME}")
    if not tb_path.is_file():
        raise CaseLoadError(f"case {case_id}: missing {TB_FILENAME}")
    ref_path = case_dir / REF_FILENAME
    excluded = None
    if manifest.get("excluded"):
        excluded = manifest.get("exclusion_reason") or "excluded without stated reason"
    try:
        return CaseSpec(
            case_id=case_id,
            spec_text=spec_path.read_text("utf-8"),
            testbench_src=tb_path.read_text("utf-8"),
            reference_src=ref_path.read_text("utf-8") if ref_path.is_file() else None,
            module_name=manifest.get("module_name", ""),
            origin=manifest.get("origin", ""),
            excluded=excluded,
            seed=manifest.get("seed"),
        )
    except (ValueError, KeyError) as exc:
        raise CaseLoadError(f"case {case_id}: {exc}") from None


def load_cases(root: str | Path) -> list[CaseSpec]:
    """Parse every case directory under ``root`` in sorted order.

    Excluded cases are returned with their manifest-stated reason; the loader
    never silently drops a case.
    """
    root = Path(root)
    if not root.is_dir():
        raise CaseLoadError(f"suite root does not exist: {root}")
    case_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not case_dirs:
        raise CaseLoadError(f"suite root contains no case directories: {root}")
    cases = [_load_one_case(d) for d in case_dirs]
    seen: set[str] = set()
    for case in cases:
        if case.case_id in seen:
            raise CaseLoadError(f"duplicate case_id {case.case_id}")
        seen.add(case.case_id)
    return cases


# ---------------------------------------------------------------------------
# Results log
# ---------------------------------------------------------------------------


def _canonical_line(record: Mapping[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def read_results(path: str | Path) -> tuple[list[dict[str, Any]], list[dict[str, Any]], int]:
    """Read a results log: (trial outcome envelopes, header records, skipped lines)."""
    outcomes: list[dict[str, Any]] = []
    headers: list[dict[str, Any]] = []
    skipped = 0
    path = Path(path)
    if not path.is_file():
        return outcomes, headers, skipped
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                tag = data.get("record")
                if tag == "TrialOutcome":
                    # Force full decode so truncated envelopes are skipped.
                    outcome_from_record(data["outcome"])
                    outcomes.append(data)
                elif tag == "RunHeader":
                    headers.append(data)
                elif tag == "Abort":
                    headers.append(data)
                else:
                    skipped += 1
            except (ValueError, KeyError, TypeError):
                skipped += 1
    return outcomes, headers, skipped


def completed_pairs(path: str | Path) -> set[tuple[str, int]]:
    outcomes, _, _ = read_results(path)
    return {(o["case_id"], o["trial"]) for o in outcomes}


TrialEngine = Callable[[CaseSpec, int], CaseOutcome]


def run_bench(
    cases: Iterable[CaseSpec],
    cfg: RunConfig,
    engine: TrialEngine,
    *,
    results_path: str | Path,
    resume: bool = False,
    on_progress: Callable[[str, int, CaseOutcome], None] | None = None,
    now: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
) -> BenchResult:
    """Run ``cfg.trials`` trials per active case over a bounded worker pool.

    Every outcome is appended (and flushed) as it completes; with ``resume``
    already-persisted (case, trial) pairs are skipped.  An unexpected engine
    exception aborts the run, preserving partial results and writing an
    explicit abort marker.
    """
    active = [c for c in cases if c.excluded is None]
    if not active:
        raise ValueError("no cases remain after exclusion")
    by_id = {c.case_id: c for c in active}

    results_path = Path(results_path)
    results_path.parent.mkdir(parents=True, exist_ok=True)
    done: set[tuple[str, int]] = set()
    if results_path.exists() and results_path.stat().st_size > 0:
        if not resume:
            raise FileExistsError(
                f"results log {results_path} already exists; pass resume=True to continue it"
            )
        done = completed_pairs(results_path)

    todo = [
        (case, trial)
        for case in active
        for trial in range(cfg.trials)
        if (case.case_id, trial) not in done
    ]

    started_at = now().isoformat()
    write_lock = threading.Lock()
    aborted: str | None = None

    with results_path.open("a", encoding="utf-8") as log:
        def persist(record: Mapping[str, Any]) -> None:
            with write_lock:
                log.write(_canonical_line(record) + "\n")
                log.flush()

        if not done:
            persist(
                {
                    "record": "RunHeader",
                    "schema": LOG_SCHEMA,
                    "config": to_record(cfg),
                    "started_at": started_at,
                }
            )

        def one(case: CaseSpec, trial: int) -> None:
            outcome = engine(case, trial)
            persist(
                {
                    "record": "TrialOutcome",
                    "case_id": case.case_id,
                    "trial": trial,
                    "model_id": cfg.model_id,
                    "outcome": outcome_to_record(outcome),
                }
            )
            if on_progress is not None:
                on_progress(case.case_id, trial, outcome)

        if cfg.parallelism == 1:
            try:
                for case, trial in todo:
                    one(case, trial)
            except Exception as exc:  # hard-down: preserve partial results
                aborted = f"{type(exc).__name__}: {exc}"
        else:
            with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
                futures = [pool.submit(one, case, trial) for case, trial in todo]
                finished = wait(futures, return_when=FIRST_EXCEPTION)
                for f in finished.not_done:
                    f.cancel()
                for f in finished.done:
                    exc = f.exception()
                    if exc is not None and aborted is None:
                        aborted = f"{type(exc).__name__}: {exc}"
        if aborted is not None:
            persist({"record": "Abort", "reason": aborted})

    outcomes, _, _ = read_results(results_path)
    per_case: dict[str, list[CaseOutcome]] = {c.case_id: [] for c in active}
    usage = {"generator": 0, "reviewer": 0, "inspector": 0}
    for envelope in outcomes:
        if envelope["case_id"] not in by_id:
            continue
        outcome = outcome_from_record(envelope["outcome"])
        per_case[envelope["case_id"]].append(outcome)
        for role, count in outcome.llm_calls.items():
            usage[role] = usage.get(role, 0) + count
    return BenchResult(
        config=cfg,
        per_case={cid: tuple(lst) for cid, lst in per_case.items()},
        started_at=started_at,
        finished_at=now().isoformat(),
        provider_usage=usage,
        aborted=aborted,
    )


# ---------------------------------------------------------------------------
# Metrics and reports
# ---------------------------------------------------------------------------


def pass_at_k(n: int, c: int, k: int) -> float:
    """Probability that at least one of k attempts (out of n, c correct) passes.

    Computed as ``1 - prod_{i<k} (n-c-i)/(n-i)`` over exact rationals, so
    there is no factorial overflow and the ``k=1 -> c/n`` and
    ``n-c < k -> 1`` identities hold exactly.
    """
    for name, value in (("n", n), ("c", c), ("k", k)):
        if not isinstance(value, int):
            raise ValueError(f"{name} must be an integer")
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if c == 0:
        return 0.0
    if n - c < k:
        return 1.0
    miss = Fraction(1)
    for i in range(k):
        miss *= Fraction(n - c - i, n - i)
    return float(1 - miss)


def _succeeded_within(outcome: CaseOutcome, cap: int) -> bool:
    return outcome.final_verdict is Verdict.SUCCESS and outcome.iterations_used <= cap


def success_vs_iterations(result: BenchResult) -> dict[int, dict[int, float]]:
    """Pass@k for every hypothetical iteration cap n' <= the configured cap.

    One run yields the whole curve: a trial counts as a success under cap n'
    when it succeeded using at most n' iterations.
    """
    table: dict[int, dict[int, float]] = {}
    cases = [outs for outs in result.per_case.values() if outs]
    for k in result.config.k_values:
        row: dict[int, float] = {}
        for cap in range(result.config.max_iterations + 1):
            values = [
                pass_at_k(len(outs), sum(1 for o in outs if _succeeded_within(o, cap)), k)
                for outs in cases
                if k <= len(outs)
            ]
            row[cap] = sum(values) / len(values) if values else 0.0
        table[k] = row
    return table


_MIX_BUCKETS = ("syntax", "functional", "success", "exhausted")


def _bucket_at(outcome: CaseOutcome, iteration: int) -> str:
    records = {r.candidate.iteration: r for r in outcome.trace.records}
    if outcome.final_verdict is Verdict.SUCCESS:
        success_at = outcome.trace.records[-1].candidate.iteration
        if iteration >= success_at:
            return "success"
    record = records.get(iteration)
    if record is None:
        return "exhausted"
    if record.verdict is Verdict.SYNTAX_ERROR:
        return "syntax"
    if record.verdict is Verdict.FUNCTIONAL_ERROR:
        return "functional"
    if record.verdict is Verdict.SUCCESS:
        return "success"
    return "exhausted"  # infrastructure-terminated trials fold in here


def error_mix_by_iteration(result: BenchResult) -> dict[int, dict[str, float]]:
    """Per-iteration verdict-class proportions across all trials.

    Succeeded trials keep counting as success from their success iteration
    on; terminated trials count as exhausted past their last record.  Each
    row sums to 1.
    """
    outcomes = [o for outs in result.per_case.values() for o in outs]
    if not outcomes:
        return {}
    mix: dict[int, dict[str, float]] = {}
    for iteration in range(result.config.max_iterations + 1):
        counts = dict.fromkeys(_MIX_BUCKETS, 0)
        for outcome in outcomes:
            counts[_bucket_at(outcome, iteration)] += 1
        mix[iteration] = {b: counts[b] / len(outcomes) for b in _MIX_BUCKETS}
    return mix


def pass_at_k_summary(result: BenchResult) -> dict[int, float]:
    """Mean Pass@k over cases at the configured cap, per configured k."""
    summary: dict[int, float] = {}
    cases = [outs for outs in result.per_case.values() if outs]
    for k in result.config.k_values:
        values = [
            pass_at_k(
                len(outs), sum(1 for o in outs if o.final_verdict is Verdict.SUCCESS), k
            )
            for outs in cases
            if k <= len(outs)
        ]
        summary[k] = sum(values) / len(values) if values else 0.0
    return summary


def _result_for(
    envelopes: list[dict[str, Any]],
    cfg: RunConfig,
    started_at: str,
    aborted: str | None,
) -> BenchResult:
    per_case: dict[str, list[CaseOutcome]] = {}
    usage = {"generator": 0, "reviewer": 0, "inspector": 0}
    for envelope in envelopes:
        outcome = outcome_from_record(envelope["outcome"])
        per_case.setdefault(envelope["case_id"], []).append(outcome)
        for role, count in outcome.llm_calls.items():
            usage[role] = usage.get(role, 0) + count
    return BenchResult(
        config=cfg,
        per_case={cid: tuple(lst) for cid, lst in sorted(per_case.items())},
        started_at=started_at,
        finished_at="",
        provider_usage=usage,
        aborted=aborted,
    )


def result_from_log(path: str | Path) -> tuple[BenchResult | None, int]:
    """Rebuild one BenchResult from a results log; also reports skipped lines."""
    outcomes, headers, skipped = read_results(path)
    run_headers = [h for h in headers if h.get("record") == "RunHeader"]
    if not run_headers:
        return None, skipped
    aborts = [h for h in headers if h.get("record") == "Abort"]
    return (
        _result_for(
            outcomes,
            from_record(run_headers[0]["config"]),
            run_headers[0].get("started_at", ""),
            aborts[-1]["reason"] if aborts else None,
        ),
        skipped,
    )


def results_by_model(path: str | Path) -> tuple[dict[str, BenchResult], int]:
    """Group a results log's outcomes by model tag (logs may be concatenated)."""
    outcomes, headers, skipped = read_results(path)
    run_headers = [h for h in headers if h.get("record") == "RunHeader"]
    if not run_headers or not outcomes:
        return {}, skipped
    import dataclasses

    configs = [from_record(h["config"]) for h in run_headers]
    by_model: dict[str, BenchResult] = {}
    for model in sorted({o.get("model_id", "") for o in outcomes}):
        cfg = next((c for c in configs if c.model_id == model), None)
        if cfg is None:
            cfg = dataclasses.replace(configs[0], model_id=model)
        envelopes = [o for o in outcomes if o.get("model_id", "") == model]
        by_model[model] = _result_for(
            envelopes, cfg, run_headers[0].get("started_at", ""), None
        )
    return by_model, skipped
