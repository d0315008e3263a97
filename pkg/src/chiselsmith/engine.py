"""The iterative repair loop: generate, compile, simulate, review, revise.

One :func:`run_case` execution is strictly sequential; concurrency lives in
the bench harness, which runs many trials at once.  The loop also hosts the
non-progress-loop escape: when the current errors match an earlier
iteration's location signatures and the inspector confirms an identical
cause, the looping span is erased from the trace and review restarts from
the surviving record.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Any, Callable, Mapping, Protocol

from .compile_adapter import CompileResult, parse_diagnostics
from .domain import (
    Candidate,
    CaseSpec,
    Erasure,
    ErrorEntry,
    ErrorKind,
    Feedback,
    FunctionalFeedback,
    IterationRecord,
    PlanItem,
    Provenance,
    RevisionPlan,
    RunConfig,
    SyntaxFeedback,
    Trace,
    Verdict,
    append_record,
    classify_verdict,
    feedback_signatures,
    to_record,
)
from .gateway import (
    LlmGateway,
    MalformedResponse,
    ProviderError,
    parse_code_response,
    parse_inspector_verdict,
    parse_revision_plan,
    render_error_list,
)
from .sim_adapter import SimResult

EVENT_SCHEMA = "engine-event@1"

EventSink = Callable[[dict[str, Any]], None]


class ExcludedCaseError(ValueError):
    """An excluded case was handed to the engine."""


class CompilerPort(Protocol):
    def run(self, candidate: Candidate, case: CaseSpec) -> CompileResult: ...


class SimulatorPort(Protocol):
    def run(self, verilog_src: str, case: CaseSpec) -> SimResult: ...


@dataclass(frozen=True)
class LoopSpan:
    """A detected non-progress loop between two trace iterations."""

    start_iteration: int
    end_iteration: int
    matched_signature: str
    cause_summary: str

    def __post_init__(self) -> None:
        if self.start_iteration >= self.end_iteration:
            raise ValueError("LoopSpan requires start < end")


@dataclass(frozen=True)
class CaseOutcome:
    case_id: str
    final_verdict: Verdict
    iterations_used: int
    trace: Trace
    escapes_triggered: int
    llm_calls: Mapping[str, int]
    timing: Mapping[str, float]


def outcome_to_record(outcome: CaseOutcome) -> dict[str, Any]:
    return {
        "record": "CaseOutcome",
        "case_id": outcome.case_id,
        "final_verdict": outcome.final_verdict.value,
        "iterations_used": outcome.iterations_used,
        "trace": to_record(outcome.trace),
        "escapes_triggered": outcome.escapes_triggered,
        "llm_calls": dict(outcome.llm_calls),
        "timing": dict(outcome.timing),
    }


def outcome_from_record(data: Mapping[str, Any]) -> CaseOutcome:
    from .domain import from_record

    if data.get("record") != "CaseOutcome":
        raise ValueError(f"not a CaseOutcome record: {data.get('record')!r}")
    return CaseOutcome(
        case_id=data["case_id"],
        final_verdict=Verdict(data["final_verdict"]),
        iterations_used=data["iterations_used"],
        trace=from_record(data["trace"]),
        escapes_triggered=data["escapes_triggered"],
        llm_calls=dict(data["llm_calls"]),
        timing=dict(data["timing"]),
    )


def build_feedback(
    compile_result: CompileResult, sim_result: SimResult | None = None
) -> Feedback:
    """Organize tool results into feedback for the reviewer.

    Compile failures and simulation interface build errors travel the syntax
    path; simulation mismatches travel the functional path.
    """
    if compile_result.status == "failed":
        return SyntaxFeedback(entries=compile_result.entries, raw_log=compile_result.raw_log)
    if compile_result.status != "ok":
        raise ValueError(f"cannot build feedback from compile status {compile_result.status!r}")
    if sim_result is None:
        raise ValueError("cannot build feedback: compilation succeeded and no sim result given")
    if sim_result.status == "build_error":
        entries = parse_diagnostics(sim_result.raw_log)
        if not entries:
            entries = [ErrorEntry(kind=ErrorKind.SYNTAX, message="simulation build failed")]
        return SyntaxFeedback(entries=tuple(entries), raw_log=sim_result.raw_log)
    if sim_result.status == "fail":
        return FunctionalFeedback(
            mismatches=sim_result.mismatches,
            failed_count=sim_result.failed_count,
            total_count=sim_result.total_count,
            raw_log=sim_result.raw_log,
        )
    raise ValueError("cannot build feedback when both compilation and simulation succeeded")


def detect_loop(
    trace: Trace, current_feedback: Feedback, gateway: LlmGateway, cfg: RunConfig
) -> LoopSpan | None:
    """Two-stage loop check for the just-appended record.

    Stage 1 is mechanical and free: collect prior records sharing at least
    one location signature with the current feedback; nothing shared means
    no inspector call.  Stage 2 asks the inspector whether the cause is
    identical; only an affirmative verdict with a valid iteration yields a
    span.  Provider failures degrade to "no loop".
    """
    current_sigs = feedback_signatures(current_feedback)
    matching = [
        r
        for r in trace.records[:-1]
        if r.feedback is not None and feedback_signatures(r.feedback) & current_sigs
    ]
    if not matching:
        return None
    try:
        raw = gateway.inspect(trace, current_feedback)
    except ProviderError:
        return None
    verdict = parse_inspector_verdict(raw)
    if not verdict.is_loop:
        return None
    by_iteration = {r.candidate.iteration: r for r in matching}
    matched = by_iteration.get(verdict.matched_prior_iteration)  # type: ignore[arg-type]
    if matched is None:
        return None
    shared = sorted(feedback_signatures(matched.feedback) & current_sigs)  # type: ignore[arg-type]
    return LoopSpan(
        start_iteration=matched.candidate.iteration,
        end_iteration=trace.records[-1].candidate.iteration,
        matched_signature=shared[0],
        cause_summary=verdict.cause_summary or "identical error cause across iterations",
    )


def erase_loop(trace: Trace, span: LoopSpan) -> Trace:
    """Move records inside ``(start, end]`` into the erasure history.

    Surviving records end at the span start; the next appended iteration
    continues the numbering from ``start + 1``.
    """
    indices = {r.candidate.iteration for r in trace.records}
    if span.start_iteration not in indices or span.end_iteration not in indices:
        raise ValueError(f"span {span.start_iteration}..{span.end_iteration} not in trace")
    erased = tuple(
        r
        for r in trace.records
        if span.start_iteration < r.candidate.iteration <= span.end_iteration
    )
    if not erased:
        raise ValueError("span erases no records")
    surviving = tuple(
        r for r in trace.records if r.candidate.iteration <= span.start_iteration
    )
    erasure = Erasure(
        span_start=span.start_iteration,
        span_end=span.end_iteration,
        cause_summary=span.cause_summary,
        erased_records=erased,
    )
    return Trace(records=surviving, erasures=trace.erasures + (erasure,))


def _with_plan_on_last(trace: Trace, plan: RevisionPlan) -> Trace:
    records = trace.records[:-1] + (replace(trace.records[-1], plan=plan),)
    return replace(trace, records=records)


def _timeout_feedback(phase: str, timeout_s: float, raw_log: str) -> SyntaxFeedback:
    entry = ErrorEntry(
        kind=ErrorKind.SYNTAX,
        message=f"{phase} exceeded the {timeout_s:g}s deadline and was killed",
    )
    return SyntaxFeedback(entries=(entry,), raw_log=raw_log)


def _fallback_plan(feedback: Feedback, raw_response: str) -> RevisionPlan:
    # Reviewer output stayed unparseable: hand the raw feedback to the
    # generator as a single catch-all item.
    item = PlanItem(
        location="(reviewer output could not be parsed)",
        cause_analysis=render_error_list(feedback),
        solution="Address every error listed above and regenerate the complete module.",
    )
    return RevisionPlan(items=(item,), raw_response=raw_response)


class _PhaseTimer:
    def __init__(self, clock: Callable[[], float]):
        self._clock = clock
        self.totals = {
            "generate": 0.0,
            "compile": 0.0,
            "simulate": 0.0,
            "review": 0.0,
            "inspect": 0.0,
        }

    def run(self, phase: str, fn: Callable[[], Any]) -> Any:
        start = self._clock()
        try:
            return fn()
        finally:
            self.totals[phase] += self._clock() - start


def run_case(
    case: CaseSpec,
    cfg: RunConfig,
    gateway: LlmGateway,
    compiler: CompilerPort,
    simulator: SimulatorPort,
    *,
    on_event: EventSink | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> CaseOutcome:
    """Run the full repair loop for one case and return its outcome.

    ``cfg.max_iterations`` = n allows candidate 0 plus up to n revision
    candidates.  Erased iterations still count against the budget: the
    attempt counter is monotone across erasures.
    """
    if case.excluded is not None:
        raise ExcludedCaseError(f"case {case.case_id} is excluded: {case.excluded}")

    def emit(event: str, **fields: Any) -> None:
        if on_event is not None:
            on_event({"schema": EVENT_SCHEMA, "event": event, "case_id": case.case_id, **fields})

    timer = _PhaseTimer(clock)
    trace = Trace()
    plan: RevisionPlan | None = None
    prior: Candidate | None = None
    next_index = 0
    generated = 0
    escapes = 0
    just_escaped = False

    def finish(verdict: Verdict, iterations_used: int) -> CaseOutcome:
        emit("finished", verdict=verdict.value, iterations_used=iterations_used)
        return CaseOutcome(
            case_id=case.case_id,
            final_verdict=verdict,
            iterations_used=iterations_used,
            trace=trace,
            escapes_triggered=escapes,
            llm_calls=dict(gateway.call_counts),
            timing=dict(timer.totals),
        )

    while True:
        emit("iteration_started", iteration=next_index)

        # Step 1: generate (one format-reminder retry on malformed output).
        try:
            raw = timer.run("generate", lambda: gateway.generate(case, plan, prior))
            try:
                chisel_src = parse_code_response(raw)
            except MalformedResponse:
                raw = timer.run(
                    "generate",
                    lambda: gateway.generate(case, plan, prior, format_reminder=True),
                )
                try:
                    chisel_src = parse_code_response(raw)
                except MalformedResponse:
                    # Let the toolchain reject it; the iteration still counts.
                    chisel_src = raw
        except ProviderError:
            return finish(Verdict.PROVIDER_ERROR, max(generated - 1, 0))
        generated += 1
        provenance = (
            Provenance.INITIAL
            if next_index == 0
            else Provenance.POST_ESCAPE
            if just_escaped
            else Provenance.REVISION
        )
        just_escaped = False
        candidate = Candidate(
            iteration=next_index, chisel_src=chisel_src, provenance=provenance
        )
        emit("generated", iteration=next_index, provenance=provenance.value)

        # Steps 2-3: compile, then simulate when compilation succeeded.
        compile_result = timer.run("compile", lambda: compiler.run(candidate, case))
        emit("compiled", iteration=next_index, status=compile_result.status)
        if compile_result.status == "timeout":
            feedback = _timeout_feedback(
                "compilation", cfg.compile_timeout_s, compile_result.raw_log
            )
            trace = append_record(
                trace,
                IterationRecord(candidate, feedback, None, Verdict.TOOL_TIMEOUT),
            )
            return finish(Verdict.TOOL_TIMEOUT, generated - 1)

        sim_result: SimResult | None = None
        if compile_result.status == "ok":
            candidate = replace(candidate, verilog_src=compile_result.verilog_src)
            sim_result = timer.run(
                "simulate", lambda: simulator.run(compile_result.verilog_src, case)
            )
            emit("simulated", iteration=next_index, status=sim_result.status)
            if sim_result.status == "timeout":
                feedback = _timeout_feedback(
                    "simulation", cfg.sim_timeout_s, sim_result.raw_log
                )
                trace = append_record(
                    trace,
                    IterationRecord(candidate, feedback, None, Verdict.TOOL_TIMEOUT),
                )
                return finish(Verdict.TOOL_TIMEOUT, generated - 1)
            if sim_result.status == "pass":
                trace = append_record(
                    trace, IterationRecord(candidate, None, None, Verdict.SUCCESS)
                )
                return finish(Verdict.SUCCESS, generated - 1)

        # Step 4: organize tool output into feedback.
        feedback = build_feedback(compile_result, sim_result)
        if sim_result is not None and sim_result.status == "build_error":
            verdict = Verdict.SYNTAX_ERROR  # interface mismatch reads as syntax-like
        else:
            verdict = classify_verdict(
                compile_result.status == "ok",
                None if compile_result.status != "ok" else False,
            )

        # Step 5: update the trace.
        trace = append_record(trace, IterationRecord(candidate, feedback, None, verdict))

        # Step 6: escape check (mechanical prefilter, then inspector).
        span = None
        if cfg.escape_enabled:
            span = timer.run("inspect", lambda: detect_loop(trace, feedback, gateway, cfg))
        if span is not None:
            trace = erase_loop(trace, span)
            escapes += 1
            emit(
                "escaped",
                span_start=span.start_iteration,
                span_end=span.end_iteration,
                matched_signature=span.matched_signature,
                cause_summary=span.cause_summary,
            )

        if generated > cfg.max_iterations:
            return finish(Verdict.EXHAUSTED, cfg.max_iterations)

        # Step 7: review the trace into a revision plan (one retry, then a
        # raw-feedback fallback).
        try:
            raw_plan = timer.run("review", lambda: gateway.review(trace, feedback))
            try:
                plan = parse_revision_plan(raw_plan)
            except MalformedResponse:
                raw_plan = timer.run("review", lambda: gateway.review(trace, feedback))
                try:
                    plan = parse_revision_plan(raw_plan)
                except MalformedResponse:
                    plan = _fallback_plan(feedback, raw_plan)
        except ProviderError:
            return finish(Verdict.PROVIDER_ERROR, generated - 1)
        trace = _with_plan_on_last(trace, plan)
        emit("reviewed", iteration=trace.records[-1].candidate.iteration, items=len(plan.items))

        # Step 8: the next candidate revises the surviving tail.
        prior = trace.records[-1].candidate
        if span is not None:
            just_escaped = True
            next_index = span.start_iteration + 1
        else:
            next_index += 1
