"""Shared domain types for the generate/compile/simulate repair loop.

Every type here is an immutable value object that is safe to share between
worker threads, and every type has a canonical one-line JSON serialization
(see :func:`dumps` / :func:`loads`) used by result logs and trace files.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Union


class Verdict(str, Enum):
    """Outcome classification for a single iteration or a whole trial."""

    SUCCESS = "Success"
    SYNTAX_ERROR = "SyntaxError"
    FUNCTIONAL_ERROR = "FunctionalError"
    TOOL_TIMEOUT = "ToolTimeout"
    PROVIDER_ERROR = "ProviderError"
    EXHAUSTED = "Exhausted"


class Provenance(str, Enum):
    INITIAL = "initial-generation"
    REVISION = "revision"
    POST_ESCAPE = "post-escape-revision"


class ErrorKind(str, Enum):
    SYNTAX = "syntax"
    FUNCTIONAL_STATIC = "functional-static"


# Catalog classes whose diagnostics are compile-time *logical* errors
# (uninitialized signals, combinational cycles) rather than plain syntax.
FUNCTIONAL_STATIC_CLASSES = frozenset({"B3", "C2"})


@dataclass(frozen=True)
class SourceLocation:
    file: str
    line: int
    column: int | None = None


@dataclass(frozen=True)
class CaseSpec:
    """One benchmark problem: specification, testbench, and metadata."""

    case_id: str
    spec_text: str
    testbench_src: str
    module_name: str
    reference_src: str | None = None
    origin: str = ""
    excluded: str | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.case_id:
            raise ValueError("CaseSpec.case_id must be nonempty")
        if not self.testbench_src:
            raise ValueError(f"case {self.case_id}: testbench_src must be nonempty")
        if not self.module_name:
            raise ValueError(f"case {self.case_id}: module_name must be nonempty")


@dataclass(frozen=True)
class Candidate:
    """One generated Chisel source attempt, plus its Verilog once compiled."""

    iteration: int
    chisel_src: str
    verilog_src: str | None = None
    provenance: Provenance = Provenance.INITIAL

    def __post_init__(self) -> None:
        if self.iteration < 0:
            raise ValueError("Candidate.iteration must be >= 0")
        if (self.iteration == 0) != (self.provenance is Provenance.INITIAL):
            raise ValueError(
                "iteration 0 must (and only it may) carry initial-generation provenance"
            )


# Patterns that pull the named construct (identifier, method, type) out of a
# compiler message.  Ordered: first hit wins.
_CONSTRUCT_PATTERNS: tuple[re.Pattern[str], ...] = (
    re.compile(r"Value (\w+) is not a member"),
    re.compile(r"Reference (\w+) (?:is )?not fully initialized"),
    re.compile(r"A port (\w+)\b"),
    re.compile(r"sink \([^)]*?(\w+)\)"),
    re.compile(r"for method (\w+)"),
    re.compile(r"cannot be cast to class ([\w.]+)"),
    re.compile(r"required\s*:\s*([\w.]+)"),
    re.compile(r"Sample path:\s*\{?\s*(\w+)"),
    re.compile(r"^(\w+) must be hardware"),
    re.compile(r"[`']([A-Za-z_][\w.]*)'"),
)

_WS_RUN = re.compile(r"\s+")


def _named_construct(message: str) -> str | None:
    for pat in _CONSTRUCT_PATTERNS:
        m = pat.search(message)
        if m:
            return m.group(1)
    return None


def _normalized_head(message: str, width: int = 80) -> str:
    head = re.sub(r"[0-9]+", "", message[: width * 2])
    head = _WS_RUN.sub(" ", head).strip().lower()
    return head[:width]


@dataclass(frozen=True)
class ErrorEntry:
    """One structured compiler diagnostic.

    ``location_signature`` is computed from the message content only, never
    from line/column numbers, so the same diagnostic keeps the same signature
    when revised code shifts lines.
    """

    kind: ErrorKind
    message: str
    location: SourceLocation | None = None
    suggestion: str | None = None
    catalog_class: str | None = None
    location_signature: str = ""

    def __post_init__(self) -> None:
        if not self.message:
            raise ValueError("ErrorEntry.message must be nonempty")
        if not self.location_signature:
            object.__setattr__(self, "location_signature", location_signature(self))


def location_signature(entry: ErrorEntry) -> str:
    """Line-number-independent identity of a diagnostic.

    Combines the catalog class (when matched), the construct named in the
    message, and the numeral-stripped message head.
    """
    construct = _named_construct(entry.message)
    return "|".join(
        (
            entry.catalog_class or "-",
            construct or "-",
            _normalized_head(entry.message),
        )
    )


@dataclass(frozen=True)
class MismatchEntry:
    """One failed functional point: stimulus, expected output, observed output."""

    testpoint_id: str
    stimulus: str
    expected: str
    actual: str
    time: float | None = None

    def __post_init__(self) -> None:
        if self.expected == self.actual:
            raise ValueError("MismatchEntry requires expected != actual")


@dataclass(frozen=True)
class SyntaxFeedback:
    entries: tuple[ErrorEntry, ...]
    raw_log: str = ""
    variant: str = field(default="Syntax", init=False)

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("Syntax feedback requires at least one entry")


@dataclass(frozen=True)
class FunctionalFeedback:
    mismatches: tuple[MismatchEntry, ...]
    failed_count: int
    total_count: int
    raw_log: str = ""
    variant: str = field(default="Functional", init=False)

    def __post_init__(self) -> None:
        if self.failed_count < 1:
            raise ValueError("Functional feedback requires failed_count >= 1")
        if self.failed_count > self.total_count:
            raise ValueError("failed_count cannot exceed total_count")


Feedback = Union[SyntaxFeedback, FunctionalFeedback]


def feedback_signatures(feedback: Feedback) -> frozenset[str]:
    """Location signatures of a feedback, used for non-progress comparison.

    Functional feedback has no compiler locations; failing testpoints act as
    the comparable "locations" across iterations.
    """
    if isinstance(feedback, SyntaxFeedback):
        return frozenset(e.location_signature for e in feedback.entries)
    return frozenset(f"functional:{m.testpoint_id}" for m in feedback.mismatches)


@dataclass(frozen=True)
class PlanItem:
    location: str
    cause_analysis: str
    solution: str

    def __post_init__(self) -> None:
        if not self.cause_analysis:
            raise ValueError("PlanItem.cause_analysis must be nonempty")
        if not self.solution:
            raise ValueError("PlanItem.solution must be nonempty")


@dataclass(frozen=True)
class RevisionPlan:
    items: tuple[PlanItem, ...]
    raw_response: str = ""

    def __post_init__(self) -> None:
        if not self.items:
            raise ValueError("RevisionPlan requires at least one item")


@dataclass(frozen=True)
class IterationRecord:
    candidate: Candidate
    feedback: Feedback | None = None
    plan: RevisionPlan | None = None
    verdict: Verdict = Verdict.SUCCESS

    def __post_init__(self) -> None:
        if (self.verdict is Verdict.SUCCESS) != (self.feedback is None):
            raise ValueError("verdict Success exactly when feedback is absent")


@dataclass(frozen=True)
class Erasure:
    """Record of one escape event: the span erased and why."""

    span_start: int
    span_end: int
    cause_summary: str
    erased_records: tuple[IterationRecord, ...]


@dataclass(frozen=True)
class Trace:
    records: tuple[IterationRecord, ...] = ()
    erasures: tuple[Erasure, ...] = ()

    def __post_init__(self) -> None:
        indices = [r.candidate.iteration for r in self.records]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("trace iteration indices must be strictly increasing")


@dataclass(frozen=True)
class Sampling:
    temperature: float
    top_p: float


@dataclass(frozen=True)
class RunConfig:
    """Knobs for one run: iteration cap, trials, metrics, and timeouts."""

    max_iterations: int = 10
    trials: int = 10
    k_values: tuple[int, ...] = (1, 5, 10)
    model_id: str = ""
    sampling: Sampling | None = None
    compile_timeout_s: float = 180.0
    sim_timeout_s: float = 120.0
    llm_timeout_s: float = 120.0
    parallelism: int = 1
    escape_enabled: bool = True

    def __post_init__(self) -> None:
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for k in self.k_values:
            if not 1 <= k <= self.trials:
                raise ValueError(f"k={k} must satisfy 1 <= k <= trials={self.trials}")
        for name in ("compile_timeout_s", "sim_timeout_s", "llm_timeout_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


def classify_verdict(compile_ok: bool, sim_ok: bool | None) -> Verdict:
    """Map a (compile, simulate) result pair onto a verdict.

    Simulation is skipped on compile failure, so ``sim_ok`` must be absent
    exactly when ``compile_ok`` is false.
    """
    if not compile_ok:
        if sim_ok is not None:
            raise ValueError("sim_ok must be absent when compilation failed")
        return Verdict.SYNTAX_ERROR
    if sim_ok is None:
        raise ValueError("sim_ok required when compilation succeeded")
    return Verdict.SUCCESS if sim_ok else Verdict.FUNCTIONAL_ERROR


def append_record(trace: Trace, record: IterationRecord) -> Trace:
    """Return a new trace with ``record`` appended; prior records unchanged."""
    expected = trace.records[-1].candidate.iteration + 1 if trace.records else 0
    got = record.candidate.iteration
    if got != expected:
        raise ValueError(f"out-of-order iteration index: expected {expected}, got {got}")
    return replace(trace, records=trace.records + (record,))


# ---------------------------------------------------------------------------
# Canonical serialization: every type maps to a self-describing JSON object
# tagged with a "record" key, rendered as one sorted-key line.
# ---------------------------------------------------------------------------


def _loc_to_dict(loc: SourceLocation | None) -> dict[str, Any] | None:
    if loc is None:
        return None
    return {"file": loc.file, "line": loc.line, "column": loc.column}


def _loc_from_dict(data: Mapping[str, Any] | None) -> SourceLocation | None:
    if data is None:
        return None
    return SourceLocation(file=data["file"], line=data["line"], column=data.get("column"))


def to_record(obj: Any) -> dict[str, Any]:
    """Convert a domain value into its tagged, JSON-ready dict form."""
    if isinstance(obj, CaseSpec):
        return {
            "record": "CaseSpec",
            "case_id": obj.case_id,
            "spec_text": obj.spec_text,
            "testbench_src": obj.testbench_src,
            "reference_src": obj.reference_src,
            "module_name": obj.module_name,
            "origin": obj.origin,
            "excluded": obj.excluded,
            "seed": obj.seed,
        }
    if isinstance(obj, Candidate):
        return {
            "record": "Candidate",
            "iteration": obj.iteration,
            "chisel_src": obj.chisel_src,
            "verilog_src": obj.verilog_src,
            "provenance": obj.provenance.value,
        }
    if isinstance(obj, ErrorEntry):
        return {
            "record": "ErrorEntry",
            "kind": obj.kind.value,
            "location": _loc_to_dict(obj.location),
            "message": obj.message,
            "suggestion": obj.suggestion,
            "catalog_class": obj.catalog_class,
            "location_signature": obj.location_signature,
        }
    if isinstance(obj, MismatchEntry):
        return {
            "record": "MismatchEntry",
            "testpoint_id": obj.testpoint_id,
            "stimulus": obj.stimulus,
            "expected": obj.expected,
            "actual": obj.actual,
            "time": obj.time,
        }
    if isinstance(obj, SyntaxFeedback):
        return {
            "record": "Feedback",
            "variant": "Syntax",
            "entries": [to_record(e) for e in obj.entries],
            "raw_log": obj.raw_log,
        }
    if isinstance(obj, FunctionalFeedback):
        return {
            "record": "Feedback",
            "variant": "Functional",
            "mismatches": [to_record(m) for m in obj.mismatches],
            "failed_count": obj.failed_count,
            "total_count": obj.total_count,
            "raw_log": obj.raw_log,
        }
    if isinstance(obj, RevisionPlan):
        return {
            "record": "RevisionPlan",
            "items": [
                {
                    "location": i.location,
                    "cause_analysis": i.cause_analysis,
                    "solution": i.solution,
                }
                for i in obj.items
            ],
            "raw_response": obj.raw_response,
        }
    if isinstance(obj, IterationRecord):
        return {
            "record": "IterationRecord",
            "candidate": to_record(obj.candidate),
            "feedback": None if obj.feedback is None else to_record(obj.feedback),
            "plan": None if obj.plan is None else to_record(obj.plan),
            "verdict": obj.verdict.value,
        }
    if isinstance(obj, Erasure):
        return {
            "record": "Erasure",
            "span_start": obj.span_start,
            "span_end": obj.span_end,
            "cause_summary": obj.cause_summary,
            "erased_records": [to_record(r) for r in obj.erased_records],
        }
    if isinstance(obj, Trace):
        return {
            "record": "Trace",
            "records": [to_record(r) for r in obj.records],
            "erasures": [to_record(e) for e in obj.erasures],
        }
    if isinstance(obj, RunConfig):
        return {
            "record": "RunConfig",
            "max_iterations": obj.max_iterations,
            "trials": obj.trials,
            "k_values": list(obj.k_values),
            "model_id": obj.model_id,
            "sampling": "default"
            if obj.sampling is None
            else {"temperature": obj.sampling.temperature, "top_p": obj.sampling.top_p},
            "compile_timeout_s": obj.compile_timeout_s,
            "sim_timeout_s": obj.sim_timeout_s,
            "llm_timeout_s": obj.llm_timeout_s,
            "parallelism": obj.parallelism,
            "escape_enabled": obj.escape_enabled,
        }
    raise TypeError(f"no canonical record form for {type(obj).__name__}")


def from_record(data: Mapping[str, Any]) -> Any:
    """Inverse of :func:`to_record`."""
    tag = data.get("record")
    if tag == "CaseSpec":
        return CaseSpec(
            case_id=data["case_id"],
            spec_text=data["spec_text"],
            testbench_src=data["testbench_src"],
            reference_src=data.get("reference_src"),
            module_name=data["module_name"],
            origin=data.get("origin", ""),
            excluded=data.get("excluded"),
            seed=data.get("seed"),
        )
    if tag == "Candidate":
        return Candidate(
            iteration=data["iteration"],
            chisel_src=data["chisel_src"],
            verilog_src=data.get("verilog_src"),
            provenance=Provenance(data["provenance"]),
        )
    if tag == "ErrorEntry":
        return ErrorEntry(
            kind=ErrorKind(data["kind"]),
            message=data["message"],
            location=_loc_from_dict(data.get("location")),
            suggestion=data.get("suggestion"),
            catalog_class=data.get("catalog_class"),
            location_signature=data.get("location_signature", ""),
        )
    if tag == "MismatchEntry":
        return MismatchEntry(
            testpoint_id=data["testpoint_id"],
            stimulus=data["stimulus"],
            expected=data["expected"],
            actual=data["actual"],
            time=data.get("time"),
        )
    if tag == "Feedback":
        if data["variant"] == "Syntax":
            return SyntaxFeedback(
                entries=tuple(from_record(e) for e in data["entries"]),
                raw_log=data.get("raw_log", ""),
            )
        if data["variant"] == "Functional":
            return FunctionalFeedback(
                mismatches=tuple(from_record(m) for m in data["mismatches"]),
                failed_count=data["failed_count"],
                total_count=data["total_count"],
                raw_log=data.get("raw_log", ""),
            )
        raise ValueError(f"unknown feedback variant {data['variant']!r}")
    if tag == "RevisionPlan":
        return RevisionPlan(
            items=tuple(
                PlanItem(
                    location=i["location"],
                    cause_analysis=i["cause_analysis"],
                    solution=i["solution"],
                )
                for i in data["items"]
            ),
            raw_response=data.get("raw_response", ""),
        )
    if tag == "IterationRecord":
        return IterationRecord(
            candidate=from_record(data["candidate"]),
            feedback=None if data.get("feedback") is None else from_record(data["feedback"]),
            plan=None if data.get("plan") is None else from_record(data["plan"]),
            verdict=Verdict(data["verdict"]),
        )
    if tag == "Erasure":
        return Erasure(
            span_start=data["span_start"],
            span_end=data["span_end"],
            cause_summary=data.get("cause_summary", ""),
            erased_records=tuple(from_record(r) for r in data["erased_records"]),
        )
    if tag == "Trace":
        return Trace(
            records=tuple(from_record(r) for r in data["records"]),
            erasures=tuple(from_record(e) for e in data["erasures"]),
        )
    if tag == "RunConfig":
        sampling = data.get("sampling", "default")
        return RunConfig(
            max_iterations=data["max_iterations"],
            trials=data["trials"],
            k_values=tuple(data["k_values"]),
            model_id=data.get("model_id", ""),
            sampling=None
            if sampling == "default"
            else Sampling(temperature=sampling["temperature"], top_p=sampling["top_p"]),
            compile_timeout_s=data["compile_timeout_s"],
            sim_timeout_s=data["sim_timeout_s"],
            llm_timeout_s=data["llm_timeout_s"],
            parallelism=data["parallelism"],
            escape_enabled=data["escape_enabled"],
        )
    raise ValueError(f"unknown record tag {tag!r}")


def dumps(obj: Any) -> str:
    """Canonical one-line JSON form (sorted keys, compact separators)."""
    return json.dumps(to_record(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def loads(line: str) -> Any:
    return from_record(json.loads(line))
