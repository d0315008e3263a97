"""LLM-driven Chisel module generation with a compile/simulate repair loop."""

from .domain import (
    Candidate,
    CaseSpec,
    ErrorEntry,
    Feedback,
    FunctionalFeedback,
    IterationRecord,
    MismatchEntry,
    RevisionPlan,
    RunConfig,
    SyntaxFeedback,
    Trace,
    Verdict,
)
from .engine import CaseOutcome, run_case
from .harness import load_cases, pass_at_k, run_bench

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "CaseOutcome",
    "CaseSpec",
    "ErrorEntry",
    "Feedback",
    "FunctionalFeedback",
    "IterationRecord",
    "MismatchEntry",
    "RevisionPlan",
    "RunConfig",
    "SyntaxFeedback",
    "Trace",
    "Verdict",
    "load_cases",
    "pass_at_k",
    "run_bench",
    "run_case",
    "__version__",
]
