"""Provider-agnostic chat-completion client and the three agent roles.

The three roles (generator, reviewer, inspector) are plain prompt renderers
plus response parsers; all of them are pure functions.  Network access is
confined to :func:`complete`, which talks to an OpenAI-style chat-completion
endpoint with retry/backoff and a shared per-provider rate limiter.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import requests

from .catalog import CatalogEntry, guidance_for
from .domain import (
    Candidate,
    CaseSpec,
    ErrorEntry,
    Feedback,
    FunctionalFeedback,
    IterationRecord,
    PlanItem,
    RevisionPlan,
    Sampling,
    SyntaxFeedback,
    Trace,
    feedback_signatures,
)

_ROLES = ("system", "user", "assistant")


class ProviderError(Exception):
    """Chat-completion failure after retries; carries status and body head."""

    def __init__(self, message: str, status: int | None = None, body: str | None = None):
        super().__init__(message)
        self.status = status
        self.body = (body or "")[:500]


class MalformedResponse(Exception):
    """The model's text did not contain the structure the parser needs."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"unknown chat role {self.role!r}")
        if not self.content:
            raise ValueError("ChatMessage.content must be nonempty")


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str
    model_id: str
    api_key_env: str = "PROVIDER_API_KEY"
    request_timeout_s: float = 120.0
    max_retries: int = 3
    sampling: Sampling | None = None
    rate_limit_per_s: float | None = None

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if not re.match(r"^https?://\S+$", self.endpoint):
            raise ValueError(f"endpoint is not a well-formed URL: {self.endpoint!r}")
        if self.request_timeout_s <= 0:
            raise ValueError("request_timeout_s must be > 0")


@dataclass(frozen=True)
class LoopVerdict:
    is_loop: bool
    matched_prior_iteration: int | None
    cause_summary: str

    def __post_init__(self) -> None:
        if self.is_loop != (self.matched_prior_iteration is not None):
            raise ValueError("matched_prior_iteration present exactly when is_loop")


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------


class _Pacer:
    """Shared pacing gate: at most ``rate`` request starts per second."""

    def __init__(self, rate: float):
        self._interval = 1.0 / rate
        self._next_free = 0.0
        self._lock = threading.Lock()

    def acquire(self, sleep: Callable[[float], None], now: Callable[[], float]) -> None:
        with self._lock:
            t = now()
            wait = max(0.0, self._next_free - t)
            self._next_free = max(t, self._next_free) + self._interval
        if wait > 0:
            sleep(wait)


_PACERS: dict[tuple[str, str, float], _Pacer] = {}
_PACERS_LOCK = threading.Lock()


def _pacer_for(cfg: ProviderConfig) -> _Pacer | None:
    if cfg.rate_limit_per_s is None:
        return None
    key = (cfg.endpoint, cfg.model_id, cfg.rate_limit_per_s)
    with _PACERS_LOCK:
        if key not in _PACERS:
            _PACERS[key] = _Pacer(cfg.rate_limit_per_s)
        return _PACERS[key]


_BACKOFF_BASE_S = 0.5
_BACKOFF_CAP_S = 8.0
_RETRYABLE_STATUSES = frozenset({408, 429, 500, 502, 503, 504})
_AUTH_STATUSES = frozenset({401, 403})


def _request_body(messages: Sequence[ChatMessage], cfg: ProviderConfig) -> dict[str, Any]:
    body: dict[str, Any] = {
        "model": cfg.model_id,
        "messages": [{"role": m.role, "content": m.content} for m in messages],
    }
    if cfg.sampling is not None:
        body["temperature"] = cfg.sampling.temperature
        body["top_p"] = cfg.sampling.top_p
    return body


def _extract_text(payload: Any) -> str:
    try:
        text = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ProviderError(
            "response body lacks choices[0].message.content",
            body=json.dumps(payload)[:500] if payload is not None else None,
        ) from None
    if not isinstance(text, str) or not text:
        raise ProviderError("provider returned empty completion text")
    return text


def complete(
    messages: Sequence[ChatMessage],
    cfg: ProviderConfig,
    *,
    session: requests.Session | None = None,
    sleep: Callable[[float], None] = time.sleep,
    now: Callable[[], float] = time.monotonic,
) -> str:
    """Run one chat completion, retrying transient failures with backoff.

    Authentication failures are never retried.  Raises :class:`ProviderError`
    once ``1 + max_retries`` transport attempts are exhausted.
    """
    if not messages or messages[0].role != "system":
        raise ValueError("messages must start with a system message")
    if sum(1 for m in messages if m.role == "system") != 1:
        raise ValueError("messages must contain exactly one system message")

    api_key = os.environ.get(cfg.api_key_env)
    if not api_key:
        raise ProviderError(f"API key environment variable {cfg.api_key_env} is not set")

    http = session if session is not None else requests.Session()
    headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
    body = _request_body(messages, cfg)
    pacer = _pacer_for(cfg)

    last_error: ProviderError | None = None
    for attempt in range(1 + cfg.max_retries):
        if attempt > 0:
            sleep(min(_BACKOFF_CAP_S, _BACKOFF_BASE_S * 2 ** (attempt - 1)))
        if pacer is not None:
            pacer.acquire(sleep, now)
        try:
            response = http.post(
                cfg.endpoint, json=body, headers=headers, timeout=cfg.request_timeout_s
            )
        except requests.RequestException as exc:
            last_error = ProviderError(f"transport failure: {exc}")
            continue
        status = response.status_code
        if status in _AUTH_STATUSES:
            raise ProviderError(
                f"authentication rejected (HTTP {status})", status=status, body=response.text
            )
        if status in _RETRYABLE_STATUSES:
            last_error = ProviderError(
                f"retryable provider failure (HTTP {status})", status=status, body=response.text
            )
            continue
        if status != 200:
            raise ProviderError(
                f"provider rejected request (HTTP {status})", status=status, body=response.text
            )
        try:
            payload = response.json()
        except ValueError:
            raise ProviderError("provider returned non-JSON body", status=status,
                                body=response.text) from None
        return _extract_text(payload)

    assert last_error is not None
    raise ProviderError(
        f"gave up after {1 + cfg.max_retries} attempts: {last_error}",
        status=last_error.status,
        body=last_error.body,
    )


# ---------------------------------------------------------------------------
# Prompt rendering (pure)
# ---------------------------------------------------------------------------

REVIEWER_WINDOW = 4
CONTEXT_BUDGET_CHARS = 24_000

_TRUNCATION_MARK = "\n…[truncated]…\n"


@lru_cache(maxsize=None)
def _template(name: str) -> str:
    return resources.files("chiselsmith").joinpath(f"prompts/{name}.md").read_text("utf-8")


def _fence(src: str, lang: str = "scala") -> str:
    return f"```{lang}\n{src}\n```"


def _shrink_middle(text: str, budget: int) -> str:
    if len(text) <= budget:
        return text
    keep = max(0, budget - len(_TRUNCATION_MARK))
    head, tail = keep * 2 // 3, keep - keep * 2 // 3
    return text[:head] + _TRUNCATION_MARK + text[len(text) - tail :]


def render_error_list(feedback: Feedback) -> str:
    """Human/LLM-readable rendering of a feedback's error list."""
    if isinstance(feedback, SyntaxFeedback):
        lines = []
        for i, e in enumerate(feedback.entries, 1):
            loc = (
                f"{e.location.file}:{e.location.line}"
                + (f":{e.location.column}" if e.location.column is not None else "")
                if e.location is not None
                else "unknown location"
            )
            lines.append(f"{i}. [{e.kind.value}] {loc}: {e.message}")
            if e.suggestion:
                lines.append(f"   suggestion: {e.suggestion}")
        return "\n".join(lines)
    lines = [
        f"{feedback.failed_count} of {feedback.total_count} functional points failed."
    ]
    for m in feedback.mismatches:
        when = f" at t={m.time:g}" if m.time is not None else ""
        lines.append(
            f"- testpoint {m.testpoint_id}{when}: inputs {m.stimulus}; "
            f"expected {m.expected}; got {m.actual}"
        )
    return "\n".join(lines)


def render_generator_prompt(
    spec: CaseSpec,
    plan: RevisionPlan | None = None,
    prior: Candidate | None = None,
) -> list[ChatMessage]:
    """Initial (zero-shot) or revision prompt for the generator role."""
    if (plan is None) != (prior is None):
        raise ValueError("plan and prior must be given together or not at all")
    parts = [
        "# Module specification",
        f"Top-level module name: {spec.module_name}",
        "",
        spec.spec_text,
    ]
    if plan is not None and prior is not None:
        parts += ["", "# Previous attempt", _fence(prior.chisel_src), "", "# Revision plan"]
        for i, item in enumerate(plan.items, 1):
            parts += [
                f"ITEM {i}",
                f"LOCATION: {item.location}",
                f"CAUSE: {item.cause_analysis}",
                f"SOLUTION: {item.solution}",
                "",
            ]
        parts.append(
            "Apply the revision plan to the previous attempt and output the "
            "complete corrected module."
        )
    return [
        ChatMessage("system", _template("generator")),
        ChatMessage("user", "\n".join(parts)),
    ]


FORMAT_REMINDER = ChatMessage(
    "user",
    "Format reminder: your reply must contain exactly one fenced code block "
    "(``` ... ```) with the complete Scala source of the module, and nothing "
    "else inside the block.",
)


def _iteration_summary(record: IterationRecord) -> str:
    n_errors = (
        len(record.feedback.entries)
        if isinstance(record.feedback, SyntaxFeedback)
        else record.feedback.failed_count
        if isinstance(record.feedback, FunctionalFeedback)
        else 0
    )
    return (
        f"iteration {record.candidate.iteration}: {record.verdict.value}, "
        f"{n_errors} error(s)"
    )


def _iteration_detail(record: IterationRecord) -> str:
    parts = [f"### Iteration {record.candidate.iteration} ({record.verdict.value})"]
    if record.feedback is not None:
        parts.append(render_error_list(record.feedback))
    if record.plan is not None:
        parts.append("Plan tried:")
        for item in record.plan.items:
            parts.append(f"- {item.solution}")
    return "\n".join(parts)


def render_reviewer_prompt(
    trace: Trace,
    feedback: Feedback,
    catalog_hits: Sequence[CatalogEntry],
    *,
    window: int = REVIEWER_WINDOW,
    max_chars: int = CONTEXT_BUDGET_CHARS,
) -> list[ChatMessage]:
    """Prompt asking for a revision plan covering every observed error.

    The most recent ``window`` prior iterations get full detail; anything
    older is compressed to one line.  The whole user message is clamped to
    ``max_chars`` by dropping old history first, then truncating the source.
    """
    if not trace.records:
        raise ValueError("reviewer needs a trace with at least one record")
    latest = trace.records[-1]

    error_block = ["# Errors observed", render_error_list(feedback)]

    guidance_block: list[str] = []
    if catalog_hits:
        guidance_block.append("# Known error patterns")
        for hit in catalog_hits:
            guidance_block += [
                f"## {hit.class_id}: {hit.description}",
                f"Cause: {hit.cause}",
                f"Fix: {hit.fix_guidance}",
                "Incorrect:",
                _fence(hit.incorrect_snippet),
                "Corrected:",
                _fence(hit.corrected_snippet),
            ]

    escape_block: list[str] = []
    if trace.erasures:
        last = trace.erasures[-1]
        cause = last.cause_summary or "the same error recurring with no progress"
        escape_block.append(
            f"Note: iterations {last.span_start + 1}..{last.span_end} were "
            f"abandoned as a non-progress loop ({cause}). Propose a different "
            "strategy than the abandoned one."
        )

    prior = [r for r in trace.records[:-1]]
    detailed = list(reversed(prior[-window:] if window > 0 else []))
    older = list(reversed(prior[: max(0, len(prior) - window)]))

    request_block = [
        "# Task",
        "Produce a revision plan with one ITEM per error "
        "(LOCATION / CAUSE / SOLUTION).",
    ]

    def assemble(n_detail: int, n_older: int, src_budget: int | None) -> str:
        src = latest.candidate.chisel_src
        if src_budget is not None:
            src = _shrink_middle(src, src_budget)
        parts = ["# Latest Chisel source", _fence(src), ""]
        parts += error_block
        parts += guidance_block
        parts += escape_block
        hist = detailed[:n_detail]
        one_liners = detailed[n_detail:] + older[: max(0, n_older)]
        if hist or one_liners:
            parts.append("# Earlier iterations (most recent first)")
            parts += [_iteration_detail(r) for r in hist]
            parts += [f"- {_iteration_summary(r)}" for r in one_liners]
        parts += request_block
        return "\n".join(parts)

    # Degrade deterministically until the budget holds.
    attempts = [
        (len(detailed), len(older), None),
        (len(detailed), 0, None),
        (1, 0, None),
        (0, 0, None),
        (0, 0, max_chars // 2),
    ]
    text = assemble(*attempts[0])
    for n_detail, n_older, src_budget in attempts[1:]:
        if len(text) <= max_chars:
            break
        text = assemble(n_detail, n_older, src_budget)
    return [ChatMessage("system", _template("reviewer")), ChatMessage("user", text)]


def render_inspector_prompt(trace: Trace, feedback: Feedback) -> list[ChatMessage]:
    """Comparison prompt for loop detection.

    Lists, for every prior record sharing a location signature with the
    current feedback, that record's error list next to the current one.
    """
    if not trace.records:
        raise ValueError("inspector needs a trace with at least one record")
    current_sigs = feedback_signatures(feedback)
    pairs = [
        r
        for r in trace.records[:-1]
        if r.feedback is not None and feedback_signatures(r.feedback) & current_sigs
    ]
    parts = [
        "# Current errors "
        f"(iteration {trace.records[-1].candidate.iteration})",
        render_error_list(feedback),
        "",
        f"# Earlier iterations with errors at the same location: {len(pairs)}",
    ]
    for record in reversed(pairs):
        parts += [
            f"## Iteration {record.candidate.iteration}",
            render_error_list(record.feedback),  # type: ignore[arg-type]
        ]
    return [ChatMessage("system", _template("inspector")), ChatMessage("user", "\n".join(parts))]


# ---------------------------------------------------------------------------
# Response parsing (pure)
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


def parse_code_response(text: str) -> str:
    """Extract the last fenced code block; fences and their newline removed."""
    blocks = _FENCE_RE.findall(text or "")
    if not blocks:
        raise MalformedResponse("response contains no fenced code block")
    body = blocks[-1]
    if body.endswith("\n"):
        body = body[:-1]
    if not body:
        raise MalformedResponse("fenced code block is empty")
    return body


_PLAN_LABEL_RE = re.compile(r"(?im)^[ \t]*(LOCATION|CAUSE|SOLUTION)[ \t]*:[ \t]*")
_ITEM_SPLIT_RE = re.compile(r"(?im)^[ \t]*ITEM\b[^\n]*$")


def _parse_labeled_fields(block: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    matches = list(_PLAN_LABEL_RE.finditer(block))
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(block)
        label = m.group(1).upper()
        if label not in fields:  # first occurrence wins
            fields[label] = block[m.end() : end].strip()
    return fields


def parse_revision_plan(text: str) -> RevisionPlan:
    """Parse ITEM/LOCATION/CAUSE/SOLUTION blocks, tolerating surrounding prose."""
    blocks = _ITEM_SPLIT_RE.split(text or "")
    items: list[PlanItem] = []
    for block in blocks[1:] if len(blocks) > 1 else blocks:
        fields = _parse_labeled_fields(block)
        if fields.get("CAUSE") and fields.get("SOLUTION"):
            items.append(
                PlanItem(
                    location=fields.get("LOCATION", ""),
                    cause_analysis=fields["CAUSE"],
                    solution=fields["SOLUTION"],
                )
            )
    if not items:
        raise MalformedResponse("no revision-plan items could be parsed")
    return RevisionPlan(items=tuple(items), raw_response=text)


_IS_LOOP_RE = re.compile(r"(?i)\bIS_LOOP\s*[:=]\s*(yes|no|true|false)\b")
_MATCHED_RE = re.compile(r"(?i)\bMATCHED(?:_ITERATION)?\s*[:=]\s*(\d+)")
_CAUSE_RE = re.compile(r"(?im)^\s*CAUSE\s*[:=]\s*(.+)$")


def parse_inspector_verdict(text: str) -> LoopVerdict:
    """Parse the loop verdict; any ambiguity resolves to "not a loop"."""
    m = _IS_LOOP_RE.search(text or "")
    cause_m = _CAUSE_RE.search(text or "")
    cause = cause_m.group(1).strip() if cause_m else ""
    if m and m.group(1).lower() in ("yes", "true"):
        matched = _MATCHED_RE.search(text)
        if matched:
            return LoopVerdict(True, int(matched.group(1)), cause)
    return LoopVerdict(False, None, cause)


# ---------------------------------------------------------------------------
# Gateway object: role calls against one provider
# ---------------------------------------------------------------------------

# A provider is any callable (messages, role) -> assistant text; the role tag
# exists so scripted providers can route playlists.
Provider = Callable[[Sequence[ChatMessage], str], str]


class HttpProvider:
    """Provider backed by :func:`complete` against a real endpoint.

    Safe for concurrent use: each worker thread gets its own session unless
    an explicit one is injected.
    """

    def __init__(
        self,
        cfg: ProviderConfig,
        *,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self._injected = session
        self._local = threading.local()
        self._sleep = sleep

    def _session(self) -> requests.Session:
        if self._injected is not None:
            return self._injected
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def __call__(self, messages: Sequence[ChatMessage], role: str) -> str:
        return complete(messages, self.cfg, session=self._session(), sleep=self._sleep)


class ScriptedProvider:
    """Hermetic provider that replays per-role response playlists.

    A playlist item is either the assistant text, or
    ``{"error": {"status": ..., "message": ...}}`` to script a failure.
    """

    def __init__(self, responses: Mapping[str, Sequence[Any]]):
        self._queues = {role: deque(items) for role, items in responses.items()}

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedProvider":
        data = json.loads(Path(path).read_text("utf-8"))
        roles = {k: v for k, v in data.items() if k in ("generator", "reviewer", "inspector")}
        if not roles:
            raise ValueError(f"playlist {path} defines no provider roles")
        return cls(roles)

    def __call__(self, messages: Sequence[ChatMessage], role: str) -> str:
        queue = self._queues.get(role)
        if not queue:
            raise ProviderError(f"scripted playlist exhausted for role {role!r}")
        item = queue.popleft()
        if isinstance(item, Mapping):
            err = item.get("error", {})
            raise ProviderError(
                err.get("message", "scripted provider failure"), status=err.get("status")
            )
        return str(item)


class LlmGateway:
    """Bundles a provider with the role renderers and counts calls per role."""

    def __init__(
        self,
        provider: Provider,
        *,
        catalog: tuple[CatalogEntry, ...] | None = None,
        reviewer_window: int = REVIEWER_WINDOW,
        context_budget_chars: int = CONTEXT_BUDGET_CHARS,
    ):
        self._provider = provider
        self._catalog = catalog
        self._window = reviewer_window
        self._budget = context_budget_chars
        self.call_counts = {"generator": 0, "reviewer": 0, "inspector": 0}

    def generate(
        self,
        spec: CaseSpec,
        plan: RevisionPlan | None = None,
        prior: Candidate | None = None,
        *,
        format_reminder: bool = False,
    ) -> str:
        messages = render_generator_prompt(spec, plan, prior)
        if format_reminder:
            messages = messages + [FORMAT_REMINDER]
        self.call_counts["generator"] += 1
        return self._provider(messages, "generator")

    def review(self, trace: Trace, feedback: Feedback) -> str:
        entries: Sequence[ErrorEntry] = (
            feedback.entries if isinstance(feedback, SyntaxFeedback) else ()
        )
        hits = guidance_for(entries, self._catalog) if entries else []
        messages = render_reviewer_prompt(
            trace, feedback, hits, window=self._window, max_chars=self._budget
        )
        self.call_counts["reviewer"] += 1
        return self._provider(messages, "reviewer")

    def inspect(self, trace: Trace, feedback: Feedback) -> str:
        messages = render_inspector_prompt(trace, feedback)
        self.call_counts["inspector"] += 1
        return self._provider(messages, "inspector")
