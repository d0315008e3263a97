from __future__ import annotations

import dataclasses

import pytest
import requests
from hypothesis import given, settings
from hypothesis import strategies as st

from chiselsmith.catalog import default_catalog
from chiselsmith.domain import (
    Candidate,
    ErrorEntry,
    ErrorKind,
    FunctionalFeedback,
    IterationRecord,
    MismatchEntry,
    PlanItem,
    Provenance,
    RevisionPlan,
    SyntaxFeedback,
    Trace,
    Verdict,
    append_record,
)
from chiselsmith.gateway import (
    ChatMessage,
    LoopVerdict,
    MalformedResponse,
    ProviderConfig,
    ProviderError,
    ScriptedProvider,
    complete,
    parse_code_response,
    parse_inspector_verdict,
    parse_revision_plan,
    render_generator_prompt,
    render_inspector_prompt,
    render_reviewer_prompt,
)

from conftest import make_case


class FakeResponse:
    def __init__(self, status_code: int, payload=None, text: str = ""):
        self.status_code = status_code
        self._payload = payload
        self.text = text or (str(payload) if payload is not None else "")

    def json(self):
        if self._payload is None:
            raise ValueError("no json")
        return self._payload


class FakeSession:
    """Scripted transport: each item is a FakeResponse or an exception."""

    def __init__(self, script):
        self.script = list(script)
        self.posts = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.posts.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def ok_response(text: str = "hello") -> FakeResponse:
    return FakeResponse(200, {"choices": [{"message": {"content": text}}]})


def cfg(**overrides) -> ProviderConfig:
    fields = dict(
        endpoint="https://api.example.test/v1/chat/completions",
        model_id="test-model",
        api_key_env="TEST_PROVIDER_KEY",
        max_retries=3,
    )
    fields.update(overrides)
    return ProviderConfig(**fields)


MESSAGES = [ChatMessage("system", "be helpful"), ChatMessage("user", "hi")]


@pytest.fixture(autouse=True)
def _api_key(monkeypatch):
    monkeypatch.setenv("TEST_PROVIDER_KEY", "sk-test")


class TestComplete:
    def test_returns_text_verbatim(self):
        session = FakeSession([ok_response("exact text\nwith lines")])
        assert complete(MESSAGES, cfg(), session=session, sleep=lambda s: None) == (
            "exact text\nwith lines"
        )

    def test_two_failures_then_success_takes_three_attempts(self):
        session = FakeSession(
            [FakeResponse(503), requests.ConnectionError("boom"), ok_response("ok")]
        )
        sleeps = []
        out = complete(MESSAGES, cfg(max_retries=3), session=session, sleep=sleeps.append)
        assert out == "ok"
        assert len(session.posts) == 3
        assert sleeps == [0.5, 1.0]  # exponential backoff between attempts

    def test_retry_cap_exhausted(self):
        session = FakeSession([FakeResponse(429, text="slow down")] * 4)
        with pytest.raises(ProviderError) as err:
            complete(MESSAGES, cfg(max_retries=3), session=session, sleep=lambda s: None)
        assert len(session.posts) == 4  # 1 + max_retries, never more
        assert err.value.status == 429

    def test_auth_failure_never_retried(self):
        session = FakeSession([FakeResponse(401, text="bad key")] * 3)
        with pytest.raises(ProviderError) as err:
            complete(MESSAGES, cfg(), session=session, sleep=lambda s: None)
        assert len(session.posts) == 1
        assert err.value.status == 401

    def test_non_retryable_4xx_raises_immediately(self):
        session = FakeSession([FakeResponse(422, text="bad request")])
        with pytest.raises(ProviderError):
            complete(MESSAGES, cfg(), session=session, sleep=lambda s: None)
        assert len(session.posts) == 1

    def test_requires_single_leading_system_message(self):
        with pytest.raises(ValueError):
            complete([ChatMessage("user", "hi")], cfg(), session=FakeSession([]))
        with pytest.raises(ValueError):
            complete(
                [ChatMessage("system", "a"), ChatMessage("system", "b")],
                cfg(),
                session=FakeSession([]),
            )

    def test_missing_api_key_names_variable(self, monkeypatch):
        monkeypatch.delenv("TEST_PROVIDER_KEY", raising=False)
        with pytest.raises(ProviderError, match="TEST_PROVIDER_KEY"):
            complete(MESSAGES, cfg(), session=FakeSession([]))

    def test_sampling_fields_sent_only_when_explicit(self):
        from chiselsmith.domain import Sampling

        session = FakeSession([ok_response()])
        complete(MESSAGES, cfg(), session=session, sleep=lambda s: None)
        assert "temperature" not in session.posts[0]["json"]

        session = FakeSession([ok_response()])
        complete(
            MESSAGES,
            cfg(sampling=Sampling(temperature=0.2, top_p=0.9)),
            session=session,
            sleep=lambda s: None,
        )
        assert session.posts[0]["json"]["temperature"] == 0.2
        assert session.posts[0]["json"]["top_p"] == 0.9


def syntax_feedback(message="Reference w not fully initialized.", catalog_class="B3"):
    return SyntaxFeedback(
        entries=(ErrorEntry(kind=ErrorKind.SYNTAX, message=message, catalog_class=catalog_class),),
        raw_log=message,
    )


def new_trace(n_failed: int) -> Trace:
    trace = Trace()
    for i in range(n_failed):
        provenance = Provenance.INITIAL if i == 0 else Provenance.REVISION
        candidate = Candidate(iteration=i, chisel_src=f"class X{i}", provenance=provenance)
        trace = append_record(
            trace,
            IterationRecord(candidate, syntax_feedback(), None, Verdict.SYNTAX_ERROR),
        )
    return trace


PLAN = RevisionPlan(
    items=(
        PlanItem(location="line 3", cause_analysis="w has no default", solution="WireDefault"),
        PlanItem(location="line 9", cause_analysis="wrong type", solution="use asUInt"),
    ),
    raw_response="raw",
)


class TestGeneratorPrompt:
    def test_initial_is_zero_shot(self):
        case = make_case()
        messages = render_generator_prompt(case)
        assert len(messages) == 2
        assert messages[0].role == "system"
        assert case.spec_text in messages[1].content
        assert case.module_name in messages[1].content

    def test_revision_includes_prior_and_plan_verbatim(self):
        case = make_case()
        prior = Candidate(iteration=0, chisel_src="class Adder8 extends Module { old }")
        messages = render_generator_prompt(case, PLAN, prior)
        user = messages[1].content
        assert "class Adder8 extends Module { old }" in user
        for item in PLAN.items:
            assert item.cause_analysis in user
            assert item.solution in user

    def test_plan_and_prior_must_pair(self):
        with pytest.raises(ValueError):
            render_generator_prompt(make_case(), PLAN, None)
        with pytest.raises(ValueError):
            render_generator_prompt(make_case(), None, Candidate(iteration=0, chisel_src="x"))

    def test_deterministic(self):
        case = make_case()
        prior = Candidate(iteration=0, chisel_src="class X")
        assert render_generator_prompt(case, PLAN, prior) == render_generator_prompt(
            case, PLAN, prior
        )


class TestReviewerPrompt:
    def test_catalog_guidance_included(self):
        trace = new_trace(1)
        hit = next(c for c in default_catalog() if c.class_id == "B3")
        messages = render_reviewer_prompt(trace, syntax_feedback(), [hit])
        assert hit.fix_guidance in messages[1].content

    def test_window_limits_detailed_history(self):
        trace = new_trace(8)
        messages = render_reviewer_prompt(trace, syntax_feedback(), [], window=4)
        detailed = messages[1].content.count("### Iteration")
        assert detailed == 4
        # older iterations still appear as one-liners
        assert "- iteration 0:" in messages[1].content

    def test_functional_mismatches_all_present(self):
        mismatches = tuple(
            MismatchEntry(testpoint_id=str(i), stimulus=f"a={i}", expected="1", actual="2")
            for i in range(3)
        )
        feedback = FunctionalFeedback(mismatches=mismatches, failed_count=3, total_count=10)
        messages = render_reviewer_prompt(new_trace(1), feedback, [])
        for m in mismatches:
            assert m.stimulus in messages[1].content
        assert "3 of 10" in messages[1].content

    def test_context_budget_enforced(self):
        trace = Trace()
        candidate = Candidate(iteration=0, chisel_src="x" * 100_000)
        trace = append_record(
            trace, IterationRecord(candidate, syntax_feedback(), None, Verdict.SYNTAX_ERROR)
        )
        messages = render_reviewer_prompt(trace, syntax_feedback(), [], max_chars=5_000)
        assert len(messages[1].content) <= 5_000

    def test_erasure_note_rendered(self):
        from chiselsmith.domain import Erasure

        trace = new_trace(1)
        erased = new_trace(2).records[1]
        trace = dataclasses.replace(
            trace,
            erasures=(
                Erasure(
                    span_start=0,
                    span_end=1,
                    cause_summary="kept adding a default arm inside switch",
                    erased_records=(erased,),
                ),
            ),
        )
        messages = render_reviewer_prompt(trace, syntax_feedback(), [])
        assert "kept adding a default arm inside switch" in messages[1].content

    def test_deterministic(self):
        trace = new_trace(3)
        a = render_reviewer_prompt(trace, syntax_feedback(), [])
        b = render_reviewer_prompt(trace, syntax_feedback(), [])
        assert a == b


class TestInspectorPrompt:
    def test_zero_pairs_rendered_when_disjoint(self):
        trace = new_trace(1)
        other = SyntaxFeedback(
            entries=(ErrorEntry(kind=ErrorKind.SYNTAX, message="No implicit clock."),)
        )
        trace = append_record(
            trace,
            IterationRecord(
                Candidate(iteration=1, chisel_src="y", provenance=Provenance.REVISION),
                other,
                None,
                Verdict.SYNTAX_ERROR,
            ),
        )
        messages = render_inspector_prompt(trace, other)
        assert "same location: 0" in messages[1].content

    def test_one_matching_pair(self):
        trace = new_trace(2)
        messages = render_inspector_prompt(trace, syntax_feedback())
        assert "same location: 1" in messages[1].content
        assert "## Iteration 0" in messages[1].content

    def test_deterministic(self):
        trace = new_trace(2)
        assert render_inspector_prompt(trace, syntax_feedback()) == render_inspector_prompt(
            trace, syntax_feedback()
        )


class TestParseCodeResponse:
    def test_single_block(self):
        assert parse_code_response("text\n```scala\nval x = 1\n```\nmore") == "val x = 1"

    def test_last_of_two_blocks(self):
        text = "```\nfirst\n```\nthen\n```scala\nsecond\n```"
        assert parse_code_response(text) == "second"

    def test_no_block_raises(self):
        with pytest.raises(MalformedResponse):
            parse_code_response("no code here")

    @settings(max_examples=100, deadline=None)
    @given(st.text(min_size=1, max_size=200).filter(lambda s: "```" not in s))
    def test_unwrap_of_wrap_is_identity(self, src):
        assert parse_code_response(f"```\n{src}\n```") == src


class TestParseRevisionPlan:
    def test_two_items(self):
        text = (
            "Here is my analysis.\n"
            "ITEM 1\nLOCATION: line 3\nCAUSE: missing default\nSOLUTION: add WireDefault\n"
            "ITEM 2\nLOCATION: line 7\nCAUSE: bool arithmetic\nSOLUTION: map to UInt first\n"
        )
        plan = parse_revision_plan(text)
        assert len(plan.items) == 2
        assert plan.raw_response == text

    def test_fields_preserved_verbatim(self):
        text = "ITEM 1\nLOCATION: exactly HERE\nCAUSE: Because X > Y.\nSOLUTION: Swap a & b.\n"
        (item,) = parse_revision_plan(text).items
        assert item.location == "exactly HERE"
        assert item.cause_analysis == "Because X > Y."
        assert item.solution == "Swap a & b."

    def test_multiline_fields(self):
        text = "ITEM 1\nLOCATION: l\nCAUSE: first line\nsecond line\nSOLUTION: fix\n"
        (item,) = parse_revision_plan(text).items
        assert item.cause_analysis == "first line\nsecond line"

    def test_prose_only_is_malformed(self):
        with pytest.raises(MalformedResponse):
            parse_revision_plan("I think the code looks mostly fine, honestly.")

    def test_tolerates_missing_item_headers(self):
        text = "LOCATION: here\nCAUSE: reason\nSOLUTION: change\n"
        assert len(parse_revision_plan(text).items) == 1


class TestParseInspectorVerdict:
    def test_affirmative(self):
        verdict = parse_inspector_verdict("is_loop: yes, matched: 2\nCAUSE: same w init issue")
        assert verdict == LoopVerdict(True, 2, "same w init issue")

    def test_negative(self):
        verdict = parse_inspector_verdict("IS_LOOP: no\nMATCHED_ITERATION: none")
        assert verdict.is_loop is False
        assert verdict.matched_prior_iteration is None

    def test_garbled_defaults_to_no_loop(self):
        assert parse_inspector_verdict("¯\\_(ツ)_/¯").is_loop is False

    def test_yes_without_iteration_is_conservative(self):
        assert parse_inspector_verdict("IS_LOOP: yes").is_loop is False


class TestHttpProvider:
    def test_uses_injected_session_and_ignores_role(self):
        from chiselsmith.gateway import HttpProvider

        session = FakeSession([ok_response("from http"), ok_response("again")])
        provider = HttpProvider(cfg(), session=session, sleep=lambda s: None)
        assert provider(MESSAGES, "generator") == "from http"
        assert provider(MESSAGES, "inspector") == "again"
        assert len(session.posts) == 2


class TestScriptedProvider:
    def test_routes_by_role(self):
        provider = ScriptedProvider({"generator": ["g1", "g2"], "reviewer": ["r1"]})
        assert provider([], "generator") == "g1"
        assert provider([], "reviewer") == "r1"
        assert provider([], "generator") == "g2"

    def test_scripted_error(self):
        provider = ScriptedProvider({"generator": [{"error": {"status": 500}}]})
        with pytest.raises(ProviderError) as err:
            provider([], "generator")
        assert err.value.status == 500

    def test_exhaustion_is_provider_error(self):
        provider = ScriptedProvider({"generator": ["only"]})
        provider([], "generator")
        with pytest.raises(ProviderError, match="exhausted"):
            provider([], "generator")
