from __future__ import annotations

import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chiselsmith.domain import (
    Candidate,
    CaseSpec,
    Erasure,
    ErrorEntry,
    ErrorKind,
    FunctionalFeedback,
    IterationRecord,
    MismatchEntry,
    PlanItem,
    Provenance,
    RevisionPlan,
    RunConfig,
    Sampling,
    SourceLocation,
    SyntaxFeedback,
    Trace,
    Verdict,
    append_record,
    classify_verdict,
    dumps,
    feedback_signatures,
    loads,
    location_signature,
)


def entry(message: str, line: int = 14, catalog_class: str | None = None) -> ErrorEntry:
    return ErrorEntry(
        kind=ErrorKind.SYNTAX,
        message=message,
        location=SourceLocation(file="Mod.scala", line=line, column=3),
        catalog_class=catalog_class,
    )


def record(iteration: int, verdict: Verdict = Verdict.SYNTAX_ERROR) -> IterationRecord:
    provenance = Provenance.INITIAL if iteration == 0 else Provenance.REVISION
    candidate = Candidate(iteration=iteration, chisel_src="class X", provenance=provenance)
    if verdict is Verdict.SUCCESS:
        return IterationRecord(candidate, None, None, verdict)
    feedback = SyntaxFeedback(entries=(entry("Reference w not fully initialized."),))
    return IterationRecord(candidate, feedback, None, verdict)


class TestClassifyVerdict:
    def test_both_ok(self):
        assert classify_verdict(True, True) is Verdict.SUCCESS

    def test_compile_failed(self):
        assert classify_verdict(False, None) is Verdict.SYNTAX_ERROR

    def test_sim_failed(self):
        assert classify_verdict(True, False) is Verdict.FUNCTIONAL_ERROR

    def test_rejects_sim_result_after_compile_failure(self):
        with pytest.raises(ValueError):
            classify_verdict(False, True)
        with pytest.raises(ValueError):
            classify_verdict(False, False)

    def test_rejects_missing_sim_result_after_compile_ok(self):
        with pytest.raises(ValueError):
            classify_verdict(True, None)


class TestLocationSignature:
    def test_invariant_under_line_renumbering(self):
        a = entry("Reference w not fully initialized.", line=14, catalog_class="B3")
        b = entry("Reference w not fully initialized.", line=17, catalog_class="B3")
        assert a.location_signature == b.location_signature

    def test_different_identifiers_differ(self):
        a = entry("Value sgnal is not a member.")
        b = entry("Value foo is not a member.")
        assert a.location_signature != b.location_signature

    def test_different_catalog_classes_differ(self):
        a = entry("Value sgnal is not a member. Did you mean signal?", catalog_class="A1")
        b = entry("Reference w not fully initialized.", catalog_class="B3")
        assert a.location_signature != b.location_signature

    def test_numerals_stripped_from_head(self):
        a = entry("-1 is out of bounds. (min 0, max 3)")
        b = entry("-7 is out of bounds. (min 0, max 15)")
        assert a.location_signature == b.location_signature

    def test_deterministic(self):
        e = entry("No implicit clock.", catalog_class="C1")
        assert location_signature(e) == location_signature(e) == e.location_signature


class TestAppendRecord:
    def test_append_to_empty(self):
        trace = append_record(Trace(), record(0))
        assert len(trace.records) == 1

    def test_append_preserves_prefix(self):
        trace = Trace()
        for i in range(3):
            trace = append_record(trace, record(i))
        before = trace.records
        longer = append_record(trace, record(3))
        assert len(longer.records) == 4
        assert longer.records[:3] == before
        assert len(trace.records) == 3  # original untouched

    def test_gap_rejected(self):
        trace = Trace()
        for i in range(3):
            trace = append_record(trace, record(i))
        with pytest.raises(ValueError):
            append_record(trace, record(5))

    def test_duplicate_index_rejected(self):
        trace = append_record(Trace(), record(0))
        with pytest.raises(ValueError):
            append_record(trace, dataclasses.replace(record(1), candidate=record(0).candidate))


class TestInvariants:
    def test_candidate_iteration_zero_must_be_initial(self):
        with pytest.raises(ValueError):
            Candidate(iteration=0, chisel_src="x", provenance=Provenance.REVISION)
        with pytest.raises(ValueError):
            Candidate(iteration=2, chisel_src="x", provenance=Provenance.INITIAL)

    def test_syntax_feedback_needs_entries(self):
        with pytest.raises(ValueError):
            SyntaxFeedback(entries=())

    def test_functional_feedback_count_bounds(self):
        m = MismatchEntry(testpoint_id="1", stimulus="a=1", expected="2", actual="3")
        with pytest.raises(ValueError):
            FunctionalFeedback(mismatches=(m,), failed_count=0, total_count=4)
        with pytest.raises(ValueError):
            FunctionalFeedback(mismatches=(m,), failed_count=5, total_count=4)

    def test_mismatch_requires_difference(self):
        with pytest.raises(ValueError):
            MismatchEntry(testpoint_id="1", stimulus="a=1", expected="2", actual="2")

    def test_record_success_iff_no_feedback(self):
        candidate = Candidate(iteration=0, chisel_src="x")
        with pytest.raises(ValueError):
            IterationRecord(candidate, None, None, Verdict.SYNTAX_ERROR)
        feedback = SyntaxFeedback(entries=(entry("boom"),))
        with pytest.raises(ValueError):
            IterationRecord(candidate, feedback, None, Verdict.SUCCESS)

    def test_run_config_k_bounds(self):
        with pytest.raises(ValueError):
            RunConfig(trials=3, k_values=(5,))
        with pytest.raises(ValueError):
            RunConfig(trials=3, k_values=(0,))

    def test_run_config_timeouts_positive(self):
        with pytest.raises(ValueError):
            RunConfig(compile_timeout_s=0)

    def test_case_spec_needs_testbench(self):
        with pytest.raises(ValueError):
            CaseSpec(case_id="x", spec_text="s", testbench_src="", module_name="X")

    def test_plan_item_needs_cause_and_solution(self):
        with pytest.raises(ValueError):
            PlanItem(location="l", cause_analysis="", solution="s")
        with pytest.raises(ValueError):
            RevisionPlan(items=())


class TestFeedbackSignatures:
    def test_syntax_signatures_from_entries(self):
        fb = SyntaxFeedback(entries=(entry("Reference w not fully initialized."),))
        assert fb.entries[0].location_signature in feedback_signatures(fb)

    def test_functional_signatures_from_testpoints(self):
        fb = FunctionalFeedback(
            mismatches=(
                MismatchEntry(testpoint_id="7", stimulus="a=1", expected="2", actual="3"),
            ),
            failed_count=1,
            total_count=8,
        )
        assert feedback_signatures(fb) == frozenset({"functional:7"})


# -- Serialization round-trips ----------------------------------------------

_texts = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=40
)


@st.composite
def error_entries(draw):
    return ErrorEntry(
        kind=draw(st.sampled_from(list(ErrorKind))),
        message=draw(_texts),
        location=draw(
            st.one_of(
                st.none(),
                st.builds(
                    SourceLocation,
                    file=st.just("Mod.scala"),
                    line=st.integers(1, 500),
                    column=st.one_of(st.none(), st.integers(1, 200)),
                ),
            )
        ),
        suggestion=draw(st.one_of(st.none(), _texts)),
        catalog_class=draw(st.one_of(st.none(), st.sampled_from(["A1", "B3", "C2"]))),
    )


@st.composite
def feedbacks(draw):
    if draw(st.booleans()):
        return SyntaxFeedback(
            entries=tuple(draw(st.lists(error_entries(), min_size=1, max_size=3))),
            raw_log=draw(st.text(max_size=60)),
        )
    mismatches = tuple(
        MismatchEntry(
            testpoint_id=str(i),
            stimulus=draw(_texts),
            expected="want-" + draw(_texts),
            actual="got-" + draw(_texts),
            time=draw(st.one_of(st.none(), st.floats(0, 1e6, allow_nan=False))),
        )
        for i in range(draw(st.integers(1, 3)))
    )
    total = draw(st.integers(len(mismatches), 50))
    return FunctionalFeedback(
        mismatches=mismatches,
        failed_count=len(mismatches),
        total_count=total,
        raw_log=draw(st.text(max_size=60)),
    )


@st.composite
def traces(draw):
    n = draw(st.integers(0, 4))
    records = []
    for i in range(n):
        last = i == n - 1
        success = last and draw(st.booleans())
        candidate = Candidate(
            iteration=i,
            chisel_src=draw(_texts),
            verilog_src=draw(st.one_of(st.none(), _texts)) if success else None,
            provenance=Provenance.INITIAL if i == 0 else Provenance.REVISION,
        )
        if success:
            records.append(IterationRecord(candidate, None, None, Verdict.SUCCESS))
        else:
            plan = None
            if draw(st.booleans()):
                plan = RevisionPlan(
                    items=(PlanItem(location=draw(_texts), cause_analysis=draw(_texts),
                                    solution=draw(_texts)),),
                    raw_response=draw(st.text(max_size=60)),
                )
            records.append(
                IterationRecord(
                    candidate,
                    draw(feedbacks()),
                    plan,
                    draw(st.sampled_from([Verdict.SYNTAX_ERROR, Verdict.FUNCTIONAL_ERROR])),
                )
            )
    erasures = ()
    if records and draw(st.booleans()):
        erasures = (
            Erasure(
                span_start=0,
                span_end=1,
                cause_summary=draw(st.text(max_size=40)),
                erased_records=(record(1),),
            ),
        )
    return Trace(records=tuple(records), erasures=erasures)


class TestSerialization:
    @settings(max_examples=60, deadline=None)
    @given(traces())
    def test_trace_round_trip_identity(self, trace):
        assert loads(dumps(trace)) == trace

    @settings(max_examples=60, deadline=None)
    @given(feedbacks())
    def test_feedback_round_trip_identity(self, feedback):
        assert loads(dumps(feedback)) == feedback

    def test_case_spec_round_trip(self):
        case = CaseSpec(
            case_id="c1",
            spec_text="spec",
            testbench_src="tb",
            reference_src="ref",
            module_name="M",
            origin="suite-a",
            excluded="needs-parameterization",
            seed=7,
        )
        assert loads(dumps(case)) == case

    def test_run_config_round_trip(self):
        cfg = RunConfig(
            max_iterations=5,
            trials=10,
            k_values=(1, 5, 10),
            model_id="m",
            sampling=Sampling(temperature=0.7, top_p=0.9),
            parallelism=4,
            escape_enabled=False,
        )
        assert loads(dumps(cfg)) == cfg
        assert loads(dumps(RunConfig())) == RunConfig()

    def test_serialized_field_names(self):
        import json

        data = json.loads(dumps(record(0)))
        assert set(data) == {"record", "candidate", "feedback", "plan", "verdict"}
        assert set(data["candidate"]) == {
            "record",
            "iteration",
            "chisel_src",
            "verilog_src",
            "provenance",
        }
        fb = data["feedback"]
        assert fb["variant"] == "Syntax"
        assert set(fb["entries"][0]) == {
            "record",
            "kind",
            "location",
            "message",
            "suggestion",
            "catalog_class",
            "location_signature",
        }

    def test_canonical_line_is_stable(self):
        trace = Trace(records=(record(0), record(1)))
        assert dumps(trace) == dumps(loads(dumps(trace)))
        assert "\n" not in dumps(trace)
