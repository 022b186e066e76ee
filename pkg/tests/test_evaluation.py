from __future__ import annotations

import json
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoarchive.archive import AgentNode, DomainScores
from evoarchive.evaluation import (
    CommandEvaluator,
    DomainSpec,
    EvaluatorError,
    Gate,
    StagedEvalPolicy,
    SyntheticEvaluator,
    evaluate_full,
    multi_domain_evaluate,
    node_selection_score,
    selection_score,
    staged_evaluate,
)
from evoarchive.generation import SimulatedAgentGenome
from evoarchive.sandbox import SandboxLimits

LIMITS = SandboxLimits(wall_clock_seconds=10.0, cpu_seconds=10, max_output_bytes=100_000)


def make_domain(
    name: str = "d",
    n_tasks: int = 10,
    subset: int = 3,
    gate: Gate | None = None,
    has_validation: bool = False,
    n_validation: int = 0,
) -> DomainSpec:
    return DomainSpec(
        name=name,
        task_ids=tuple(f"{name}-task-{i}" for i in range(n_tasks)),
        staged=StagedEvalPolicy(
            subset_size=subset,
            full_size=n_tasks,
            gate=gate or Gate(kind="min-successes", count=1),
        ),
        has_validation=has_validation,
        validation_task_ids=tuple(f"{name}-val-{i}" for i in range(n_validation)),
    )


def scripted(scores: dict[str, float]):
    def evaluator(task_id: str, payload_ref: str, limits: SandboxLimits) -> float:
        return scores[task_id]

    return evaluator


# --- gates ---------------------------------------------------------------------


def test_min_successes_gate_all_zero_subset_gates_out():
    domain = make_domain(n_tasks=5, subset=2)
    report = staged_evaluate("p", domain, lambda t, p, l: 0.0, LIMITS)
    assert report.gated_out
    assert report.aggregate == 0.0


def test_min_fraction_strict_four_of_ten_fails():
    domain = make_domain(
        n_tasks=60, subset=10, gate=Gate(kind="min-fraction", fraction=0.4, strict=True)
    )
    scores = {t: 1.0 if i < 4 else 0.0 for i, t in enumerate(domain.task_ids)}
    report = staged_evaluate("p", domain, scripted(scores), LIMITS)
    assert report.gated_out  # 40% is not "more than 40%"
    assert report.aggregate == pytest.approx(4 / 60)


def test_min_fraction_strict_five_of_ten_passes():
    domain = make_domain(
        n_tasks=60, subset=10, gate=Gate(kind="min-fraction", fraction=0.4, strict=True)
    )
    scores = {t: 1.0 if i < 5 else 0.0 for i, t in enumerate(domain.task_ids)}
    report = staged_evaluate("p", domain, scripted(scores), LIMITS)
    assert not report.gated_out
    assert len(report.per_task) == 60


def test_non_strict_fraction_accepts_equality():
    gate = Gate(kind="min-fraction", fraction=0.4, strict=False)
    assert gate.passes(4, 10)
    assert not gate.passes(3, 10)


def test_subset_passes_then_remaining_all_ones():
    domain = make_domain(n_tasks=6, subset=2)
    scores = {t: 1.0 if i != 1 else 0.0 for i, t in enumerate(domain.task_ids)}
    report = staged_evaluate("p", domain, scripted(scores), LIMITS)
    assert not report.gated_out
    assert report.aggregate == pytest.approx(5 / 6)


def test_evaluator_crash_scores_zero_for_that_task(caplog):
    domain = make_domain(n_tasks=4, subset=2)

    def flaky(task_id, payload_ref, limits):
        if task_id.endswith("0"):
            raise EvaluatorError("boom")
        return 1.0

    report = staged_evaluate("p", domain, flaky, LIMITS)
    assert not report.gated_out
    assert report.per_task[domain.task_ids[0]] == 0.0
    assert report.aggregate == pytest.approx(3 / 4)


def test_systemic_evaluator_failure_fails_gate_naturally():
    domain = make_domain(n_tasks=4, subset=2)

    def broken(task_id, payload_ref, limits):
        raise EvaluatorError("dead")

    report = staged_evaluate("p", domain, broken, LIMITS)
    assert report.gated_out
    assert report.aggregate == 0.0


def test_out_of_range_score_treated_as_zero():
    domain = make_domain(n_tasks=2, subset=1)
    report = staged_evaluate("p", domain, lambda t, p, l: 1.7, LIMITS)
    assert report.gated_out


# --- multi-domain -----------------------------------------------------------------


def test_one_failed_gate_forces_both_domains_gated_out():
    good = make_domain("good", n_tasks=4, subset=2)
    bad = make_domain("bad", n_tasks=4, subset=2)
    evaluators = {"good": lambda t, p, l: 1.0, "bad": lambda t, p, l: 0.0}
    reports, combined = multi_domain_evaluate("p", [good, bad], evaluators, LIMITS)
    assert reports["good"].gated_out and reports["bad"].gated_out
    # the passing domain keeps its subset scores but is zero-filled beyond them
    assert reports["good"].aggregate == pytest.approx(2 / 4)
    assert combined == pytest.approx((2 / 4 + 0.0) / 2)


def test_single_domain_combined_equals_aggregate():
    domain = make_domain(n_tasks=4, subset=2)
    reports, combined = multi_domain_evaluate(
        "p", [domain], {"d": lambda t, p, l: 0.5}, LIMITS
    )
    assert combined == pytest.approx(reports["d"].aggregate)


def test_two_domain_mean():
    d1 = make_domain("a", n_tasks=5, subset=1)
    d2 = make_domain("b", n_tasks=5, subset=1)
    evaluators = {"a": lambda t, p, l: 0.2, "b": lambda t, p, l: 0.6}
    _, combined = multi_domain_evaluate("p", [d1, d2], evaluators, LIMITS)
    assert combined == pytest.approx(0.4)


def test_empty_domain_list_rejected():
    with pytest.raises(ValueError):
        multi_domain_evaluate("p", [], {}, LIMITS)


# --- selection score ----------------------------------------------------------------


def _node(scores: dict[str, DomainScores]) -> AgentNode:
    return AgentNode(id=0, parent_id=None, payload_ref="p", compiled=True, scores=scores)


def test_validation_preferred_over_train():
    node = _node({"d": DomainScores(train=0.2, validation=0.7)})
    domain = make_domain("d", has_validation=True, n_validation=2)
    assert selection_score(node, [domain]) == pytest.approx(0.7)


def test_train_used_without_validation():
    node = _node({"d": DomainScores(train=0.35)})
    assert selection_score(node, [make_domain("d")]) == pytest.approx(0.35)


def test_mixed_pair_mean():
    node = _node({
        "v": DomainScores(train=0.1, validation=0.6),
        "t": DomainScores(train=0.2),
    })
    domains = [make_domain("v", has_validation=True, n_validation=1), make_domain("t")]
    assert selection_score(node, domains) == pytest.approx(0.4)
    assert node_selection_score(node) == pytest.approx(0.4)


def test_no_evaluation_record_errors():
    node = _node({})
    with pytest.raises(ValueError):
        selection_score(node, [make_domain("d")])
    with pytest.raises(ValueError):
        node_selection_score(node)


# --- invariants -------------------------------------------------------------------


@given(
    st.lists(st.floats(min_value=0, max_value=1, allow_nan=False), min_size=4, max_size=10),
    st.integers(min_value=0, max_value=3),
    st.floats(min_value=0.01, max_value=0.5),
)
@settings(max_examples=60, deadline=None)
def test_aggregate_monotone_in_every_task_score(base_scores, index, bump):
    n = len(base_scores)
    domain = make_domain(n_tasks=n, subset=1)
    target = domain.task_ids[min(index, n - 1)]
    low = dict(zip(domain.task_ids, base_scores))
    high = dict(low)
    high[target] = min(1.0, high[target] + bump)
    r_low = staged_evaluate("p", domain, scripted(low), LIMITS)
    r_high = staged_evaluate("p", domain, scripted(high), LIMITS)
    if r_low.gated_out == r_high.gated_out:
        assert r_high.aggregate >= r_low.aggregate - 1e-12


@given(
    st.integers(min_value=2, max_value=10),
    st.integers(min_value=1, max_value=5),
    st.integers(min_value=0, max_value=2**32 - 1),
)
@settings(max_examples=60, deadline=None)
def test_gated_out_bounds_aggregate(n_tasks, subset, seed):
    import numpy as np

    subset = min(subset, n_tasks)
    rng = np.random.default_rng(seed)
    domain = make_domain(
        n_tasks=n_tasks, subset=subset, gate=Gate(kind="min-fraction", fraction=0.99, strict=True)
    )
    scores = {t: float(rng.random() < 0.5) for t in domain.task_ids}
    report = staged_evaluate("p", domain, scripted(scores), LIMITS)
    if report.gated_out:
        assert report.aggregate <= subset / n_tasks + 1e-12


# --- evaluator implementations -------------------------------------------------------


def test_synthetic_evaluator_scores_genome(tmp_path):
    genome = SimulatedAgentGenome(
        task_skill=[0.8, 0.0], meta_capability=0.5, compile_probability=1.0
    )
    genome.write_payload(tmp_path / "agent")
    evaluator = SyntheticEvaluator()
    score = evaluator("any-task", str(tmp_path / "agent"), LIMITS)
    assert score == pytest.approx(0.6, abs=0.01)  # sits on the near peak


def test_synthetic_evaluator_raises_on_broken_payload(tmp_path):
    payload = tmp_path / "agent"
    payload.mkdir()
    (payload / "genome.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(EvaluatorError):
        SyntheticEvaluator()("t", str(payload), LIMITS)


ECHO_EVALUATOR = (
    "import json,sys;"
    "req=json.load(sys.stdin);"
    "print(json.dumps({'score': 0.25 if req['task_id'].endswith('1') else 1.0,"
    " 'logs': None}))"
)


def test_command_evaluator_round_trip(tmp_path):
    evaluator = CommandEvaluator([sys.executable, "-c", ECHO_EVALUATOR])
    assert evaluator("task-1", str(tmp_path), LIMITS) == pytest.approx(0.25)
    assert evaluator("task-2", str(tmp_path), LIMITS) == pytest.approx(1.0)


def test_command_evaluator_request_schema(tmp_path):
    capture = tmp_path / "request.json"
    code = (
        "import json,sys,pathlib;"
        f"pathlib.Path({str(capture)!r}).write_text(sys.stdin.read());"
        "print(json.dumps({'score': 0.5, 'logs': 'log.txt'}))"
    )
    evaluator = CommandEvaluator([sys.executable, "-c", code])
    evaluator("t-9", "/payload/ref", LIMITS)
    request = json.loads(capture.read_text())
    assert request["task_id"] == "t-9"
    assert request["payload_ref"] == "/payload/ref"
    assert request["limits"]["network"] == "disabled"
    assert request["limits"]["wall_clock_seconds"] == LIMITS.wall_clock_seconds


def test_command_evaluator_nonzero_exit_raises():
    evaluator = CommandEvaluator([sys.executable, "-c", "import sys; sys.exit(3)"])
    with pytest.raises(EvaluatorError, match="exited 3"):
        evaluator("t", "p", LIMITS)


def test_command_evaluator_timeout_raises():
    limits = SandboxLimits(wall_clock_seconds=0.5, cpu_seconds=5, max_output_bytes=1000)
    evaluator = CommandEvaluator([sys.executable, "-c", "import time; time.sleep(30)"])
    with pytest.raises(EvaluatorError, match="timed out"):
        evaluator("t", "p", limits)


def test_command_evaluator_through_staged_evaluate(tmp_path):
    # non-zero exits map to per-task zeros inside the staged protocol
    code = (
        "import json,sys;"
        "req=json.load(sys.stdin);"
        "sys.exit(1) if req['task_id'].endswith('0') else"
        " print(json.dumps({'score': 1.0, 'logs': None}))"
    )
    domain = make_domain(n_tasks=4, subset=2)
    evaluator = CommandEvaluator([sys.executable, "-c", code])
    report = staged_evaluate(str(tmp_path), domain, evaluator, LIMITS)
    assert report.per_task[domain.task_ids[0]] == 0.0
    assert report.aggregate == pytest.approx(3 / 4)


def test_evaluate_full_is_gate_free():
    report = evaluate_full("p", ("a", "b"), lambda t, p, l: 0.0, LIMITS)
    assert not report.gated_out
    assert report.aggregate == 0.0


def test_concurrent_task_evaluation_matches_serial():
    domain = make_domain(n_tasks=8, subset=4)
    scores = {t: (i % 3) / 3 for i, t in enumerate(domain.task_ids)}
    serial = staged_evaluate("p", domain, scripted(scores), LIMITS, concurrency=1)
    parallel = staged_evaluate("p", domain, scripted(scores), LIMITS, concurrency=4)
    assert serial.per_task == parallel.per_task
    assert serial.aggregate == parallel.aggregate
