"""Staged, gated agent evaluation across domains.

Agents are first scored on a cheap task subset. A domain-specific gate
(minimum success count, or a success fraction that may be strict) decides
whether the remaining tasks run at all; agents that fail any gate keep a
zero for everything they were never evaluated on. When several domains
are evaluated together, one failed gate zero-fills all of them, and the
combined score is the unweighted mean of per-domain aggregates.

A task "success" is any score strictly greater than zero, which covers
both binary domains and continuous fitness normalized to [0, 1].

Evaluators are per-task callbacks raising EvaluatorError (or timing out)
on malfunction; malfunctions score 0 for that task and are logged. The
out-of-process contract sends one JSON request on stdin and expects one
JSON response on stdout; a non-zero exit or timeout counts as score 0.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .archive import AgentNode, DomainScores
from .landscape import DEFAULT_LANDSCAPE, TwoPeakLandscape
from .sandbox import SandboxLimits, SandboxSpawnError, sandbox_execute

logger = logging.getLogger(__name__)

Evaluator = Callable[[str, str, SandboxLimits], float]


class EvaluatorError(Exception):
    """Raised by evaluators on crash, timeout, or malformed response."""


@dataclass(frozen=True)
class Gate:
    """Subset gate: kind is 'min-successes' (>= count) or 'min-fraction'.

    The fraction comparison is strict ('more than') when strict=True,
    otherwise >=. Successes are counted over the subset only.
    """

    kind: str
    count: int = 1
    fraction: float = 0.4
    strict: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ("min-successes", "min-fraction"):
            raise ValueError(f"unknown gate kind {self.kind!r}")
        if self.kind == "min-successes" and self.count < 1:
            raise ValueError("gate count must be >= 1")
        if self.kind == "min-fraction" and not 0.0 < self.fraction <= 1.0:
            raise ValueError("gate fraction must be in (0, 1]")

    def passes(self, successes: int, subset_size: int) -> bool:
        if self.kind == "min-successes":
            return successes >= self.count
        observed = successes / subset_size
        return observed > self.fraction if self.strict else observed >= self.fraction


@dataclass(frozen=True)
class StagedEvalPolicy:
    subset_size: int
    full_size: int
    gate: Gate

    def __post_init__(self) -> None:
        if self.subset_size < 1:
            raise ValueError("subset_size must be >= 1")
        if self.full_size < self.subset_size:
            raise ValueError("full_size must be >= subset_size")


@dataclass(frozen=True)
class DomainSpec:
    """One evaluation domain; aggregation is the mean of task scores.

    Repeat-style domains list one task id per repetition. The validation
    split feeds parent selection and is evaluated in full, gate-free,
    only after all staged gates passed.
    """

    name: str
    task_ids: tuple[str, ...]
    staged: StagedEvalPolicy
    has_validation: bool = False
    validation_task_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.task_ids:
            raise ValueError("task_ids must be non-empty")
        if len(set(self.task_ids)) != len(self.task_ids):
            raise ValueError("task_ids must be unique")
        if self.staged.full_size > len(self.task_ids):
            raise ValueError("full_size exceeds number of tasks")
        if self.has_validation and not self.validation_task_ids:
            raise ValueError("has_validation requires validation_task_ids")
        if self.validation_task_ids and len(set(self.validation_task_ids)) != len(
            self.validation_task_ids
        ):
            raise ValueError("validation_task_ids must be unique")


@dataclass
class ScoreReport:
    """Gated evaluation outcome for one split.

    `aggregate` is the mean over all `full_count` tasks of the split, with
    unevaluated tasks contributing 0 when the agent was gated out.
    """

    per_task: dict[str, float]
    gated_out: bool
    aggregate: float
    full_count: int


def _score_one(
    evaluator: Evaluator, task_id: str, payload_ref: str, limits: SandboxLimits
) -> float:
    try:
        score = float(evaluator(task_id, payload_ref, limits))
    except Exception as exc:
        logger.warning("task %s failed for %s: %s", task_id, payload_ref, exc)
        return 0.0
    if not 0.0 <= score <= 1.0:
        logger.warning("task %s returned out-of-range score %s; treated as 0", task_id, score)
        return 0.0
    return score


def _score_batch(
    evaluator: Evaluator,
    task_ids: Sequence[str],
    payload_ref: str,
    limits: SandboxLimits,
    concurrency: int,
) -> dict[str, float]:
    if concurrency <= 1 or len(task_ids) <= 1:
        return {t: _score_one(evaluator, t, payload_ref, limits) for t in task_ids}
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = {t: pool.submit(_score_one, evaluator, t, payload_ref, limits) for t in task_ids}
        return {t: f.result() for t, f in futures.items()}


def staged_evaluate(
    payload_ref: str,
    domain: DomainSpec,
    evaluator: Evaluator,
    limits: SandboxLimits,
    concurrency: int = 1,
) -> ScoreReport:
    """Evaluate the subset, apply the gate, then the rest only if it passed."""
    policy = domain.staged
    subset = domain.task_ids[: policy.subset_size]
    per_task = _score_batch(evaluator, subset, payload_ref, limits, concurrency)
    successes = sum(1 for s in per_task.values() if s > 0.0)
    if not policy.gate.passes(successes, policy.subset_size):
        aggregate = sum(per_task.values()) / policy.full_size
        return ScoreReport(per_task, gated_out=True, aggregate=aggregate, full_count=policy.full_size)
    rest = domain.task_ids[policy.subset_size : policy.full_size]
    per_task.update(_score_batch(evaluator, rest, payload_ref, limits, concurrency))
    aggregate = sum(per_task.values()) / policy.full_size
    return ScoreReport(per_task, gated_out=False, aggregate=aggregate, full_count=policy.full_size)


def evaluate_full(
    payload_ref: str,
    task_ids: Sequence[str],
    evaluator: Evaluator,
    limits: SandboxLimits,
    concurrency: int = 1,
) -> ScoreReport:
    """Gate-free evaluation of a whole task list (validation splits)."""
    per_task = _score_batch(evaluator, task_ids, payload_ref, limits, concurrency)
    aggregate = sum(per_task.values()) / len(task_ids) if task_ids else 0.0
    return ScoreReport(per_task, gated_out=False, aggregate=aggregate, full_count=len(task_ids))


def multi_domain_evaluate(
    payload_ref: str,
    domains: Sequence[DomainSpec],
    evaluators: Mapping[str, Evaluator],
    limits: SandboxLimits,
    concurrency: int = 1,
) -> tuple[dict[str, ScoreReport], float]:
    """Joint staged evaluation; any failed gate zero-fills every domain.

    All subsets run first. If any domain's gate fails, no domain is
    evaluated beyond its subset and every report is marked gated out.
    The combined score is the unweighted mean of per-domain aggregates.
    """
    if not domains:
        raise ValueError("at least one domain required")

    subset_scores: dict[str, dict[str, float]] = {}
    any_gate_failed = False
    for domain in domains:
        policy = domain.staged
        subset = domain.task_ids[: policy.subset_size]
        scores = _score_batch(evaluators[domain.name], subset, payload_ref, limits, concurrency)
        subset_scores[domain.name] = scores
        successes = sum(1 for s in scores.values() if s > 0.0)
        if not policy.gate.passes(successes, policy.subset_size):
            any_gate_failed = True

    reports: dict[str, ScoreReport] = {}
    for domain in domains:
        policy = domain.staged
        per_task = subset_scores[domain.name]
        if any_gate_failed:
            aggregate = sum(per_task.values()) / policy.full_size
            reports[domain.name] = ScoreReport(
                per_task, gated_out=True, aggregate=aggregate, full_count=policy.full_size
            )
            continue
        rest = domain.task_ids[policy.subset_size : policy.full_size]
        per_task.update(_score_batch(evaluators[domain.name], rest, payload_ref, limits, concurrency))
        aggregate = sum(per_task.values()) / policy.full_size
        reports[domain.name] = ScoreReport(
            per_task, gated_out=False, aggregate=aggregate, full_count=policy.full_size
        )

    combined = sum(r.aggregate for r in reports.values()) / len(reports)
    return reports, combined


def selection_score(node: AgentNode, domains: Sequence[DomainSpec]) -> float:
    """Score that drives parent selection: validation where defined, else train."""
    if not node.scores:
        raise ValueError(f"node {node.id} has no evaluation record")
    components = []
    for domain in domains:
        if domain.name not in node.scores:
            raise ValueError(f"node {node.id} has no record for domain {domain.name!r}")
        record = node.scores[domain.name]
        if domain.has_validation:
            if record.validation is None:
                raise ValueError(
                    f"domain {domain.name!r} expects a validation score on node {node.id}"
                )
            components.append(record.validation)
        else:
            components.append(record.train)
    return sum(components) / len(components)


def node_selection_score(node: AgentNode) -> float:
    """Selection score from a node's stored records alone (validation-else-train)."""
    if not node.scores:
        raise ValueError(f"node {node.id} has no evaluation record")
    values = [s.selection_component() for s in node.scores.values()]
    return sum(values) / len(values)


def reports_to_scores(
    reports: Mapping[str, ScoreReport],
    validation_reports: Optional[Mapping[str, ScoreReport]] = None,
) -> dict[str, DomainScores]:
    out: dict[str, DomainScores] = {}
    for name, report in reports.items():
        validation = None
        if validation_reports and name in validation_reports:
            validation = validation_reports[name].aggregate
        out[name] = DomainScores(train=report.aggregate, validation=validation)
    return out


# --- evaluator implementations ----------------------------------------------


class SyntheticEvaluator:
    """In-process evaluator scoring genome payloads on the synthetic surface.

    Implements the same (task_id, payload_ref, limits) -> score contract as
    the out-of-process command evaluator.
    """

    def __init__(self, landscape: TwoPeakLandscape = DEFAULT_LANDSCAPE):
        self.landscape = landscape

    def __call__(self, task_id: str, payload_ref: str, limits: SandboxLimits) -> float:
        genome_path = Path(payload_ref) / "genome.json"
        try:
            genome = json.loads(genome_path.read_text(encoding="utf-8"))
            skill = [float(v) for v in genome["task_skill"]]
        except (OSError, TypeError, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise EvaluatorError(f"unreadable genome at {genome_path}: {exc}") from exc
        return self.landscape.fitness(skill)


class CommandEvaluator:
    """Out-of-process evaluator: JSON request on stdin, JSON response on stdout.

    Request:  {"task_id": ..., "payload_ref": ..., "limits": {...}}
    Response: {"score": <float in [0,1]>, "logs": <locator or null>}
    Non-zero exit, timeout, or a malformed response raise EvaluatorError.
    """

    def __init__(self, argv: Sequence[str]):
        if not argv:
            raise ValueError("evaluator command must be non-empty")
        self.argv = tuple(argv)

    def __call__(self, task_id: str, payload_ref: str, limits: SandboxLimits) -> float:
        request = {
            "task_id": task_id,
            "payload_ref": payload_ref,
            "limits": {
                "wall_clock_seconds": limits.wall_clock_seconds,
                "cpu_seconds": limits.cpu_seconds,
                "max_output_bytes": limits.max_output_bytes,
                "network": limits.network,
            },
        }
        try:
            outcome = sandbox_execute(
                self.argv, limits, stdin_data=json.dumps(request).encode("utf-8")
            )
        except SandboxSpawnError as exc:
            raise EvaluatorError(str(exc)) from exc
        if outcome.timed_out:
            raise EvaluatorError(f"evaluator timed out on task {task_id}")
        if outcome.exit_status != 0:
            raise EvaluatorError(
                f"evaluator exited {outcome.exit_status} on task {task_id}: "
                f"{outcome.stderr[:200]!r}"
            )
        try:
            response = json.loads(outcome.stdout.decode("utf-8"))
            return float(response["score"])
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise EvaluatorError(f"malformed evaluator response: {exc}") from exc
