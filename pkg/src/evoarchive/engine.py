"""The iteration loop: select parents, generate children, evaluate, archive.

Five modes share one loop body:

* full                  -- archive kept, parents modify themselves
* no-self-improve       -- the root agent performs every modification
* no-open-ended         -- the newest valid child replaces the archive and
                           the sole member is always the next parent
* dgm-fixed-instruction -- a templated instruction-generation request
                           precedes each modification
* modifiable-selection  -- the most recently added agent's own selection
                           routine produces the parent distribution, with
                           uniform-random fallback when it errors

One master seed derives a named substream per decision (selection,
per-child generation), so concurrency and resume cannot reorder draws.
State (archive, config snapshot, event log) is persisted after every
iteration; resuming from it replays the exact same trajectory.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import archive as archive_mod
from .archive import AgentNode, Archive
from .evaluation import (
    DomainSpec,
    Evaluator,
    ScoreReport,
    SyntheticEvaluator,
    CommandEvaluator,
    evaluate_full,
    multi_domain_evaluate,
    reports_to_scores,
    selection_score,
)
from .generation import (
    ExternalProcessBackend,
    GenerationRequest,
    ModelClientBackend,
    SimulatedAgentGenome,
    SimulatedBackend,
    generate_child,
    snapshot_payload,
    validate_child,
    SMOKE_TASK,
)
from .landscape import TwoPeakLandscape
from .rng import stream_id, substream
from .sandbox import SandboxLimits
from .selection import SelectionPolicy, sample_parents, selection_distribution

logger = logging.getLogger(__name__)

MODES = (
    "full",
    "no-self-improve",
    "no-open-ended",
    "dgm-fixed-instruction",
    "modifiable-selection",
)

UNIFORM_FALLBACK = SelectionPolicy(variant="uniform-random")


class EngineError(Exception):
    pass


class IntegrityError(EngineError):
    """Persisted run state is inconsistent; names the first bad event."""


@dataclass
class RunConfig:
    mode: str
    iterations: int
    seed: int
    state_dir: Path
    policy: SelectionPolicy
    domains: list[DomainSpec]
    backend: dict = field(default_factory=lambda: {"kind": "simulated"})
    initial: dict = field(default_factory=dict)
    parents_per_iteration: int = 1
    concurrency: int = 1
    limits: SandboxLimits = field(default_factory=SandboxLimits)
    payload_dir: Optional[Path] = None
    instruction_template: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.parents_per_iteration < 1:
            raise ValueError("parents_per_iteration must be >= 1")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if not self.domains:
            raise ValueError("at least one domain required")
        self.state_dir = Path(self.state_dir)
        if self.payload_dir is None:
            self.payload_dir = self.state_dir / "payloads"
        self.payload_dir = Path(self.payload_dir)


@dataclass
class RunState:
    archive: Archive
    iteration: int
    event_log: Path
    run_id: str
    next_node_id: int
    completed: bool = False


# --- event log ----------------------------------------------------------------


def append_events(path: Path, events: list[dict]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for event in events:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
        fh.flush()


def read_events(path: Path) -> list[dict]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise IntegrityError(f"corrupt event at line {lineno}: {exc}") from exc
    return events


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


# --- wiring -------------------------------------------------------------------


def build_backend(config: RunConfig, root_payload_ref: str):
    spec = dict(config.backend)
    kind = spec.pop("kind", "simulated")
    if kind == "simulated":
        landscape_spec = spec.pop("landscape", {})
        landscape = TwoPeakLandscape(**landscape_spec) if landscape_spec else TwoPeakLandscape()
        return SimulatedBackend(
            master_seed=config.seed,
            landscape=landscape,
            self_improve=config.mode != "no-self-improve",
            root_payload_ref=root_payload_ref,
            evolve_selection_policy=config.mode == "modifiable-selection",
            **spec,
        )
    if kind == "external-process":
        return ExternalProcessBackend(argv=spec["command"], limits=config.limits)
    if kind == "model-client":
        template = None
        if config.mode == "dgm-fixed-instruction":
            template_path = config.instruction_template or default_instruction_template()
            template = Path(template_path).read_text(encoding="utf-8")
        return ModelClientBackend(
            url=spec["url"],
            token_env=spec.get("token_env", "EVOARCHIVE_TOKEN"),
            instruction_template=template,
        )
    raise ValueError(f"unknown backend kind {kind!r}")


def build_evaluators(config: RunConfig, evaluator_specs: dict[str, dict]) -> dict[str, Evaluator]:
    evaluators: dict[str, Evaluator] = {}
    for domain in config.domains:
        spec = dict(evaluator_specs.get(domain.name, {"kind": "synthetic"}))
        kind = spec.pop("kind", "synthetic")
        if kind == "synthetic":
            landscape_spec = dict(config.backend).get("landscape", {})
            landscape = TwoPeakLandscape(**landscape_spec) if landscape_spec else TwoPeakLandscape()
            evaluators[domain.name] = SyntheticEvaluator(landscape)
        elif kind == "command":
            evaluators[domain.name] = CommandEvaluator(spec["command"])
        else:
            raise ValueError(f"unknown evaluator kind {kind!r} for domain {domain.name}")
    return evaluators


def default_instruction_template() -> Path:
    return Path(__file__).parent / "data" / "fixed_instruction_template.txt"


# --- run/step/resume ----------------------------------------------------------


ROOT_PAYLOAD_KEY = "agent_root"


def payload_path(config: RunConfig, payload_ref: str) -> str:
    """Node payload refs are keys relative to the payload directory."""
    return str(config.payload_dir / payload_ref)


class _Runtime:
    """Wired collaborators for one run; rebuilt identically on resume."""

    def __init__(
        self,
        config: RunConfig,
        backend=None,
        evaluators: Optional[dict[str, Evaluator]] = None,
        evaluator_specs: Optional[dict[str, dict]] = None,
    ):
        self.config = config
        root_ref = payload_path(config, ROOT_PAYLOAD_KEY)
        self.backend = backend or build_backend(config, root_ref)
        self.evaluators = evaluators or build_evaluators(config, evaluator_specs or {})
        self.smoke_probe = self.evaluators[config.domains[0].name]


def _init_root_payload(config: RunConfig) -> str:
    root_dir = config.payload_dir / ROOT_PAYLOAD_KEY
    if root_dir.exists() and any(root_dir.iterdir()):
        return str(root_dir)
    initial = dict(config.initial)
    source = initial.pop("payload_ref", None)
    if source:
        snapshot_payload(source, root_dir)
        return str(root_dir)
    genome = SimulatedAgentGenome(
        task_skill=[float(v) for v in initial.get("task_skill", [0.0, 0.0])],
        meta_capability=float(initial.get("meta_capability", 0.15)),
        compile_probability=float(initial.get("compile_probability", 0.95)),
        selection_policy=initial.get("selection_policy"),
    )
    genome.write_payload(root_dir)
    return str(root_dir)


def _evaluate_payload(
    runtime: _Runtime, payload_ref: str, task_concurrency: int
) -> tuple[dict[str, ScoreReport], dict]:
    config = runtime.config
    reports, combined = multi_domain_evaluate(
        payload_ref, config.domains, runtime.evaluators, config.limits, task_concurrency
    )
    any_gated = any(r.gated_out for r in reports.values())
    validation_reports: dict[str, ScoreReport] = {}
    for domain in config.domains:
        if not domain.has_validation:
            continue
        if any_gated:
            validation_reports[domain.name] = ScoreReport(
                per_task={}, gated_out=True, aggregate=0.0,
                full_count=len(domain.validation_task_ids),
            )
        else:
            validation_reports[domain.name] = evaluate_full(
                payload_ref,
                domain.validation_task_ids,
                runtime.evaluators[domain.name],
                config.limits,
                task_concurrency,
            )
    scores = reports_to_scores(reports, validation_reports)
    detail = {
        "combined": combined,
        "gated_out": {name: r.gated_out for name, r in reports.items()},
        "aggregates": {name: r.aggregate for name, r in reports.items()},
        "validation": {name: r.aggregate for name, r in validation_reports.items()},
    }
    return scores, {"scores": scores, "detail": detail}


def _persist(config: RunConfig, state: RunState) -> None:
    archive_mod.persist(state.archive, config.state_dir / "archive", run_id=state.run_id)
    state_doc = {
        "iteration": state.iteration,
        "completed": state.completed,
        "run_id": state.run_id,
        "next_node_id": state.next_node_id,
    }
    (config.state_dir / "state.json").write_text(
        json.dumps(state_doc, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def _start(runtime: _Runtime, run_id: str) -> RunState:
    config = runtime.config
    config.state_dir.mkdir(parents=True, exist_ok=True)
    config.payload_dir.mkdir(parents=True, exist_ok=True)
    event_log = config.state_dir / "events.jsonl"
    if event_log.exists():
        event_log.unlink()

    root_path = _init_root_payload(config)
    ok, cause = validate_child(root_path, SMOKE_TASK, config.limits, runtime.smoke_probe)
    if not ok:
        raise EngineError(f"initial agent payload failed validity check: {cause}")

    scores, eval_event = _evaluate_payload(runtime, root_path, config.concurrency)
    root = AgentNode(
        id=0, parent_id=None, payload_ref=ROOT_PAYLOAD_KEY, compiled=True,
        scores=scores, created_at_iteration=0,
    )
    arch = Archive(mode_tag=config.mode)
    archive_mod.add_node(arch, root)

    state = RunState(
        archive=arch, iteration=0, event_log=event_log, run_id=run_id, next_node_id=1
    )
    append_events(
        event_log,
        [
            {
                "event": "run_start", "time": _now(), "run_id": run_id,
                "mode": config.mode, "seed": config.seed, "iterations": config.iterations,
            },
            {
                "event": "evaluation", "time": _now(), "iteration": 0, "node_id": 0,
                "payload_ref": ROOT_PAYLOAD_KEY,
                "selection_score": selection_score(root, config.domains),
                **_jsonable_eval(eval_event),
            },
            {
                "event": "archive_add", "time": _now(), "iteration": 0, "node_id": 0,
                "parent_id": None, "payload_ref": ROOT_PAYLOAD_KEY,
            },
            {"event": "iteration_complete", "time": _now(), "iteration": 0},
        ],
    )
    _persist(config, state)
    return state


def _jsonable_eval(eval_event: dict) -> dict:
    detail = eval_event["detail"]
    scores = {
        name: {"train": s.train, "validation": s.validation, "test": s.test}
        for name, s in eval_event["scores"].items()
    }
    return {"scores": scores, **detail}


def _choose_policy(
    runtime: _Runtime, state: RunState
) -> tuple[SelectionPolicy, Optional[int], bool]:
    config = runtime.config
    if config.mode != "modifiable-selection":
        return config.policy, None, False
    latest = state.archive.latest()
    try:
        policy = runtime.backend.selection_policy_of(
            payload_path(config, latest.payload_ref)
        )
        return policy, latest.id, False
    except Exception as exc:
        logger.warning("latest agent's selection routine failed (%s); uniform fallback", exc)
        return UNIFORM_FALLBACK, latest.id, True


def _child_slot(
    runtime: _Runtime, state: RunState, iteration: int, slot: int, parent: AgentNode
) -> dict:
    """Generate and evaluate one child; pure with respect to shared state."""
    config = runtime.config
    modifier_id = 0 if config.mode == "no-self-improve" else parent.id
    child_key = f"cand_{iteration:05d}_{slot}"
    request = GenerationRequest(
        parent_payload_ref=payload_path(config, parent.payload_ref),
        eval_results_ref=str(state.event_log),
        iterations_left=config.iterations - state.iteration,
        rng_stream_id=stream_id("gen", iteration, slot),
        child_payload_ref=payload_path(config, child_key),
    )
    result = generate_child(runtime.backend, request, runtime.smoke_probe, config.limits)
    out: dict = {
        "parent": parent,
        "modifier_id": modifier_id,
        "child_key": child_key,
        "request": request,
        "result": result,
        "scores": None,
        "eval_event": None,
    }
    if result.compiled:
        task_concurrency = 1 if config.parents_per_iteration > 1 else config.concurrency
        scores, eval_event = _evaluate_payload(runtime, result.child_payload_ref, task_concurrency)
        out["scores"] = scores
        out["eval_event"] = eval_event
    return out


def _step(runtime: _Runtime, state: RunState) -> RunState:
    config = runtime.config
    if state.iteration >= config.iterations:
        raise EngineError("run already completed")
    iteration = state.iteration + 1
    events: list[dict] = []

    policy, selector_id, fallback = _choose_policy(runtime, state)
    view = [
        (selection_score(n, config.domains), n.compiled_children) for n in state.archive
    ]
    breakdown = selection_distribution(view, policy)
    sel_stream = stream_id("sel", iteration)
    rng = substream(config.seed, sel_stream)
    parent_indices = sample_parents(breakdown, config.parents_per_iteration, rng)
    parents = [state.archive.nodes[i] for i in parent_indices]
    events.append(
        {
            "event": "selection", "time": _now(), "iteration": iteration,
            "selector_id": selector_id, "policy": policy.variant,
            "fallback": fallback, "parents": [p.id for p in parents],
            "probabilities": [float(p) for p in breakdown.probabilities],
            "rng": sel_stream,
        }
    )
    if config.mode == "dgm-fixed-instruction":
        template = config.instruction_template or default_instruction_template()
        for parent in parents:
            events.append(
                {
                    "event": "instruction", "time": _now(), "iteration": iteration,
                    "parent_id": parent.id, "template": str(template),
                }
            )

    slots = list(enumerate(parents))
    if config.parents_per_iteration > 1 and config.concurrency > 1:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            futures = [
                pool.submit(_child_slot, runtime, state, iteration, j, parent)
                for j, parent in slots
            ]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_child_slot(runtime, state, iteration, j, parent) for j, parent in slots]

    for j, outcome in enumerate(outcomes):
        parent = outcome["parent"]
        result = outcome["result"]
        child_key = outcome["child_key"]
        validity_name = Path(result.validity_log).name if result.validity_log else ""
        events.append(
            {
                "event": "generation", "time": _now(), "iteration": iteration,
                "slot": j, "parent_id": parent.id, "modifier_id": outcome["modifier_id"],
                "child_payload": child_key, "compiled": result.compiled,
                "wall_time": result.wall_time, "validity_log": validity_name,
                "rng": outcome["request"].rng_stream_id,
            }
        )
        events.append(
            {
                "event": "validation", "time": _now(), "iteration": iteration,
                "slot": j, "payload_ref": child_key, "ok": result.compiled,
            }
        )
        if not result.compiled:
            events.append(
                {
                    "event": "archive_reject", "time": _now(), "iteration": iteration,
                    "slot": j, "parent_id": parent.id, "payload_ref": child_key,
                }
            )
            continue

        node = AgentNode(
            id=state.next_node_id,
            parent_id=parent.id,
            payload_ref=child_key,
            compiled=True,
            scores=outcome["scores"],
            created_at_iteration=iteration,
        )
        events.append(
            {
                "event": "evaluation", "time": _now(), "iteration": iteration,
                "node_id": node.id, "payload_ref": node.payload_ref,
                "selection_score": selection_score(node, config.domains),
                **_jsonable_eval(outcome["eval_event"]),
            }
        )
        if config.mode == "no-open-ended":
            archive_mod.replace_sole_node(state.archive, node)
            events.append(
                {
                    "event": "archive_replace", "time": _now(), "iteration": iteration,
                    "node_id": node.id, "parent_id": parent.id,
                    "payload_ref": node.payload_ref,
                }
            )
        else:
            archive_mod.add_node(state.archive, node)
            events.append(
                {
                    "event": "archive_add", "time": _now(), "iteration": iteration,
                    "node_id": node.id, "parent_id": parent.id,
                    "payload_ref": node.payload_ref,
                }
            )
        state.next_node_id += 1

    events.append({"event": "iteration_complete", "time": _now(), "iteration": iteration})
    state.iteration = iteration
    state.completed = iteration >= config.iterations
    if state.completed:
        events.append({"event": "run_complete", "time": _now(), "iteration": iteration})
    append_events(state.event_log, events)
    _persist(config, state)
    return state


def step(
    state: RunState,
    config: RunConfig,
    backend=None,
    evaluators: Optional[dict[str, Evaluator]] = None,
    evaluator_specs: Optional[dict[str, dict]] = None,
) -> RunState:
    """Apply one iteration to `state`. Requires iteration < T."""
    runtime = _Runtime(config, backend, evaluators, evaluator_specs)
    return _step(runtime, state)


def run(
    config: RunConfig,
    backend=None,
    evaluators: Optional[dict[str, Evaluator]] = None,
    evaluator_specs: Optional[dict[str, dict]] = None,
    run_id: Optional[str] = None,
    stop_after: Optional[int] = None,
) -> RunState:
    """Evaluate the root at t=0, then run T iterations (or up to stop_after)."""
    runtime = _Runtime(config, backend, evaluators, evaluator_specs)
    state = _start(runtime, run_id or "run")
    limit = config.iterations if stop_after is None else min(stop_after, config.iterations)
    while state.iteration < limit:
        state = _step(runtime, state)
    return state


def load_state(config: RunConfig) -> RunState:
    """Load persisted state for `config`, verifying log/archive integrity."""
    state_path = config.state_dir / "state.json"
    if not state_path.exists():
        raise IntegrityError(f"no state file at {state_path}")
    doc = json.loads(state_path.read_text(encoding="utf-8"))
    arch = archive_mod.load(config.state_dir / "archive")
    event_log = config.state_dir / "events.jsonl"
    _check_log_integrity(event_log, arch, doc["iteration"], config.mode)
    return RunState(
        archive=arch,
        iteration=doc["iteration"],
        event_log=event_log,
        run_id=doc["run_id"],
        next_node_id=doc["next_node_id"],
        completed=doc["completed"],
    )


def _check_log_integrity(
    event_log: Path, arch: Archive, iteration: int, mode: str
) -> None:
    events = read_events(event_log)
    added: list[int] = []
    last_complete = -1
    for index, event in enumerate(events, start=1):
        kind = event.get("event")
        if kind in ("archive_add", "archive_replace"):
            node_id = event["node_id"]
            if added and node_id <= added[-1]:
                raise IntegrityError(
                    f"event {index} ({kind}) adds node {node_id} out of order"
                )
            added.append(node_id)
        elif kind == "iteration_complete":
            last_complete = event["iteration"]
    if last_complete != iteration:
        raise IntegrityError(
            f"state says iteration {iteration} but log's last complete iteration "
            f"is {last_complete}"
        )
    if mode == "no-open-ended":
        if len(arch) != 1 or (added and arch.nodes[0].id != added[-1]):
            raise IntegrityError(
                f"archive node {arch.nodes[0].id if arch.nodes else None} does not "
                f"match last replacement {added[-1] if added else None}"
            )
        return
    archive_ids = [n.id for n in arch.nodes]
    if archive_ids != added:
        for position, (got, want) in enumerate(zip(added, archive_ids)):
            if got != want:
                raise IntegrityError(
                    f"log add #{position + 1} is node {got}, archive holds {want}"
                )
        raise IntegrityError(
            f"log records {len(added)} adds, archive holds {len(archive_ids)} nodes"
        )


def resume(
    config: RunConfig,
    backend=None,
    evaluators: Optional[dict[str, Evaluator]] = None,
    evaluator_specs: Optional[dict[str, dict]] = None,
) -> RunState:
    """Continue a persisted run to completion; no-op if already complete."""
    state = load_state(config)
    if state.completed:
        logger.info("run %s already completed at iteration %d; nothing to resume",
                    state.run_id, state.iteration)
        return state
    runtime = _Runtime(config, backend, evaluators, evaluator_specs)
    append_events(
        state.event_log,
        [{"event": "resume", "time": _now(), "iteration": state.iteration}],
    )
    while state.iteration < config.iterations:
        state = _step(runtime, state)
    return state
