"""Turning a selected parent into a candidate child.

Three interchangeable backends share one contract: simulated (a genome
on the synthetic fitness surface, used for tests and desk-scale runs),
external-process (a configured command run inside the sandbox), and
model-client (one HTTPS request per child against a remote endpoint).

A child is "compiled" only if `validate_child` accepts it: the payload
must load and produce a well-formed answer to one smoke task within the
resource limits. Non-compiled children never enter the archive.
"""

from __future__ import annotations

import json
import logging
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .evaluation import Evaluator
from .landscape import DEFAULT_LANDSCAPE, TwoPeakLandscape
from .rng import substream
from .sandbox import SandboxLimits, SandboxSpawnError, sandbox_execute
from .selection import ScoreChildPropParams, SelectionPolicy

logger = logging.getLogger(__name__)

SMOKE_TASK = "smoke"


class GenerationError(Exception):
    """Unrecoverable backend failure (distinct from an invalid child)."""


@dataclass(frozen=True)
class GenerationRequest:
    parent_payload_ref: str
    eval_results_ref: str
    iterations_left: int
    rng_stream_id: str
    child_payload_ref: str

    def __post_init__(self) -> None:
        if self.iterations_left < 0:
            raise ValueError("iterations_left must be non-negative")


@dataclass
class GenerationResult:
    child_payload_ref: str
    compiled: bool
    validity_log: str
    wall_time: float


@dataclass
class SimulatedAgentGenome:
    """Desk-scale stand-in for a modifiable agent program.

    task_skill is a position on the synthetic fitness surface;
    meta_capability scales how well the agent's own modification step
    works (the "improving the ability to improve" knob); the selection
    policy field only matters in the modifiable-selection mode.
    """

    task_skill: list[float]
    meta_capability: float
    compile_probability: float
    selection_policy: Optional[dict] = None

    def __post_init__(self) -> None:
        if not all(np.isfinite(v) for v in self.task_skill):
            raise ValueError("task_skill must be finite")
        if not 0.0 <= self.meta_capability <= 1.0:
            raise ValueError("meta_capability must be in [0, 1]")
        if not 0.0 <= self.compile_probability <= 1.0:
            raise ValueError("compile_probability must be in [0, 1]")

    def to_json(self) -> str:
        doc = {
            "task_skill": [repr(float(v)) for v in self.task_skill],
            "meta_capability": repr(float(self.meta_capability)),
            "compile_probability": repr(float(self.compile_probability)),
            "selection_policy": self.selection_policy,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_payload(cls, payload_ref: str | Path) -> "SimulatedAgentGenome":
        raw = json.loads((Path(payload_ref) / "genome.json").read_text(encoding="utf-8"))
        return cls(
            task_skill=[float(v) for v in raw["task_skill"]],
            meta_capability=float(raw["meta_capability"]),
            compile_probability=float(raw["compile_probability"]),
            selection_policy=raw.get("selection_policy"),
        )

    def write_payload(self, payload_ref: str | Path) -> None:
        path = Path(payload_ref)
        path.mkdir(parents=True, exist_ok=True)
        (path / "genome.json").write_text(self.to_json(), encoding="utf-8")


def snapshot_payload(parent_dir: str | Path, child_dir: str | Path) -> None:
    """Copy-on-write style snapshot: hardlink files, write deltas on top."""
    parent = Path(parent_dir)
    child = Path(child_dir)
    child.mkdir(parents=True, exist_ok=True)
    for entry in parent.rglob("*"):
        target = child / entry.relative_to(parent)
        if entry.is_dir():
            target.mkdir(parents=True, exist_ok=True)
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            if not target.exists():
                os.link(entry, target)


def validate_child(
    payload_ref: str | Path,
    smoke_task: str,
    limits: SandboxLimits,
    probe: Evaluator,
) -> tuple[bool, str]:
    """True iff the payload answers one smoke task, well-formed, within limits.

    Failures never raise; they return False plus the logged cause.
    """
    try:
        score = probe(smoke_task, str(payload_ref), limits)
    except Exception as exc:
        cause = f"{type(exc).__name__}: {exc}"
        if "timed out" in str(exc):
            cause = "timeout"
        logger.info("validity check failed for %s: %s", payload_ref, cause)
        return False, cause
    if not isinstance(score, (int, float)) or not np.isfinite(score) or not 0.0 <= score <= 1.0:
        cause = f"malformed answer {score!r}"
        logger.info("validity check failed for %s: %s", payload_ref, cause)
        return False, cause
    return True, "ok"


def _write_validity_log(child_dir: str | Path, compiled: bool, cause: str) -> str:
    path = Path(child_dir).parent / (Path(child_dir).name + ".validity.log")
    path.write_text(f"compiled={compiled}\ncause={cause}\n", encoding="utf-8")
    return str(path)


class SimulatedBackend:
    """Genome mutation on the synthetic fitness surface.

    The modification step draws k candidate points around the parent and
    keeps the best by surface fitness; both the candidate count and the
    reach of the occasional long-range ("bold") draws grow with the acting
    meta capability, so informed exploration is an evolved ability. The
    meta capability itself takes a clipped Gaussian step with a slight
    downward drift when self-improvement is enabled: capability regresses
    unless something retains the rare upward mutations. When
    self-improvement is off, the frozen root genome's value drives step
    quality and children inherit their parent's value untouched.
    """

    def __init__(
        self,
        master_seed: int,
        landscape: TwoPeakLandscape = DEFAULT_LANDSCAPE,
        self_improve: bool = True,
        root_payload_ref: Optional[str] = None,
        evolve_selection_policy: bool = False,
        step_sigma: float = 0.1,
        bold_probability: float = 0.4,
        bold_base: float = 0.25,
        bold_meta_gain: float = 2.5,
        meta_sigma: float = 0.2,
        meta_drift: float = -0.01,
        max_probes: int = 10,
        mutation_scale: float = 1.0,
    ):
        self.master_seed = master_seed
        self.landscape = landscape
        self.self_improve = self_improve
        self.root_payload_ref = root_payload_ref
        self.evolve_selection_policy = evolve_selection_policy
        self.step_sigma = step_sigma
        self.bold_probability = bold_probability
        self.bold_base = bold_base
        self.bold_meta_gain = bold_meta_gain
        self.meta_sigma = meta_sigma
        self.meta_drift = meta_drift
        self.max_probes = max_probes
        self.mutation_scale = mutation_scale
        self._root_meta: Optional[float] = None

    def _acting_meta(self, parent: SimulatedAgentGenome) -> float:
        if self.self_improve:
            return parent.meta_capability
        if self._root_meta is None:
            if self.root_payload_ref is None:
                raise GenerationError("no-self-improve backend needs the root payload")
            self._root_meta = SimulatedAgentGenome.from_payload(
                self.root_payload_ref
            ).meta_capability
        return self._root_meta

    def generate(self, request: GenerationRequest) -> GenerationResult:
        start = time.monotonic()
        rng = substream(self.master_seed, request.rng_stream_id)
        parent = SimulatedAgentGenome.from_payload(request.parent_payload_ref)
        meta_acting = self._acting_meta(parent)

        compiles = bool(rng.random() < parent.compile_probability)
        scale = self.step_sigma * self.mutation_scale
        if rng.random() < self.bold_probability:
            # occasional long-range draw; reach grows with the acting meta
            # capability, so informed exploration is an evolved ability
            scale = (self.bold_base + self.bold_meta_gain * meta_acting) * self.mutation_scale
        probes = max(1, 1 + int(meta_acting * (self.max_probes - 1)))
        skill = np.asarray(parent.task_skill, dtype=float)
        candidates = skill + scale * rng.normal(0.0, 1.0, size=(probes, skill.size))
        best = max(range(probes), key=lambda i: self.landscape.fitness(candidates[i]))
        child_skill = candidates[best]

        if self.self_improve:
            # drifts down on average: capability regresses unless selection
            # keeps rediscovered improvements alive
            meta_step = (
                rng.normal(0.0, 1.0) * self.meta_sigma + self.meta_drift
            ) * self.mutation_scale
            child_meta = float(np.clip(parent.meta_capability + meta_step, 0.0, 1.0))
        else:
            child_meta = parent.meta_capability

        policy = parent.selection_policy
        if self.evolve_selection_policy:
            policy = _mutate_policy_spec(policy, rng)

        child_dir = Path(request.child_payload_ref)
        snapshot_payload(request.parent_payload_ref, child_dir)
        genome_path = child_dir / "genome.json"
        if genome_path.exists():
            genome_path.unlink()  # break the hardlink before writing the delta
        if compiles:
            child = SimulatedAgentGenome(
                task_skill=[float(v) for v in child_skill],
                meta_capability=child_meta,
                compile_probability=parent.compile_probability,
                selection_policy=policy,
            )
            child.write_payload(child_dir)
        else:
            genome_path.write_text("{broken payload", encoding="utf-8")

        return GenerationResult(
            child_payload_ref=str(child_dir),
            compiled=False,  # settled by generate_child via validate_child
            validity_log="",
            wall_time=time.monotonic() - start,
        )

    def selection_policy_of(self, payload_ref: str) -> SelectionPolicy:
        """Selection routine carried by an agent payload; raises when absent/invalid."""
        genome = SimulatedAgentGenome.from_payload(payload_ref)
        return policy_from_spec(genome.selection_policy)


def policy_from_spec(spec: Optional[dict]) -> SelectionPolicy:
    if not isinstance(spec, dict):
        raise ValueError(f"no usable selection policy: {spec!r}")
    variant = spec["variant"]
    if variant == "score-child-prop":
        params = ScoreChildPropParams(
            sharpness=float(spec.get("sharpness", 10.0)),
            midpoint_pool_size=int(spec.get("midpoint_pool_size", 3)),
        )
        return SelectionPolicy(variant=variant, params=params)
    return SelectionPolicy(
        variant=variant,
        temperature=float(spec.get("temperature", 1.0)),
        exploration_weight=float(spec.get("exploration_weight", 1.0)),
        stagnation_boost=bool(spec.get("stagnation_boost", False)),
    )


def _mutate_policy_spec(spec: Optional[dict], rng: np.random.Generator) -> Optional[dict]:
    if rng.random() >= 0.25:
        return spec
    variant = ["uniform-random", "softmax", "ucb", "score-child-prop"][int(rng.integers(4))]
    if variant == "softmax":
        return {"variant": variant, "temperature": float(0.05 + rng.random())}
    if variant == "ucb":
        return {
            "variant": variant,
            "exploration_weight": float(rng.random() * 2.0),
            "stagnation_boost": bool(rng.random() < 0.5),
        }
    if variant == "score-child-prop":
        return {
            "variant": variant,
            "sharpness": float(1.0 + rng.random() * 19.0),
            "midpoint_pool_size": int(rng.integers(1, 6)),
        }
    return {"variant": variant}


class ExternalProcessBackend:
    """Child generation via a configured command running inside the sandbox.

    The command receives one JSON request on stdin (parent payload locator,
    output locator for the child payload, evaluation results locator,
    iterations left, substream id) and must populate the child directory
    before exiting 0.
    """

    def __init__(self, argv: Sequence[str], limits: SandboxLimits):
        if not argv:
            raise ValueError("generation command must be non-empty")
        self.argv = tuple(argv)
        self.limits = limits

    def generate(self, request: GenerationRequest) -> GenerationResult:
        start = time.monotonic()
        Path(request.child_payload_ref).mkdir(parents=True, exist_ok=True)
        doc = {
            "parent_payload_ref": request.parent_payload_ref,
            "child_payload_ref": request.child_payload_ref,
            "eval_results_ref": request.eval_results_ref,
            "iterations_left": request.iterations_left,
            "rng_stream_id": request.rng_stream_id,
        }
        try:
            outcome = sandbox_execute(
                self.argv, self.limits, stdin_data=json.dumps(doc).encode("utf-8")
            )
        except SandboxSpawnError as exc:
            raise GenerationError(str(exc)) from exc
        wall = time.monotonic() - start
        if outcome.timed_out or outcome.exit_status != 0:
            breach = "timeout" if outcome.timed_out else f"exit {outcome.exit_status}"
            log = _write_validity_log(request.child_payload_ref, False, breach)
            return GenerationResult(request.child_payload_ref, False, log, wall)
        return GenerationResult(request.child_payload_ref, False, "", wall)

    def selection_policy_of(self, payload_ref: str) -> SelectionPolicy:
        spec_path = Path(payload_ref) / "selection_policy.json"
        return policy_from_spec(json.loads(spec_path.read_text(encoding="utf-8")))


class ModelClientBackend:
    """Child generation through one HTTPS request per child.

    One request carries the parent payload bundle, evaluation summaries,
    the remaining iteration budget, and instruction text; the response
    returns the child payload as a file bundle which is materialized at
    the requested location. The endpoint URL and the bearer-token
    environment variable name come from configuration. When an
    instruction template is configured (fixed-instruction mode), an
    instruction-generation request is sent first and its output becomes
    the modification request's instruction text.
    """

    def __init__(
        self,
        url: str,
        token_env: str = "EVOARCHIVE_TOKEN",
        instruction_template: Optional[str] = None,
        transport: Optional[Callable[[dict], dict]] = None,
        timeout: float = 120.0,
    ):
        self.url = url
        self.token_env = token_env
        self.instruction_template = instruction_template
        self.transport = transport or self._http_post
        self.timeout = timeout

    def _http_post(self, document: dict) -> dict:
        token = os.environ.get(self.token_env, "")
        request = urllib.request.Request(
            self.url,
            data=json.dumps(document).encode("utf-8"),
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {token}",
            },
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                return json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, ValueError) as exc:
            raise GenerationError(f"model client request failed: {exc}") from exc

    @staticmethod
    def _bundle(payload_ref: str) -> dict[str, str]:
        root = Path(payload_ref)
        return {
            str(p.relative_to(root)): p.read_text(encoding="utf-8")
            for p in sorted(root.rglob("*"))
            if p.is_file()
        }

    def generate(self, request: GenerationRequest) -> GenerationResult:
        start = time.monotonic()
        instruction = "Modify any part of the agent payload to improve it."
        if self.instruction_template is not None:
            instruction_doc = {
                "kind": "instruction-generation",
                "template": self.instruction_template,
                "parent_payload": self._bundle(request.parent_payload_ref),
                "eval_results_ref": request.eval_results_ref,
            }
            generated = self.transport(instruction_doc)
            instruction = generated.get("instruction", instruction)
        doc = {
            "kind": "modification",
            "parent_payload": self._bundle(request.parent_payload_ref),
            "eval_results_ref": request.eval_results_ref,
            "iterations_left": request.iterations_left,
            "instruction": instruction,
        }
        response = self.transport(doc)
        child_dir = Path(request.child_payload_ref)
        child_dir.mkdir(parents=True, exist_ok=True)
        try:
            bundle = response["child_payload"]
            for rel, content in bundle.items():
                target = child_dir / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_text(content, encoding="utf-8")
        except (KeyError, TypeError, AttributeError) as exc:
            log = _write_validity_log(child_dir, False, f"malformed response: {exc}")
            return GenerationResult(str(child_dir), False, log, time.monotonic() - start)
        return GenerationResult(str(child_dir), False, "", time.monotonic() - start)

    def selection_policy_of(self, payload_ref: str) -> SelectionPolicy:
        spec_path = Path(payload_ref) / "selection_policy.json"
        return policy_from_spec(json.loads(spec_path.read_text(encoding="utf-8")))


def generate_child(
    backend,
    request: GenerationRequest,
    smoke_probe: Evaluator,
    limits: SandboxLimits,
) -> GenerationResult:
    """Run the backend, then settle the compiled flag via the validity check."""
    result = backend.generate(request)
    if result.validity_log:
        # the backend already recorded a breach; the child stays non-compiled
        result.compiled = False
        return result
    ok, cause = validate_child(result.child_payload_ref, SMOKE_TASK, limits, smoke_probe)
    result.compiled = ok
    result.validity_log = _write_validity_log(result.child_payload_ref, ok, cause)
    return result
