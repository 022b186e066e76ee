"""Operator entry point: launch/resume runs, inspect archives, export metrics.

Exit codes: 0 success, 1 runtime failure (state stays resumable),
2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import archive as archive_mod
from . import engine, metrics
from .config import (
    ConfigError,
    config_hash,
    demo_config,
    effective_config_doc,
    load_config,
    parse_config,
)
from .evaluation import node_selection_score
from .rng import substream

ANALYZE_METRICS = ("impk", "transfer", "ci", "progress", "tree")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evoarchive")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="start a run from a config file")
    run_p.add_argument("--config", required=True, help="path to the run config JSON")
    run_p.add_argument("--seed", type=int, default=None, help="override the master seed")
    run_p.add_argument("--mode", default=None, help="override the algorithm mode")
    run_p.add_argument("--iterations", type=int, default=None, help="override T")
    # selection policy overrides, mirroring the config keys under "policy"
    run_p.add_argument("--policy-variant", default=None)
    run_p.add_argument("--policy-sharpness", type=float, default=None)
    run_p.add_argument("--policy-midpoint-pool-size", type=int, default=None)
    run_p.add_argument("--policy-temperature", type=float, default=None)
    run_p.add_argument("--policy-exploration-weight", type=float, default=None)
    run_p.add_argument("--policy-stagnation-boost", action="store_true", default=None)

    resume_p = sub.add_parser("resume", help="continue an interrupted run")
    resume_p.add_argument("--state", required=True, help="state directory of the run")

    analyze_p = sub.add_parser("analyze", help="export metrics from a finished run")
    analyze_p.add_argument("--state", required=True, help="state directory of the run")
    analyze_p.add_argument("--metric", required=True, choices=ANALYZE_METRICS)
    analyze_p.add_argument("--out", required=True, help="output file path")
    analyze_p.add_argument("--gamma", type=float, default=0.6)
    analyze_p.add_argument("--min-descendants", type=int, default=3)
    analyze_p.add_argument("--resamples", type=int, default=1000)
    analyze_p.add_argument("--level", type=float, default=95.0)
    analyze_p.add_argument("--ci-seed", type=int, default=0)
    analyze_p.add_argument(
        "--impk-variant", choices=("max", "validation-selected"), default="max"
    )

    demo_p = sub.add_parser("demo-config", help="write the built-in demo config")
    demo_p.add_argument("--out", required=True)
    demo_p.add_argument("--state-dir", default="demo_run")
    demo_p.add_argument("--iterations", type=int, default=20)
    demo_p.add_argument("--seed", type=int, default=42)

    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        _, _, raw = load_config(args.config)
        overrides = {"seed": args.seed, "mode": args.mode, "iterations": args.iterations}
        doc = effective_config_doc(raw, overrides)
        policy_overrides = {
            "variant": args.policy_variant,
            "sharpness": args.policy_sharpness,
            "midpoint_pool_size": args.policy_midpoint_pool_size,
            "temperature": args.policy_temperature,
            "exploration_weight": args.policy_exploration_weight,
            "stagnation_boost": args.policy_stagnation_boost,
        }
        if any(v is not None for v in policy_overrides.values()):
            policy = dict(doc.get("policy", {"variant": "score-child-prop"}))
            policy.update({k: v for k, v in policy_overrides.items() if v is not None})
            doc["policy"] = policy
        config, evaluator_specs = parse_config(doc, base_dir=Path(args.config).parent.resolve())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    digest = config_hash(doc)
    config.state_dir.mkdir(parents=True, exist_ok=True)
    (config.state_dir / "config.json").write_text(
        json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    try:
        state = engine.run(
            config, evaluator_specs=evaluator_specs, run_id=digest[:12]
        )
    except engine.EngineError as exc:
        print(f"run halted: {exc}", file=sys.stderr)
        return 1
    print(f"run {state.run_id} complete: {state.iteration} iterations, "
          f"archive size {len(state.archive)}")
    return 0


def _cmd_resume(args: argparse.Namespace) -> int:
    state_dir = Path(args.state)
    config_path = state_dir / "config.json"
    if not config_path.exists():
        print(f"no config snapshot at {config_path}", file=sys.stderr)
        return 2
    try:
        config, evaluator_specs, raw = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    config.state_dir = state_dir
    if config.payload_dir is None or not Path(config.payload_dir).exists():
        config.payload_dir = state_dir / "payloads"

    state_doc = json.loads((state_dir / "state.json").read_text(encoding="utf-8"))
    expected = config_hash(raw)[:12]
    if state_doc["run_id"] != expected:
        print(
            f"refusing to resume: config hash {expected} does not match "
            f"recorded run id {state_doc['run_id']}",
            file=sys.stderr,
        )
        return 2
    if state_doc["completed"]:
        print("run already completed; nothing to resume")
        return 0
    try:
        state = engine.resume(config, evaluator_specs=evaluator_specs)
    except engine.EngineError as exc:
        print(f"resume halted: {exc}", file=sys.stderr)
        return 1
    print(f"run {state.run_id} complete: {state.iteration} iterations, "
          f"archive size {len(state.archive)}")
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    state_dir = Path(args.state)
    out = Path(args.out)
    if not state_dir.exists():
        print(f"no state directory {state_dir}", file=sys.stderr)
        return 2
    try:
        arch = archive_mod.load(state_dir / "archive")
    except archive_mod.ArchiveLoadError as exc:
        print(f"corrupt state: {exc}", file=sys.stderr)
        return 1

    if args.metric == "tree":
        metrics.export_tree_dot(arch, out)
    elif args.metric == "progress":
        series = metrics.progress_series(state_dir / "events.jsonl")
        metrics.export_progress_csv(series, out)
    elif args.metric == "transfer":
        params = metrics.GrowthScoreParams(
            gamma=args.gamma, min_descendants=args.min_descendants
        )
        try:
            node_id = metrics.transfer_select(arch, params)
        except ValueError as exc:
            print(f"transfer selection failed: {exc}", file=sys.stderr)
            return 1
        metrics.export_scalars_csv(
            [{
                "selected_node": node_id,
                "growth_score": repr(metrics.growth_score(arch, node_id, params)),
                "gamma": args.gamma,
                "min_descendants": args.min_descendants,
            }],
            out,
        )
    elif args.metric == "ci":
        samples = [node_selection_score(n) for n in arch]
        rng = substream(args.ci_seed, "cli/ci")
        median, lower, upper = metrics.bootstrap_ci(
            samples, rng, resamples=args.resamples, level=args.level
        )
        metrics.export_scalars_csv(
            [{"median": repr(median), "lower": repr(lower), "upper": repr(upper),
              "samples": len(samples), "resamples": args.resamples, "level": args.level}],
            out,
        )
    elif args.metric == "impk":
        row = _impk_row(arch, args.impk_variant)
        if row is None:
            return 1
        metrics.export_scalars_csv([row], out)
    print(f"wrote {out}")
    return 0


def _impk_row(arch: archive_mod.Archive, variant: str) -> dict | None:
    root = arch.node(0)
    generated = [n for n in arch if n.id != 0]
    if variant == "max":
        initial = node_selection_score(root)
        request = metrics.ImpAtKRequest(
            initial_score=initial,
            generated_scores=tuple(node_selection_score(n) for n in generated),
            k=max(1, len(generated)),
        )
        return {
            "variant": "max",
            "initial_score": repr(initial),
            "improvement_at_k": repr(metrics.improvement_at_k(request)),
            "k": request.k,
        }
    # validation-selected: argmax by validation score, report the test delta
    def mean_of(node, field):
        values = [getattr(s, field) for s in node.scores.values()]
        if any(v is None for v in values):
            return None
        return sum(values) / len(values)

    candidates = [(n, mean_of(n, "validation")) for n in generated]
    candidates = [(n, v) for n, v in candidates if v is not None]
    if not candidates:
        print("no validation scores recorded; cannot select by validation", file=sys.stderr)
        return None
    best = max(candidates, key=lambda pair: (pair[1], -pair[0].id))[0]
    best_test = mean_of(best, "test")
    root_test = mean_of(root, "test")
    if best_test is None or root_test is None:
        print("no test scores recorded; cannot report a test delta", file=sys.stderr)
        return None
    return {
        "variant": "validation-selected",
        "selected_node": best.id,
        "initial_test": repr(root_test),
        "selected_test": repr(best_test),
        "improvement": repr(best_test - root_test),
    }


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "resume":
        return _cmd_resume(args)
    if args.command == "analyze":
        return _cmd_analyze(args)
    if args.command == "demo-config":
        doc = demo_config(args.state_dir, args.iterations, args.seed)
        Path(args.out).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
