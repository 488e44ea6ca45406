"""`forge` command line: run pipelines, inspect and validate manifests,
plan batches, and mix task streams.

Exit codes: 0 success, 1 validation failure, 2 stage failure. FORGE_SEED
overrides the config seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pipeline as pl
from . import scheduler
from .records import ManifestError, read_manifest

# forge-run overrides -> (stage operation, parameter name)
_RUN_OVERRIDES = {
    "topk": ("ground", "topk"),
    "tau_sim": ("ground", "tau_sim"),
    "cap": ("ground", "cap"),
    "clusters": ("cluster-report", "clusters"),
    "assessor_threshold": ("filter-assessor", "tau"),
    "face_iou_threshold": ("filter-face-iou", "threshold"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a pipeline config")
    run.add_argument("--config", required=True)
    run.add_argument("--resume", action="store_true")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--topk", type=int, default=None)
    run.add_argument("--tau-sim", dest="tau_sim", type=float, default=None)
    run.add_argument("--cap", type=int, default=None)
    run.add_argument("--clusters", type=int, default=None)
    run.add_argument("--assessor-threshold", dest="assessor_threshold", type=float, default=None)
    run.add_argument("--face-iou-threshold", dest="face_iou_threshold", type=float, default=None)

    stats = sub.add_parser("stats", help="summarize a manifest")
    stats.add_argument("manifest")

    validate = sub.add_parser("validate", help="check every record's invariants")
    validate.add_argument("manifest")

    plan = sub.add_parser("plan", help="bucket items into resolution-exact batches")
    plan.add_argument("--items", required=True, help="JSONL of {id, width, height}")
    plan.add_argument("--pixel-budget", dest="pixel_budget", type=int, required=True)
    plan.add_argument("--seed", type=int, default=0)
    plan.add_argument("--out", required=True)

    mix = sub.add_parser("mix", help="tag a mixed edit/T2I draw sequence")
    mix.add_argument("--edit-ids", dest="edit_ids", required=True, help="text file, one id per line")
    mix.add_argument("--t2i-ids", dest="t2i_ids", required=True)
    mix.add_argument("--t2i-percent", dest="t2i_percent", type=float, required=True)
    mix.add_argument("--edit-percent", dest="edit_percent", type=float, required=True)
    mix.add_argument("--count", type=int, required=True)
    mix.add_argument("--seed", type=int, default=0)
    mix.add_argument("--out", required=True)
    return parser


def _apply_overrides(config: pl.PipelineConfig, args) -> pl.PipelineConfig:
    overrides = {}
    for flag, (operation, param) in _RUN_OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(operation, {})[param] = value
    if not overrides and args.seed is None and "FORGE_SEED" not in os.environ:
        return config
    stages = []
    for stage in config.stages:
        params = dict(stage.parameters)
        params.update(overrides.get(stage.operation, {}))
        stages.append(
            pl.StageSpec(stage.name, stage.operation, params, stage.inputs, stage.output)
        )
    seed = config.global_seed
    if "FORGE_SEED" in os.environ:
        seed = int(os.environ["FORGE_SEED"])
    if args.seed is not None:
        seed = args.seed
    return pl.PipelineConfig(tuple(stages), seed, config.parallelism)


def _cmd_run(args) -> int:
    try:
        config = pl.PipelineConfig.from_file(args.config)
        config = _apply_overrides(config, args)
        pl.validate_config(config)
    except (OSError, json.JSONDecodeError, pl.ConfigError, ValueError) as exc:
        print(f"forge: config error: {exc}", file=sys.stderr)
        return 1
    try:
        reports = pl.run_pipeline(config, resume=args.resume, workers=args.workers)
    except (pl.StageError, ManifestError) as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 2
    for report in reports:
        status = "skipped" if report.skipped else f"{report.wall_time:.2f}s"
        c = report.counts
        print(
            f"{report.name}: in={c['in']} kept={c['kept']} removed={c['removed']} "
            f"errored={c['errored']} emitted={report.emitted} [{status}]"
        )
        for reason, count in sorted(report.reasons.items()):
            print(f"  - {reason}: {count}")
    return 0


def _cmd_stats(args) -> int:
    try:
        summary = pl.stats(args.manifest)
    except (OSError, ManifestError) as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary.to_dict(), indent=2, ensure_ascii=False))
    return 0


def _cmd_validate(args) -> int:
    try:
        result = pl.validate_manifest(args.manifest)
    except (OSError, ManifestError) as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, ensure_ascii=False))
    return 0 if not result["violations"] else 1


def _cmd_plan(args) -> int:
    items = []
    try:
        with open(args.items, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    items.append((str(row["id"]), int(row["width"]), int(row["height"])))
        plan = scheduler.plan_batches(items, args.pixel_budget, args.seed)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 1
    scheduler.write_plan(plan, args.out)
    print(f"wrote {len(plan.batches)} batches to {args.out}")
    return 0


def _cmd_mix(args) -> int:
    def read_ids(path):
        with open(path, "r", encoding="utf-8") as fh:
            return [line.strip() for line in fh if line.strip()]

    try:
        ratio = scheduler.MixRatio(args.t2i_percent, args.edit_percent)
        assignments = scheduler.mix_tasks(
            read_ids(args.edit_ids), read_ids(args.t2i_ids), ratio, args.count, args.seed
        )
    except (OSError, ValueError, scheduler.StreamExhausted) as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 1
    lines = [
        json.dumps(
            {
                "id": a.id,
                "task": a.task,
                "template": a.template,
                "black_conditioning": a.black_conditioning,
            },
            ensure_ascii=False,
            separators=(",", ":"),
        )
        for a in assignments
    ]
    from .records import write_atomic_text

    write_atomic_text("".join(line + "\n" for line in lines), args.out)
    print(f"wrote {len(lines)} assignments to {args.out}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {
        "run": _cmd_run,
        "stats": _cmd_stats,
        "validate": _cmd_validate,
        "plan": _cmd_plan,
        "mix": _cmd_mix,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
