"""Command-line interface for the rank-allocation pipeline.

Every command reads all of its inputs into memory first, then claims the
output directory, then writes. Output directories are append-only: a command
refuses to touch a non-empty directory unless --force is given, in which
case the directory is replaced wholesale. Exit codes: 0 success, 1 usage,
2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import time
from dataclasses import replace

from . import io as artifact_io
from . import workflow
from .errors import ConfigError, LorashapError
from .lora import allocation_from_scores, prune_to_allocation
from .rng import derive_seed
from .scoring import seed_stability
from .tasks import SPLITS
from .workflow import PipelineConfig


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1
        raise _UsageError(message)


def _claim_out_dir(path: str, force: bool) -> None:
    """Create the output directory; a non-empty one needs --force to replace."""
    if os.path.isfile(path):
        raise _UsageError(f"output path {path!r} is a file")
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise _UsageError(f"output directory {path!r} is not empty; pass --force to replace it")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def _load_config_arg(path: str | None) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
        cfg.validate()
        return cfg
    return artifact_io.load_config(path)


def _print_allocation(alloc) -> None:
    for mid in sorted(alloc.counts, key=lambda m: m.key()):
        print(f"  {mid} = {alloc.counts[mid]}")
    print(f"  total = {alloc.total_kept}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_pipeline(args) -> int:
    cfg = _load_config_arg(args.config)
    _claim_out_dir(args.out, args.force)
    report = workflow.run_pipeline(cfg, out_dir=args.out)
    print(f"budget: {cfg.r_init_total} -> {report.allocation.total_kept} ranks")
    print(f"dev_loss:  {report.metrics['dev_loss']:.6f}")
    print(f"test_loss: {report.metrics['test_loss']:.6f}")
    print(f"wall_clock: stage1 {report.wall_clock['stage1_seconds']:.1f}s, "
          f"stage2 {report.wall_clock['stage2_seconds']:.1f}s")
    print(f"artifacts: {args.out}")
    return 0


def _cmd_stage1(args) -> int:
    cfg = _load_config_arg(args.config)
    _claim_out_dir(args.out, args.force)
    data = workflow.generate_task(cfg)
    result = workflow.stage1_allocate(cfg, data)
    artifact_io.save_config(cfg, os.path.join(args.out, "config.json"))
    artifact_io.write_curves_csv(result.curves, os.path.join(args.out, "stage1_curves.csv"))
    artifact_io.write_importance_csv(result.report, os.path.join(args.out, "importance.csv"))
    artifact_io.write_allocation(result.allocation, os.path.join(args.out, "allocation.txt"))
    artifact_io.save_checkpoint(result.model, os.path.join(args.out, "stage1_checkpoint.json"))
    print("allocation:")
    _print_allocation(result.allocation)
    print(f"artifacts: {args.out}")
    return 0


def _cmd_stage2(args) -> int:
    cfg = artifact_io.load_config(os.path.join(args.run, "config.json"))
    alloc = artifact_io.read_allocation(os.path.join(args.run, "allocation.txt"))
    out = args.out if args.out is not None else args.run
    if os.path.abspath(out) != os.path.abspath(args.run):
        _claim_out_dir(out, args.force)
        artifact_io.save_config(cfg, os.path.join(out, "config.json"))
        artifact_io.write_allocation(alloc, os.path.join(out, "allocation.txt"))
    else:
        for name in ("stage2_curves.csv", "summary.json", "stage2_checkpoint.json"):
            if os.path.exists(os.path.join(out, name)) and not args.force:
                raise _UsageError(f"{name} already exists in {out!r}; pass --force to overwrite")
    data = workflow.generate_task(cfg)
    t0 = time.perf_counter()
    model, metrics, curves = workflow.stage2_retrain(alloc, cfg, data)
    elapsed = time.perf_counter() - t0
    artifact_io.write_curves_csv(curves, os.path.join(out, "stage2_curves.csv"))
    artifact_io.write_json({"metrics": metrics,
                            "wall_clock": {"stage2_seconds": elapsed},
                            "allocation_total": alloc.total_kept,
                            "allocation_meta": alloc.meta},
                           os.path.join(out, "summary.json"))
    artifact_io.save_checkpoint(model, os.path.join(out, "stage2_checkpoint.json"))
    print(f"dev_loss:  {metrics['dev_loss']:.6f}")
    print(f"test_loss: {metrics['test_loss']:.6f}")
    print(f"artifacts: {out}")
    return 0


def _cmd_score(args) -> int:
    cfg = _load_config_arg(args.config)
    if args.method is not None:
        cfg = replace(cfg, scoring_method=args.method)
    if args.split is not None:
        cfg = replace(cfg, scoring_split=args.split)
    cfg.validate()
    model = artifact_io.load_checkpoint(args.checkpoint, expected_config=cfg.model)
    _claim_out_dir(args.out, args.force)
    data = workflow.generate_task(cfg)
    report = workflow.score_model(model, cfg, data)
    artifact_io.write_importance_csv(report, os.path.join(args.out, "importance.csv"))
    print(f"method={report.method} split={report.split} coalitions={report.n_coalitions}")
    for rid, score in sorted(report.scores.items(), key=lambda kv: -kv[1])[:10]:
        print(f"  {rid}  {score:.6g}")
    print(f"artifacts: {args.out}")
    return 0


def _cmd_prune(args) -> int:
    model = artifact_io.load_checkpoint(args.checkpoint)
    report = artifact_io.read_importance_csv(args.scores)
    alloc = allocation_from_scores(report, args.target)
    _claim_out_dir(args.out, args.force)
    prune_to_allocation(model, alloc)
    artifact_io.write_allocation(alloc, os.path.join(args.out, "allocation.txt"))
    artifact_io.save_checkpoint(model, os.path.join(args.out, "pruned_checkpoint.json"))
    print("pruned allocation:")
    _print_allocation(alloc)
    print(f"artifacts: {args.out}")
    return 0


def _cmd_oracle(args) -> int:
    _claim_out_dir(args.out, args.force)
    study = workflow.exact_shapley_study(seed=args.seed)
    rows = ["layer,kind,rank_index,exact_shapley,sensitivity"]
    for rid, exact, sens in zip(study["ranks"], study["exact"], study["sensitivity"]):
        rows.append(f"{rid.module.layer},{rid.module.kind},{rid.index},{exact!r},{sens!r}")
    artifact_io.write_text("\n".join(rows) + "\n", os.path.join(args.out, "oracle.csv"))
    for line in rows:
        print(line)
    print(f"spearman(exact, sensitivity) = {study['spearman']:.4f}")
    print(f"artifacts: {args.out}")
    return 0


def _cmd_stability(args) -> int:
    if args.seeds < 2:
        raise _UsageError("--seeds must be at least 2")
    cfg = _load_config_arg(args.config)
    _claim_out_dir(args.out, args.force)
    data = workflow.generate_task(cfg)
    model = workflow.build_model(cfg.model, cfg.seed_for("model"))
    workflow.attach_lora(model, cfg.r_init, cfg.seed_for("lora-stage1"))
    stage1_cfg = replace(cfg.stage1, seed=derive_seed(cfg.seed, "train-stage1", cfg.stage1.seed))
    model, _ = workflow.train(model, data, stage1_cfg)
    plan_seeds = [derive_seed(cfg.seed, "stability-plan", i) for i in range(args.seeds)]
    reports, matrix = seed_stability(model, data, cfg.scoring_split, plan_seeds,
                                     cfg.mask_rates, cfg.mask_repeats,
                                     batch_size=cfg.scoring_batch_size,
                                     n_batches=cfg.scoring_batches)
    header = "," + ",".join(f"seed_{i}" for i in range(args.seeds))
    lines = [header]
    for i in range(args.seeds):
        lines.append(f"seed_{i}," + ",".join(repr(float(v)) for v in matrix[i]))
    artifact_io.write_text("\n".join(lines) + "\n", os.path.join(args.out, "stability.csv"))
    for i, report in enumerate(reports):
        artifact_io.write_importance_csv(
            report, os.path.join(args.out, f"importance_seed_{i}.csv"))
    print("pairwise Spearman:")
    for line in lines:
        print("  " + line)
    print(f"artifacts: {args.out}")
    return 0


def _cmd_budget_sweep(args) -> int:
    cfg = _load_config_arg(args.config)
    try:
        per_module = [int(t) for t in args.targets.split(",") if t.strip()]
    except ValueError as exc:
        raise _UsageError(f"--targets must be comma-separated integers: {exc}")
    if not per_module:
        raise _UsageError("--targets is empty")
    n_modules = 7 * cfg.model.n_layers
    totals = [t * n_modules for t in per_module]
    for t, total in zip(per_module, totals):
        if not 1 <= total <= cfg.r_init_total:
            raise ConfigError(f"target {t} per module = {total} total ranks, "
                              f"outside [1, {cfg.r_init_total}]")
    _claim_out_dir(args.out, args.force)
    data = workflow.generate_task(cfg)
    stage1 = workflow.stage1_allocate(cfg, data)
    artifact_io.save_config(cfg, os.path.join(args.out, "config.json"))
    artifact_io.write_importance_csv(stage1.report, os.path.join(args.out, "importance.csv"))
    rows = []
    for total in totals:
        for method, alloc in (
            ("shapley", allocation_from_scores(stage1.report, total)),
            ("uniform", workflow.uniform_baseline_allocation(replace(cfg, R_target=total))),
        ):
            _, metrics, _ = workflow.stage2_retrain(alloc, cfg, data)
            rows.append({"method": method, "total_ranks": total,
                         "dev_loss": metrics["dev_loss"], "test_loss": metrics["test_loss"]})
            print(f"{method:8s} total={total:4d} dev={metrics['dev_loss']:.6f} "
                  f"test={metrics['test_loss']:.6f}")
    artifact_io.write_sweep_summary(rows, os.path.join(args.out, "sweep_summary.csv"))
    print(f"artifacts: {args.out}")
    return 0


def _cmd_export(args) -> int:
    cfg = _load_config_arg(args.config)
    _claim_out_dir(args.out, args.force)
    data = workflow.generate_task(cfg)
    for split in SPLITS:
        artifact_io.export_dataset_split(data, split, os.path.join(args.out, f"{split}.txt"))
        print(f"wrote {split}: {data.size(split)} samples")
    print(f"artifacts: {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lorashap",
                     description="Shapley-guided LoRA rank allocation on a desk-scale transformer.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="replace a non-empty output directory")
        return p

    p = add("pipeline", _cmd_pipeline, "full stage1 -> score -> prune -> stage2 run")
    p.add_argument("--config", help="pipeline config JSON (omit for defaults)")

    p = add("stage1", _cmd_stage1, "train uniform LoRA, score ranks, emit allocation")
    p.add_argument("--config", help="pipeline config JSON (omit for defaults)")

    p = sub.add_parser("stage2", help="retrain from a run directory's config and allocation")
    p.set_defaults(func=_cmd_stage2)
    p.add_argument("--run", required=True, help="run directory holding config.json and allocation.txt")
    p.add_argument("--out", help="output directory (default: the run directory itself)")
    p.add_argument("--force", action="store_true", help="overwrite existing stage-2 artifacts")

    p = add("score", _cmd_score, "score the ranks of a trained checkpoint")
    p.add_argument("--checkpoint", required=True, help="model checkpoint to score")
    p.add_argument("--config", help="pipeline config JSON (omit for defaults)")
    p.add_argument("--method", choices=["shapley_sensitivity", "plain_sensitivity", "magnitude"])
    p.add_argument("--split", choices=["validation", "train"])

    p = add("prune", _cmd_prune, "prune a checkpoint to a rank budget using saved scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scores", required=True, help="importance CSV from `score` or `stage1`")
    p.add_argument("--target", required=True, type=int, help="total ranks to keep")

    p = add("oracle", _cmd_oracle, "compare sampled sensitivity to exact Shapley values")
    p.add_argument("--seed", type=int, default=0)

    p = add("stability", _cmd_stability, "score one checkpoint under several coalition-plan seeds")
    p.add_argument("--config", help="pipeline config JSON (omit for defaults)")
    p.add_argument("--seeds", type=int, default=3, help="number of plan seeds")

    p = add("budget-sweep", _cmd_budget_sweep, "stage2 at several budgets, shapley vs uniform")
    p.add_argument("--config", help="pipeline config JSON (omit for defaults)")
    p.add_argument("--targets", required=True,
                   help="comma-separated per-module average ranks, e.g. 1,2,4")

    p = add("export", _cmd_export, "write the generated dataset splits as text")
    p.add_argument("--config", help="pipeline config JSON (omit for defaults)")
    return parser


def run_cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help prints and exits 0
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except LorashapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
