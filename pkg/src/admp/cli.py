"""Command line entry point: ``admp <command> [--config PATH] [--seed N] ...``.

Exit status is 0 on success, 2 on configuration or checkpoint errors,
3 on numeric failures and 1 for I/O errors or failed self-checks.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .domdata import export_csv, export_pgm, generate
from .errors import CheckpointError, ConfigError, NumericError
from .harness import (
    _MODE,
    ExperimentConfig,
    emit_metrics,
    load_config,
    run_ablation_grid,
    run_experiment,
)
from .masking import MaskPair
from .micronet import load_checkpoint, save_checkpoint
from .trainer import admp_prune, binariness, finetune, make_evaluator, pretrain_uda

log = logging.getLogger("admp")

COMMANDS = ("pretrain", "prune", "finetune", "run", "ablation", "selftest", "export-data")


def _sparsities(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad sparsity list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="admp", description="Adversarial double-mask pruning on toy domain-shift tasks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "selftest":
            p.add_argument("--full", action="store_true", help="acceptance-sized samples (slower)")
            continue
        p.add_argument("--config", type=Path, help="flat section.key = value file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        if name in ("prune", "finetune", "run", "ablation"):
            p.add_argument("--variant")
            p.add_argument("--sparsity", type=_sparsities)
        if name in ("prune", "finetune"):
            p.add_argument("--teacher", type=Path, help="teacher checkpoint (default: <out>/teacher_seed<N>.json)")
        if name == "finetune":
            p.add_argument("--student", type=Path, help="student checkpoint written by 'prune'")
    return parser


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    if getattr(args, "variant", None):
        changes["variant"] = args.variant
        changes["variants"] = (args.variant,)
    if getattr(args, "sparsity", None):
        changes["sparsities"] = args.sparsity
    return replace(config, **changes) if changes else config


def _single(config: ExperimentConfig):
    seed = config.seeds[0]
    sparsity = config.sparsities[0]
    pair = generate(replace(config.dataset, seed=seed))
    train = replace(config.train, seed=seed, ratio=sparsity)
    if config.variant == "no_clustering":
        train = replace(train, lambda_clu=0.0)
    return seed, sparsity, pair, train, Path(config.out_dir)


def _teacher_path(args, out: Path, seed: int) -> Path:
    return args.teacher or out / f"teacher_seed{seed}.json"


def cmd_pretrain(args) -> int:
    config = _config(args)
    seed, _, pair, train, out = _single(config)
    teacher, metrics = pretrain_uda(train, pair.training_view(), config.network_spec(), make_evaluator(pair, train.margin))
    path = save_checkpoint(teacher, out / f"teacher_seed{seed}.json", extra={"config_hash": config.config_hash()})
    emit_metrics(metrics, out / f"pretrain_seed{seed}.csv")
    print(f"teacher -> {path} (target acc {metrics[-1].target_acc:.4f})" if metrics else f"teacher -> {path}")
    return 0


def cmd_prune(args) -> int:
    config = _config(args)
    if config.variant not in _MODE:
        raise ConfigError(f"'prune' runs only the mask-learning variants {sorted(_MODE)}")
    seed, sparsity, pair, train, out = _single(config)
    teacher = load_checkpoint(_teacher_path(args, out, seed))
    student, masks, metrics, _ = admp_prune(teacher, train, pair.training_view(), make_evaluator(pair, train.margin),
                                            mode=_MODE[config.variant])
    stem = f"student_{config.variant}_sp{sparsity:g}_seed{seed}"
    extra = {"soft": {str(i): s.tolist() for i, s in masks.soft.items()}, "ratio": sparsity, "variant": config.variant}
    path = save_checkpoint(student, out / f"{stem}.json", extra=extra)
    emit_metrics(metrics, out / f"{stem}.csv")
    print(f"student -> {path} (mask binariness {binariness(masks):.4f})")
    return 0


def cmd_finetune(args) -> int:
    config = _config(args)
    seed, sparsity, pair, train, out = _single(config)
    teacher = load_checkpoint(_teacher_path(args, out, seed))
    student_path = args.student or out / f"student_{config.variant}_sp{sparsity:g}_seed{seed}.json"
    student, extra = load_checkpoint(student_path, with_extra=True)
    if "soft" not in extra:
        raise CheckpointError(f"{student_path} carries no soft masks; produce it with 'prune'")
    for p in student.parameters():
        p.requires_grad = True
    masks = MaskPair({int(i): np.array(v) for i, v in extra["soft"].items()}, {})
    train = replace(train, ratio=float(extra.get("ratio", sparsity)))
    net, plan, metrics = finetune(student, masks, train, pair.training_view(), teacher,
                                  make_evaluator(pair, train.margin))
    stem = f"pruned_{config.variant}_sp{train.ratio:g}_seed{seed}"
    path = save_checkpoint(net, out / f"{stem}.json", extra={"plan": plan.to_dict()})
    emit_metrics(metrics, out / f"{stem}.csv")
    print(f"pruned -> {path} ({net.param_count()} parameters, target acc {metrics[-1].target_acc:.4f})")
    return 0


def _print_aggregate(result) -> None:
    for (variant, sp), v in sorted(result.aggregate().items()):
        print(f"{variant:18s} sparsity={sp:<5g} target_acc={v['mean_target_acc']:.4f} +- {v['std_target_acc']:.4f} "
              f"teacher={v['mean_teacher_target_acc']:.4f} seeds={v['n_seeds']}")
    print(f"results in {result.directory}")


def cmd_run(args) -> int:
    _print_aggregate(run_experiment(_config(args)))
    return 0


def cmd_ablation(args) -> int:
    _, result = run_ablation_grid(_config(args))
    _print_aggregate(result)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(full=args.full)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def cmd_export_data(args) -> int:
    config = _config(args)
    seed = config.seeds[0]
    pair = generate(replace(config.dataset, seed=seed))
    out = Path(config.out_dir)
    if config.dataset.kind == "strokes":
        paths = export_pgm(pair, out)
    else:
        paths = [export_csv(pair, out / f"{config.dataset.kind}_seed{seed}.csv")]
    for p in paths:
        print(p)
    return 0


HANDLERS = {"pretrain": cmd_pretrain, "prune": cmd_prune, "finetune": cmd_finetune, "run": cmd_run,
            "ablation": cmd_ablation, "selftest": cmd_selftest, "export-data": cmd_export_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return HANDLERS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
