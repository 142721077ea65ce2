"""Accuracy-vs-sparsity grid for the four mask-learning variants.

    python3 scripts/run_ablation.py --config configs/moons_hard.cfg

Prints the table and a coarse text plot; CSVs land under the config's out_dir.
"""
import argparse
import logging
from dataclasses import replace

from admp.harness import load_config, run_ablation_grid


def text_plot(table, variants, sparsities, width=40):
    lo = min(table.values())
    hi = max(table.values())
    span = max(hi - lo, 1e-9)
    for sp in sparsities:
        print(f"sparsity {sp:g}")
        for v in variants:
            acc = table[(v, sp)]
            bar = "#" * (1 + int((acc - lo) / span * (width - 1)))
            print(f"  {v:14s} {acc:.4f} {bar}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/moons_hard.cfg")
    parser.add_argument("--seeds", type=int, help="use seeds 0..N-1 instead of the config's")
    parser.add_argument("--out", help="override the output directory")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    config = load_config(args.config)
    if args.seeds:
        config = replace(config, seeds=tuple(range(args.seeds)))
    if args.out:
        config = replace(config, out_dir=args.out)
    table, result = run_ablation_grid(config)
    text_plot(table, config.variants, config.sparsities)
    teacher = next(iter(result.aggregate().values()))["mean_teacher_target_acc"]
    print(f"teacher target accuracy {teacher:.4f}; files in {result.directory}")


if __name__ == "__main__":
    main()
