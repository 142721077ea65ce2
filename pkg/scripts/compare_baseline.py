"""Target-accuracy loss against the teacher: ADMP vs magnitude pruning then adaptation.

    python3 scripts/compare_baseline.py --shifts 30 75 --sparsity 0.5 --seeds 5
"""
import argparse
import logging

import numpy as np

from admp.domdata import DatasetSpec
from admp.harness import ExperimentConfig, TeacherCache, run_ablation_grid


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--shifts", type=float, nargs="+", default=[30.0, 75.0])
    parser.add_argument("--sparsity", type=float, default=0.5)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--out", default="runs/baseline")
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    print(f"{'shift':>6} {'teacher':>8} {'full_admp':>10} {'prune_then_adapt':>17}   (loss vs teacher)")
    for shift in args.shifts:
        config = ExperimentConfig(dataset=DatasetSpec("moons", shift), variants=("full_admp", "prune_then_adapt"),
                                  sparsities=(args.sparsity,), seeds=tuple(range(args.seeds)), out_dir=args.out)
        _, result = run_ablation_grid(config, TeacherCache())
        loss = {}
        for v in config.variants:
            rows = [r for r in result.rows if r.variant == v]
            loss[v] = float(np.mean([r.teacher_target_acc - r.final.target_acc for r in rows]))
        teacher = float(np.mean([r.teacher_target_acc for r in result.rows]))
        print(f"{shift:6g} {teacher:8.4f} {loss['full_admp']:+10.4f} {loss['prune_then_adapt']:+17.4f}")


if __name__ == "__main__":
    main()
