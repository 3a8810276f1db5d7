"""Sweep one factor (csOOD ratio, active unknown classes, lambda weights,
repeated rounds) and report per-method means and the max-min spread.

    python scripts/robustness_sweep.py --axis ratio --values 0.2 0.4 0.6 0.8 1.0
    python scripts/robustness_sweep.py --axis openness --values 1 2 3 4
    python scripts/robustness_sweep.py --axis lambda1 --values 0.1 0.2 0.5 1.0 --methods unient unient_plus
"""

import argparse
import dataclasses

import numpy as np

from unient import adapt, bench, nn
from unient.adapt import AdaptConfig
from unient.cli import SWEEP_AXES

KEYS = ("acc", "auroc", "fpr_at_tpr95", "oscr")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    ap.add_argument("--values", type=float, nargs="+", required=True)
    ap.add_argument("--methods", nargs="+", default=["tent", "unient"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()
    section, key, cast = SWEEP_AXES[args.axis]

    table = {}
    for seed in args.seeds:
        base = bench.BenchmarkConfig(seed=seed)
        pc = nn.PretrainConfig()
        model = nn.pretrain(bench.make_source(base, pc.n_train_per_class), pc, seed=seed)
        for v in map(cast, args.values):
            for m in args.methods:
                bcfg, acfg = base, AdaptConfig(method=m)
                if section == "benchmark":
                    bcfg = dataclasses.replace(base, **{key: v}).validate()
                else:
                    acfg = dataclasses.replace(acfg, **{key: v})
                report, _ = adapt.run_stream(model, bench.stream(bcfg, seed=seed), acfg)
                table.setdefault((m, v), []).append([getattr(report, k) for k in KEYS])
                print(f"seed {seed} {args.axis}={v} {m}: oscr {report.oscr:.2f}")

    print(f"\n{args.axis:<10} {'method':<11} " + "  ".join(f"{k:>12}" for k in KEYS))
    for m in args.methods:
        means = []
        for v in map(cast, args.values):
            mean = np.mean(table[m, v], axis=0)
            means.append(mean)
            print(f"{v!s:<10} {m:<11} " + "  ".join(f"{x:12.2f}" for x in mean))
        spread = np.ptp(np.array(means), axis=0)
        print(f"{'delta':<10} {m:<11} " + "  ".join(f"{x:12.2f}" for x in spread))


if __name__ == "__main__":
    main()
