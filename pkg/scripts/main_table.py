"""Method comparison on the default benchmark: mean and std over seeds.

    python scripts/main_table.py --seeds 0 1 2 3 4 --out runs/main_table.csv
"""

import argparse
import csv

import numpy as np

from unient import adapt, bench, nn
from unient.adapt import AdaptConfig

KEYS = ("acc", "auroc", "fpr_at_tpr95", "oscr")


def source_model(seed):
    cfg = bench.BenchmarkConfig(seed=seed)
    pc = nn.PretrainConfig()
    return nn.pretrain(bench.make_source(cfg, pc.n_train_per_class), pc, seed=seed)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--methods", nargs="+", default=list(adapt.METHODS))
    ap.add_argument("--score-kind", default="energy")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    results = {m: [] for m in args.methods}
    for seed in args.seeds:
        model = source_model(seed)
        batches = list(bench.stream(bench.BenchmarkConfig(seed=seed), seed=seed))
        for m in args.methods:
            report, _ = adapt.run_stream(model, batches, AdaptConfig(method=m), score_kind=args.score_kind)
            results[m].append([getattr(report, k) for k in KEYS])
            print(f"seed {seed} {m:<11} " + "  ".join(f"{k} {v:6.2f}" for k, v in zip(KEYS, results[m][-1])))

    print(f"\n{'method':<11} " + "  ".join(f"{k:>15}" for k in KEYS))
    rows = []
    for m, vals in results.items():
        v = np.array(vals)
        mean, std = v.mean(axis=0), v.std(axis=0)
        print(f"{m:<11} " + "  ".join(f"{a:7.2f} +- {s:4.2f}" for a, s in zip(mean, std)))
        rows.append([m, len(vals), *mean.tolist(), *std.tolist()])
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "n_seeds", *KEYS, *(k + "_std" for k in KEYS)])
            w.writerows(rows)


if __name__ == "__main__":
    main()
