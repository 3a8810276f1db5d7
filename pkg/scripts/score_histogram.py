"""Text histogram of the filter's normalized scores on one benchmark batch,
split by ground truth, with the fitted two-component mixture.

    python scripts/score_histogram.py --seed 42 --batch 0
"""

import argparse

import numpy as np

from unient import bench, nn
from unient.filter import SourceFilter


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--batch", type=int, default=0)
    ap.add_argument("--bins", type=int, default=20)
    args = ap.parse_args()

    cfg = bench.BenchmarkConfig(seed=args.seed)
    pc = nn.PretrainConfig()
    model = nn.pretrain(bench.make_source(cfg, pc.n_train_per_class), pc, seed=args.seed)
    for t, batch in enumerate(bench.stream(cfg)):
        if t == args.batch:
            break
    out = SourceFilter(model)(batch.x)
    edges = np.linspace(0, 1, args.bins + 1)
    h_id, _ = np.histogram(out.scores[~batch.is_csood], edges)
    h_ood, _ = np.histogram(out.scores[batch.is_csood], edges)
    print(f"batch {t} {batch.domain_tag}   '#' csID   'o' csOOD")
    for lo, a, b in zip(edges, h_id, h_ood):
        print(f"{lo:4.2f} | {'#' * a}{'o' * b}")
    g = out.gmm
    print(f"csID  mu {g.mu_csid:.3f} sd {np.sqrt(g.var_csid):.3f} w {g.w_csid:.3f}")
    print(f"csOOD mu {g.mu_csood:.3f} sd {np.sqrt(g.var_csood):.3f} w {g.w_csood:.3f}")
    print(f"split: {len(out.csid_idx)} pseudo-csID, {len(out.csood_idx)} pseudo-csOOD")


if __name__ == "__main__":
    main()
