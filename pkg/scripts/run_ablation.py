"""Run the collaboration-flag ablation ladder over several seeds.

Each seed trains (or reuses) one checkpoint per ladder row, evaluates the
ladder, and the per-seed tables are averaged into ablation_mean.csv.
"""

import argparse
import csv
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from viewfuse.cli import main as vf


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    base = ["--config", args.config] if args.config else []
    per_seed = []
    for seed in args.seeds:
        out = os.path.join(args.out, f"s{seed}")
        cmd = base + ["--seed", str(seed), "--out", out, "--train-missing"]
        if args.steps is not None:
            cmd += ["--steps", str(args.steps)]
        rc = vf(["ablate"] + cmd)
        if rc != 0:
            return rc
        per_seed.append(read_rows(os.path.join(out, "ablation.csv")))

    header, first = per_seed[0]
    labels = [r[0] for r in first]
    print(f"\nmeans over seeds {args.seeds}")
    print(f"{'variant':<16} {'ap30':>8} {'ap50':>8} {'ap70':>8} "
          f"{'comm_log2':>10}")
    out_rows = [header]
    for i, label in enumerate(labels):
        cols = []
        for c in range(1, len(header)):
            vals = [float(rows[i][c]) if rows[i][c] != "" else None
                    for _, rows in per_seed]
            cols.append(None if vals[0] is None
                        else sum(vals) / len(vals))
        ap30, ap50, ap70, comm, nbytes = cols
        comm_s = f"{comm:10.2f}" if comm is not None else f"{'-':>10}"
        print(f"{label:<16} {ap30:8.4f} {ap50:8.4f} {ap70:8.4f} {comm_s}")
        out_rows.append([label] + [
            "" if v is None else f"{v:.6f}" for v in cols])
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation_mean.csv"), "w", newline="",
              encoding="utf-8") as f:
        csv.writer(f, lineterminator="\n").writerows(out_rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
