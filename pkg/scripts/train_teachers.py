"""Train the seed-41/42/43 teachers and save them as checkpoints.

    python scripts/train_teachers.py --out runs/teachers
"""

import argparse
from pathlib import Path

from mope import experiments
from mope.workbench.checkpoint import save_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/teachers")
    ap.add_argument("--seeds", default=",".join(map(str, experiments.SEEDS)))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in map(int, args.seeds.split(",")):
        run = experiments.train_teacher(seed)
        digest = save_checkpoint(run.teacher, out / f"teacher_{seed}.ckpt")
        print(f"seed {seed}: val R@1 {run.val_recall_at_1:.4f}  recall mean {run.val.recall_mean:.4f}  sha256 {digest[:12]}")


if __name__ == "__main__":
    main()
