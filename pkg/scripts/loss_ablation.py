"""Half-width student: full distillation loss vs contrastive loss alone.

    python scripts/loss_ablation.py [--split val|test] [--epochs N]
"""

import argparse
from dataclasses import replace

from mope import experiments


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--split", default="val")
    ap.add_argument("--epochs", type=int, default=experiments.STUDENT_TRAINING.epochs)
    args = ap.parse_args()
    cfg = replace(experiments.STUDENT_TRAINING, epochs=args.epochs)
    print("seed  pruned   full     itc-only")
    for seed in experiments.SEEDS:
        run = experiments.train_teacher(seed)
        res = experiments.loss_trial(run, experiments.width_student(run), cfg, args.split)
        print(f"{seed:4d}  {res['pre']:.4f}   {res['full']:.4f}   {res['itc']:.4f}")


if __name__ == "__main__":
    main()
