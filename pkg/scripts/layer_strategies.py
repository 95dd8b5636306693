"""Drop 2 of 4 layers per encoder under each selection strategy, then distill.

    python scripts/layer_strategies.py [--split val|test] [--epochs N]
"""

import argparse
from dataclasses import replace

from mope import experiments

STRATEGIES = ("mope", "every-other", "top-layers", "bottom-layers")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--split", default="val")
    ap.add_argument("--epochs", type=int, default=experiments.STUDENT_TRAINING.epochs)
    args = ap.parse_args()
    cfg = replace(experiments.STUDENT_TRAINING, epochs=args.epochs)
    print("seed  " + "  ".join(f"{s:>13}" for s in STRATEGIES))
    for seed in experiments.SEEDS:
        run = experiments.train_teacher(seed)
        res = experiments.layer_strategy_trial(run, 2, STRATEGIES, cfg, args.split)
        print(f"{seed:4d}  " + "  ".join(f"{res[s]:13.4f}" for s in STRATEGIES))


if __name__ == "__main__":
    main()
