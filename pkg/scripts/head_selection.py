"""Keep the highest- vs the lowest-scoring half of the heads, no retraining."""

from mope import experiments


def main():
    wins = 0
    print("seed  top-heads  bottom-heads")
    for seed in experiments.SEEDS:
        run = experiments.train_teacher(seed)
        top, bottom = experiments.head_selection_trial(run, 0.5)
        wins += top >= bottom
        print(f"{seed:4d}  {top:.4f}     {bottom:.4f}")
    print(f"top >= bottom in {wins}/{len(experiments.SEEDS)} seeds")


if __name__ == "__main__":
    main()
