"""How many ring-enabled conv stages does adaptation actually need?

Rings can be enabled on the first 5, 11, or all 17 conv stages of the stock
recognizer.  Fewer ring layers mean fewer per-speaker parameters — and at tiny
budgets that smaller capacity can even win, while larger budgets reward the
full set.  This script sweeps preset x budget on a small synthetic setup and
prints the mean-accuracy grid; read each row left to right to see the budget
effect, and compare rows at the largest budget to see the capacity effect.
"""

import argparse

from padapt import DataConfig, build_model, generate, pretrain, standard_config
from padapt.harness import DEFAULT_PRESETS, ablation_grid


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=24, help="pretraining epochs")
    parser.add_argument("--folds", type=int, default=2)
    parser.add_argument("--jobs", type=int, default=1, help="parallel adaptation workers")
    args = parser.parse_args()

    cfg = DataConfig(
        num_speakers=6, holdout=("s05",), vocab_size=8, clips_per_speaker=32,
        eval_clips_per_speaker=8, adapt_pool=90, test_clips=24,
    )
    split = generate(cfg)
    model = build_model(standard_config(vocab_size=cfg.vocab_size, dtype="f32"))
    print(f"pretraining {args.epochs} epochs on {len(split.train)} clips ...")
    pretrain(model, split.train.clips, split.train.labels, epochs=args.epochs)

    minutes = (1.0, 2.0, 4.0)
    print(f"sweeping presets {DEFAULT_PRESETS} x budgets {minutes} min, "
          f"{args.folds} folds ...\n")
    _, grid = ablation_grid(
        model, split, minutes=minutes, folds=args.folds, jobs=args.jobs
    )
    labels = [f"{m:g}min" for m in minutes]
    print("preset  " + "  ".join(f"{b:>7}" for b in labels))
    for preset in DEFAULT_PRESETS:
        row = "  ".join(f"{grid[(preset, b)]:7.4f}" for b in labels)
        print(f"{preset:6}  {row}")


if __name__ == "__main__":
    main()
