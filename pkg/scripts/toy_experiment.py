#!/usr/bin/env python3
"""Augmentation study on the toy benchmark.

Trains the synthesis models on ground-truth masks, builds an augmented
training set per variant, and compares downstream segmentation against
real-only training over several segmenter seeds. The generated data is
fixed per variant so the seed axis isolates segmenter variance.

Arms: real (no synthesis), full, and the three loss ablations. Reported
per arm: union-region test Dice per seed, mean, std; plus the margin of
every synthesis arm over real.

Example:
    python3 scripts/toy_experiment.py --json results.json
    python3 scripts/toy_experiment.py --quick   # smoke-scale settings
"""

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from geogan.augment import AugmentationPlan, augment_samples
from geogan.data import default_scheme, generate_toy_dataset
from geogan.downstream import DownstreamConfig, segment, train_segmenter
from geogan.gan import GeneratorConfig, train as train_gan
from geogan.metrics import segmentation_report
from geogan.shape_prior import ShapePriorConfig, pretrain_shape_prior

VARIANT_FLAGS = {
    "full": {},
    "no_class": {"use_class_loss": False},
    "no_shape": {"use_shape_loss": False},
    "no_sampling": {"use_sampling": False},
}


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--train-n", type=int, default=200)
    parser.add_argument("--test-n", type=int, default=50)
    parser.add_argument("--data-seed", type=int, default=11)
    parser.add_argument("--steps", type=int, default=600,
                        help="adversarial training steps per variant")
    parser.add_argument("--gan-width", type=int, default=12)
    parser.add_argument("--spb", type=int, default=1,
                        help="synthetic draws per base sample")
    parser.add_argument("--policy", default="preserve",
                        choices=("preserve", "balance"))
    parser.add_argument("--shape-epochs", type=int, default=30)
    parser.add_argument("--seg-epochs", type=int, default=20)
    parser.add_argument("--seg-batch", type=int, default=8)
    parser.add_argument("--seg-width", type=int, default=16)
    parser.add_argument("--seeds", type=int, default=3,
                        help="segmenter seeds per arm")
    parser.add_argument("--variants", default="full,no_class,no_shape,no_sampling")
    parser.add_argument("--json", type=Path, default=None,
                        help="write the result dict to this path")
    parser.add_argument("--quick", action="store_true",
                        help="tiny settings for a fast smoke run")
    args = parser.parse_args()
    if args.quick:
        args.train_n, args.test_n = 24, 8
        args.steps, args.shape_epochs = 40, 4
        args.seg_epochs, args.seeds = 3, 1
    return args


def eval_dice(net, test) -> float:
    preds = [segment(net, s.image) for s in test]
    report = segmentation_report(preds, [s.mask for s in test], 4)
    return report.dice_mean


def seg_arm(samples, test, args, label: str) -> dict:
    """Train the segmenter over the seed axis and evaluate on the test set."""
    dices = []
    for seed in range(args.seeds):
        cfg = DownstreamConfig(epochs=args.seg_epochs, batch=args.seg_batch,
                               width=args.seg_width, seed=seed)
        t0 = time.perf_counter()
        net, _ = train_segmenter(samples, default_scheme(), cfg)
        dice = eval_dice(net, test)
        print(f"  {label} seed {seed}: dice {dice:.4f} "
              f"({time.perf_counter() - t0:.0f}s)", flush=True)
        dices.append(dice)
    return {
        "dice": dices,
        "mean": float(np.mean(dices)),
        "std": float(np.std(dices)),
        "n_train": len(samples),
    }


def main() -> int:
    args = parse_args()
    t_start = time.perf_counter()
    scheme = default_scheme()

    train = generate_toy_dataset(args.train_n, (64, 64), scheme, 0.5,
                                 seed=args.data_seed, id_prefix="train_")
    test = generate_toy_dataset(args.test_n, (64, 64), scheme, 0.5,
                                seed=args.data_seed + 46, id_prefix="test_")
    print(f"data: {len(train)} train / {len(test)} test", flush=True)

    t0 = time.perf_counter()
    prior, _ = pretrain_shape_prior(
        [s.mask for s in train], scheme,
        ShapePriorConfig(epochs=args.shape_epochs, seed=0),
    )
    print(f"arrangement prior: {time.perf_counter() - t0:.0f}s", flush=True)

    results: dict = {"settings": vars(args) | {"json": str(args.json)}}
    results["real"] = seg_arm(train, test, args, "real")

    plan = AugmentationPlan(samples_per_base=args.spb, policy=args.policy,
                            seed=0)
    for variant in args.variants.split(","):
        gcfg = GeneratorConfig(steps=args.steps, width=args.gan_width,
                               seed=0, **VARIANT_FLAGS[variant])
        t0 = time.perf_counter()
        generator, stn, _disc, _state = train_gan(train, prior, scheme, gcfg)
        t_gan = time.perf_counter() - t0
        t0 = time.perf_counter()
        augmented, _rows = augment_samples(
            generator, stn, scheme, train, plan,
            use_sampling=gcfg.use_sampling,
        )
        print(f"{variant}: gan {t_gan:.0f}s, "
              f"{len(augmented) - len(train)} draws "
              f"{time.perf_counter() - t0:.0f}s", flush=True)
        results[variant] = seg_arm(augmented, test, args, variant)

    margins = {
        v: results[v]["mean"] - results["real"]["mean"]
        for v in VARIANT_FLAGS if v in results
    }
    results["margin_over_real"] = margins
    if "full" in results:
        results["ablations_not_above_full"] = {
            v: results[v]["mean"] <= results["full"]["mean"]
            for v in ("no_class", "no_shape", "no_sampling") if v in results
        }
    results["wall_time_s"] = round(time.perf_counter() - t_start, 1)

    print(json.dumps({k: v for k, v in results.items()
                      if k not in ("settings",)}, indent=2))
    if args.json:
        args.json.write_text(json.dumps(results, indent=2))
        print(f"wrote {args.json}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
