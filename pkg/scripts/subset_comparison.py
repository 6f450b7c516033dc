#!/usr/bin/env python3
"""Informational study: single network vs a k-pod model on a small training
subset, repeated over several seed triplets. Reports best eval top-1 per run
plus group means; asserts nothing.

With --data it uses the binary-format CIFAR-10 directory; --synthetic runs a
desk-scale substitute (Gaussian-blob images) when the real dataset is not
available. Accuracy numbers from the substitute say nothing about benchmark
accuracy; they only exercise the same comparison machinery end to end.
"""

import argparse
import dataclasses
import sys
import time

import numpy as np

from multipod.data import AugmentationSpec, load_cifar10, synthetic_dataset
from multipod.models import (APPROACH1, MultiPodSpec, build_multipod,
                             count_params, resnet_cifar)
from multipod.training import TrainingSchedule, train


def milestones_for(epochs):
    ms = sorted({int(epochs * 0.5), int(epochs * 0.85)})
    return tuple(m for m in ms if 0 < m < epochs)


def build_setting(args):
    if args.data:
        train_full, test = load_cifar10(args.data)
        order = np.random.default_rng(0).permutation(len(train_full))
        subset = train_full.subset(order[:args.subset])
        aug = AugmentationSpec(pad=4, crop_size=32, hflip_prob=0.5, seed=0)
        base = resnet_cifar(args.n)
        classes = 10
        return subset, test, aug, base, classes
    samples = args.subset
    data = synthetic_dataset(10, samples + args.eval_samples, 16, seed=1)
    subset = data.subset(np.arange(samples))
    test = data.subset(np.arange(samples, samples + args.eval_samples))
    aug = AugmentationSpec(pad=2, crop_size=16, hflip_prob=0.5, seed=0,
                           mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
    base = resnet_cifar(args.n)
    return subset, test, aug, base, 10


def run_one(label, spec, train_batch, eval_batch, sched, aug):
    model = build_multipod(spec)
    t0 = time.time()
    result = train(model, train_batch, eval_batch, sched, aug)
    print(f"    {label}: best top1 {result.best_top1:.4f} "
          f"({count_params(spec):,} params, {time.time() - t0:.0f}s)", flush=True)
    return result.best_top1


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", help="directory with the binary dataset files")
    source.add_argument("--synthetic", action="store_true",
                        help="use the desk-scale synthetic substitute")
    parser.add_argument("--subset", type=int, default=None,
                        help="training subset size (default 5000 real, 256 synthetic)")
    parser.add_argument("--eval-samples", type=int, default=128,
                        help="synthetic eval set size")
    parser.add_argument("--epochs", type=int, default=None,
                        help="default 30 real, 20 synthetic")
    parser.add_argument("--batch-size", type=int, default=None,
                        help="default 128 real, 32 synthetic")
    parser.add_argument("--n", type=int, default=None,
                        help="blocks per stage (default 3 real, 1 synthetic)")
    parser.add_argument("--pods", type=int, default=3)
    parser.add_argument("--triplets", type=int, default=3,
                        help="number of seed groups to average over")
    args = parser.parse_args()
    if args.subset is None:
        args.subset = 5000 if args.data else 256
    if args.epochs is None:
        args.epochs = 30 if args.data else 20
    if args.batch_size is None:
        args.batch_size = 128 if args.data else 32
    if args.n is None:
        args.n = 3 if args.data else 1

    train_batch, eval_batch, aug, base, classes = build_setting(args)
    sched = TrainingSchedule(base_lr=0.1, milestones=milestones_for(args.epochs),
                             epochs=args.epochs, batch_size=args.batch_size)
    print(f"{len(train_batch)} train / {len(eval_batch)} eval samples, "
          f"{args.epochs} epochs, milestones {sched.milestones}, "
          f"{args.pods}-pod vs single, base n={base.n}")
    if args.synthetic:
        print("note: synthetic substitute; numbers are not benchmark accuracy")

    singles = []
    multis = []
    for t in range(args.triplets):
        seeds = tuple(range(args.pods * t, args.pods * (t + 1)))
        print(f"  seed group {t}: seeds {seeds}")
        aug_t = dataclasses.replace(aug, seed=1000 + t)
        single = MultiPodSpec(pods=1, base=base, fusion=APPROACH1,
                              classes=classes, seeds=(seeds[0],))
        multi = MultiPodSpec(pods=args.pods, base=base, fusion=APPROACH1,
                             classes=classes, seeds=seeds)
        singles.append(run_one("single ", single, train_batch, eval_batch, sched, aug_t))
        multis.append(run_one(f"{args.pods}-pod ", multi, train_batch, eval_batch,
                              sched, aug_t))

    def stats(xs):
        return float(np.mean(xs)), float(np.std(xs))

    s_mean, s_std = stats(singles)
    m_mean, m_std = stats(multis)
    print(f"single: mean best top1 {s_mean:.4f} (std {s_std:.4f})")
    print(f"{args.pods}-pod: mean best top1 {m_mean:.4f} (std {m_std:.4f})")
    print(f"gap ({args.pods}-pod minus single): {m_mean - s_mean:+.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
