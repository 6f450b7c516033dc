#!/usr/bin/env python3
"""Print exact parameter counts for pod counts 1..4, both fusion approaches,
both base families. Reproduces the reference totals quoted in the README."""

import argparse

from multipod.models import (APPROACH1, APPROACH2, MultiPodSpec,
                             count_base_params, count_params, resnet_cifar,
                             resnet_imagenet)


def table(base, classes, max_k):
    print(f"\nbase family {base.family} (n={base.n}), {classes} classes; "
          f"single base: {count_base_params(base):,} params")
    print(f"{'k':>3}  {'concat head':>14}  {'scale+shared head':>18}")
    for k in range(1, max_k + 1):
        row = []
        for fusion in (APPROACH1, APPROACH2):
            spec = MultiPodSpec(pods=k, base=base, fusion=fusion, classes=classes)
            row.append(count_params(spec))
        print(f"{k:>3}  {row[0]:>14,}  {row[1]:>18,}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--max-k", type=int, default=4)
    parser.add_argument("--n", type=int, default=3,
                        help="blocks per stage for the 32x32 family")
    args = parser.parse_args()
    table(resnet_cifar(args.n), classes=10, max_k=args.max_k)
    table(resnet_imagenet(2), classes=1000, max_k=args.max_k)


if __name__ == "__main__":
    main()
