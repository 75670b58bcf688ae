"""Inject outliers into smooth synthetic boundaries and measure how the GP filter separates them."""

import argparse

import numpy as np

from madl.curb import GprParams, gpr_filter


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sets", type=int, default=200)
    ap.add_argument("--min-offset", type=float, default=0.5, help="smallest outlier displacement, metres")
    ap.add_argument("--noise", type=float, default=0.02)
    ap.add_argument("--k", type=float, default=GprParams().confidence_k)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()
    params = GprParams(confidence_k=args.k)
    rng = np.random.default_rng(args.seed)
    injected = caught = inliers = lost = 0
    for _ in range(args.sets):
        n = int(rng.integers(20, 120))
        x = np.sort(rng.uniform(0, 30, n))
        y = (rng.uniform(3, 5) + rng.uniform(-0.1, 0.1) * x + rng.uniform(0, 0.5) * np.sin(x / rng.uniform(4, 10))
             + rng.normal(0, args.noise, n))
        k = int(rng.integers(1, max(2, n // 10) + 1))
        idx = rng.choice(n, k, replace=False)
        y[idx] += rng.choice([-1.0, 1.0], k) * rng.uniform(args.min_offset, 4 * args.min_offset, k)
        out = np.zeros(n, bool)
        out[idx] = True
        keep = gpr_filter(x, y, params).inliers
        injected += k
        caught += int((~keep[out]).sum())
        inliers += n - k
        lost += int((~keep[~out]).sum())
    print(f"outliers removed {caught}/{injected} ({100 * caught / injected:.1f}%)")
    print(f"inliers removed {lost}/{inliers} ({100 * lost / inliers:.2f}%)")


if __name__ == "__main__":
    main()
