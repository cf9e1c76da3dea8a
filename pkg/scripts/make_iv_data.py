"""Write a synthetic binary-instrument dataset (reform Z, schooling X, outcome Y).

Selection into the sample depends on the outcome and on a covariate ``d``; ``q`` is
a covariate whose population mean is known (printed at the end).
"""

import argparse
import csv

import numpy as np


def simulate(n_population: int, seed: int):
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, n_population)
    u = rng.normal(size=n_population)
    x = (0.8 * z + 0.5 * u + rng.normal(size=n_population) > 0.4).astype(int)
    y = (0.25 * x + 0.5 * u + rng.normal(size=n_population) > 0.3).astype(int)
    d = rng.integers(0, 5, n_population).astype(float)
    q = x + rng.integers(0, 2, n_population)
    p_sel = 1.0 / (1.0 + np.exp(2.5 - 0.3 * d + 0.8 * y))
    keep = rng.random(n_population) < p_sel
    return dict(z=z, x=x, y=y, d=d, q=q), keep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--population", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    cols, keep = simulate(args.population, args.seed)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(cols))
        for i in np.flatnonzero(keep):
            w.writerow([cols[k][i] for k in cols])
    print(f"rows: {keep.sum()}  response rate: {keep.mean():.4f}  population mean of q: {cols['q'].mean():.4f}")


if __name__ == "__main__":
    main()
