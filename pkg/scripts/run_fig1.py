"""Run the standard-normal design (bias, coverage, power, sampling distribution).

Writes bias.csv, coverage.csv, power.csv, histogram.csv and manifest.yaml.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from selbounds.cli import bundled_spec, load_yaml, parse_experiment_spec
from selbounds.simharness import run_fig1


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/fig1")
    ap.add_argument("--spec", default=None, help="spec file (default: bundled fig1.spec)")
    ap.add_argument("--replicates", type=int, default=None, help="override the replicate count")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    path = Path(args.spec) if args.spec else bundled_spec("fig1")
    _, spec = parse_experiment_spec(load_yaml(path), args.seed, args.threads)
    if args.replicates:
        spec = replace(spec, replicates=args.replicates)
    for f in run_fig1(spec, Path(args.out)):
        print(f)


if __name__ == "__main__":
    main()
