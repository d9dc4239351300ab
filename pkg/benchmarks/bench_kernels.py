"""Compare the numba kernels with their numpy fallbacks.

    python benchmarks/bench_kernels.py --repeat 10 --json out.json
"""
import argparse
import dataclasses
import json

from astroloc.bench import format_results, run_benchmarks


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplier on the problem sizes")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args()
    results = run_benchmarks(args.repeat, args.scale, args.seed)
    print(format_results(results))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([dataclasses.asdict(r) for r in results], fh, indent=2)


if __name__ == "__main__":
    main()
