"""Bimodal 1D benchmark: coverage and PINAW of all four methods.

    python scripts/run_uncond1d.py --out runs/uncond1d
    python scripts/run_uncond1d.py --seeds 0 1 2 --set base.epochs=50
"""
import argparse
import logging

from chdqr.config import SuiteConfig, apply_overrides, load_json_config
from chdqr.evaluation import failures, run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/uncond1d")
    ap.add_argument("--seeds", type=int, nargs="+")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    d = apply_overrides(load_json_config("uncond1d"), args.set)
    if args.seeds:
        d["seeds"] = args.seeds
    reports, table = run_suite(SuiteConfig.from_dict(d), args.out, workers=args.workers)
    print(f"{'method':<14} {'alpha':>5} {'coverage':>17} {'PINAW':>17}")
    for r in table:
        print(f"{r['method']:<14} {r['alpha']:>5} "
              f"{r['coverage_mean']:>8.4f} ± {r['coverage_std']:<6.4f} "
              f"{r['pinaw_mean']:>8.4f} ± {r['pinaw_std']:<6.4f}")
    for r in failures(reports):
        print("FAILED", r["method"], r["seed"], r["error"])


if __name__ == "__main__":
    main()
