"""Area of the true highest-density region of the 2D outlier mixture.

Gives the floor that any method's PINAW can approach on this dataset, on the
same normalized scale as ``run_outlier2d.py``. The density threshold is the
alpha-quantile of the density at samples drawn from the mixture; the area
above it is estimated by uniform sampling over the padded data box.
"""
import argparse

import numpy as np
from scipy.stats import multivariate_normal

from chdqr.data import OUTLIER_MEANS, UNCOND2D_COVS, UNCOND2D_MEANS, add_outliers, gen_uncond2d


def mixture(n_base, n_out):
    total = n_base + n_out * len(OUTLIER_MEANS)
    comps = [(n_base / len(UNCOND2D_MEANS) / total, m, c) for m, c in zip(UNCOND2D_MEANS, UNCOND2D_COVS)]
    comps += [(n_out / total, m, np.eye(2)) for m in OUTLIER_MEANS]
    return comps


def pdf(comps, y):
    return sum(w * multivariate_normal(m, c).pdf(y) for w, m, c in comps)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=30000)
    ap.add_argument("--outliers", type=int, default=1000)
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.1])
    ap.add_argument("--samples", type=int, default=400_000)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    comps = mixture(args.n, args.outliers)
    Y = add_outliers(gen_uncond2d(args.n, 0), args.outliers, 0).targets
    spread = np.prod(Y.std(axis=0))
    rng = np.random.default_rng(args.seed)
    which = rng.choice(len(comps), size=args.samples, p=[c[0] for c in comps])
    S = np.empty((args.samples, 2))
    for j, (_, m, c) in enumerate(comps):
        idx = which == j
        S[idx] = rng.multivariate_normal(m, c, size=idx.sum())
    dens = pdf(comps, S)
    lo, hi = Y.min(axis=0) - 1, Y.max(axis=0) + 1
    U = rng.uniform(lo, hi, size=(args.samples * 2, 2))
    dens_u = pdf(comps, U)
    for a in args.alphas:
        area = np.prod(hi - lo) * np.mean(dens_u > np.quantile(dens, a))
        print(f"alpha={a}: HDR area {area:.3f}  normalized {area / spread:.4f}")


if __name__ == "__main__":
    main()
