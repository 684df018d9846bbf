"""Regenerate the bundled anisotropic example dataset.

Usage: python3 tools/make_synthetic.py [seed] [output.csv]
"""

import sys

import numpy as np

from geoprofile import batchlinalg as bl
from geoprofile.matern import matern_batch
from geoprofile.model import Dataset, NaturalParams, boxcox_inverse, write_csv
from geoprofile.sim import uniform_coords

TRUTH = NaturalParams(phiX=4000.0, phiY=1600.0, phiA=0.6, kappa=1.5, nuggetSq=0.15, lam=0.5)
SIGMA_SQ = 1.0
BETA = (6.0, 1.5)
SIDE = 10000.0


def make(seed: int = 4, n: int = 100) -> Dataset:
    rng = np.random.default_rng(seed)
    coords = np.round(uniform_coords(n, SIDE, rng), 1)
    elev = np.sin(coords[:, 0] / 3000.0) + 0.5 * np.cos(coords[:, 1] / 2000.0)
    X = np.column_stack([np.ones(n), np.round(elev, 4)])
    fac = bl.chol_batch(SIGMA_SQ * matern_batch(coords, TRUTH.as_array()[None]))
    draw = fac.L[0] @ (np.sqrt(fac.D[0]) * rng.standard_normal(n))
    y = boxcox_inverse(X @ np.array(BETA) + draw, TRUTH.lam)
    return Dataset(coords, np.round(y, 6), X, ("(Intercept)", "elev"))


if __name__ == "__main__":
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 4
    out = sys.argv[2] if len(sys.argv) > 2 else "src/geoprofile/data/synthetic_aniso.csv"
    write_csv(make(seed), out)
