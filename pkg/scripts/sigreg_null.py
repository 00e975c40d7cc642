"""Monte-Carlo null distribution of the Gaussianity statistic.

Draws standard-normal batches of the shape used by the verification tests
and records percentiles of the regularizer value. The resulting numbers
are frozen into the test suite; rerun this script if the statistic, its
direction seed, or the batch shape ever changes.

Usage: python3 scripts/sigreg_null.py [replicates]
"""

import sys

import numpy as np

from specfuse.configs import LossConfig
from specfuse.numerics import stream
from specfuse.pretrain import sigreg

N_ROWS = 10_000
DIM = 16
DIRECTION_SEED = 0


def main(replicates=1000):
    cfg = LossConfig()
    values = np.empty(replicates)
    for i in range(replicates):
        z = stream(123, "null-replicate", i).normal(size=(N_ROWS, DIM))
        values[i] = float(sigreg(z, cfg, DIRECTION_SEED, step=0).data)
    for q in (50, 90, 99, 99.9):
        print(f"p{q}: {np.percentile(values, q):.6e}")
    print(f"max: {values.max():.6e}  min: {values.min():.6e}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1000)
