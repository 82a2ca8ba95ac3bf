"""Regenerate ``synthetic_pole.csv``: 33 draws from a constrained 3-d normal.

The truth is the published pole-position estimate passed through M1 so that
it satisfies the constraints exactly.
"""

import numpy as np

from constrained_mvn.enforce import modify_m1
from constrained_mvn.harness import sample_dataset
from constrained_mvn.likelihood import EstimatePair

MEAN = np.array([-0.593, 0.167, 0.787])
COV = np.array([
    [0.670, 0.235, -0.299],
    [0.235, 2.333, -0.106],
    [-0.299, -0.106, 0.797],
])

if __name__ == "__main__":
    truth = modify_m1(EstimatePair(MEAN, COV)).estimate
    X = sample_dataset(truth, 33, seed=1976).rows
    np.savetxt("synthetic_pole.csv", X, delimiter=",", fmt="%.10f", header="x1,x2,x3", comments="")
