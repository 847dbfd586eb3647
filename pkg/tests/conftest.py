import numpy as np

from ctbn_meanfield.model import JointRateMatrix, StateSpace


def random_rate_matrix(rng, n, lo=0.3, hi=2.0):
    """Random irreducible rate matrix: off-diagonals bounded away from 0."""
    q = rng.uniform(lo, hi, size=(n, n))
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return q


def single_chain(q):
    """Wrap a dense rate matrix as a one-component joint matrix."""
    return JointRateMatrix(q, StateSpace([q.shape[0]]))
