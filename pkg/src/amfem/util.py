"""Small shared helpers."""

import numpy as np


def ordered_sum(arr):
    """Sum in ascending index order (strict left fold).

    Global quantities are defined as the left-to-right sum of their
    per-element contributions so reported totals are bit-reproducible and
    independent of blocking.
    """
    a = np.asarray(arr, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.cumsum(a)[-1])
