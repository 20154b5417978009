"""Small numeric helpers shared across modules."""

from __future__ import annotations

import numpy as np


def uniform_mean(rows: np.ndarray) -> np.ndarray:
    """Element-wise mean over axis 0, independent of row order.

    Values are sorted before summation so any permutation of the rows gives the
    same bits, and positions where all rows agree return that value unchanged.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        raise ValueError("cannot average an empty list")
    mean = np.sort(rows, axis=0).sum(axis=0) / rows.shape[0]
    first = rows[0]
    return np.where(np.all(rows == first, axis=0), first, mean)
