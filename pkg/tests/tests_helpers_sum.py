"""Scalar-sum tape op shared by test modules."""

import numpy as np

from ksynth.tensor import Tracked, result_of


def sum_all(x):
    out = np.asarray(x.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return result_of(out, (x,), bwd, cls=Tracked)
