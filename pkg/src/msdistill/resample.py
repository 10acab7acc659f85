"""Bilinear resampling matrices shared by the view pipeline and the encoder."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D bilinear resampling matrix of shape (n_out, n_in).

    Half-pixel centers with edge clamping, so ``n_out == n_in`` gives the
    identity and every row sums to one. The returned array is read-only
    because it is cached.
    """
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m
