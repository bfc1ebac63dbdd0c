"""Sample-quality and estimator-quality statistics."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist


def energy_distance(gen, ref):
    """2 E||X - Y|| - E||X - X'|| - E||Y - Y'|| with all-pairs means (V-statistic, never negative)."""
    gen = np.atleast_2d(np.asarray(gen, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    if gen.shape[0] == 0 or ref.shape[0] == 0:
        raise ValueError("energy distance needs two nonempty samples")
    xy = cdist(gen, ref).mean()
    xx = cdist(gen, gen).mean()
    yy = cdist(ref, ref).mean()
    return float(max(2.0 * xy - xx - yy, 0.0))


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    return float(xc @ yc / np.sqrt((xc @ xc) * (yc @ yc)))
