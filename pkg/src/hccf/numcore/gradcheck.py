"""Central finite differences, independent of the tape."""

import numpy as np


def finite_difference(f, arrays, h=1e-5):
    """Numerically differentiate scalar ``f()`` w.r.t. each array in ``arrays``.

    Arrays are perturbed in place and restored.
    """
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = float(f())
            flat[k] = orig - h
            down = float(f())
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(analytic, numeric, floor=1e-6):
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
