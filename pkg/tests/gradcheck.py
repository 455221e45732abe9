"""Central finite differences shared by the gradient tests."""

import numpy as np


def central_diff(f, x, h=1e-5):
    """Gradient of scalar ``f`` at array ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def max_rel_error(a, b):
    """Error relative to the larger gradient magnitude of the block."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def mp_central_diff(f, x, h=1e-5, dps=50):
    """Central differences of ``f(list of mpf)`` evaluated in ``dps``-digit arithmetic."""
    import mpmath

    with mpmath.workdps(dps):
        xs = [mpmath.mpf(float(v)) for v in np.ravel(x)]
        hh = mpmath.mpf(h)
        out = []
        for i in range(len(xs)):
            up = list(xs)
            dn = list(xs)
            up[i] += hh
            dn[i] -= hh
            out.append(float((f(up) - f(dn)) / (2 * hh)))
    return np.array(out).reshape(np.shape(x))
