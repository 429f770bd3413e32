"""Central-difference gradient oracle shared by the test modules."""

import numpy as np

from mstl import autodiff as ad
from mstl.autodiff import Tensor


def finite_difference(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arrays`` (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f()
            a[i] = old - h
            down = f()
            a[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_rel_error(analytic, numeric):
    """Worst per-tensor relative error ||a - n|| / max(||a||, ||n||)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst


def check_gradients(build_loss, leaves, h=1e-5):
    """Compare backward() against central differences for a loss over ``leaves``."""
    for t in leaves:
        t.grad = None
    loss = build_loss()
    ad.backward(loss)
    analytic = [t.grad.copy() for t in leaves]
    numeric = finite_difference(lambda: build_loss().item(), [t.data for t in leaves], h)
    return max_rel_error(analytic, numeric)


