"""Central finite-difference gradient checker (double precision)."""

import numpy as np

from shapeformer.autodiff import Tensor

STEP = 1e-4
REL_TOL = 1e-3
# entries whose gradient is this small in both routes are compared absolutely
ABS_FLOOR = 1e-6


def numeric_grad(f, arrays, k, step=STEP):
    x = arrays[k]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        hi = f(*[Tensor(a) for a in arrays]).item()
        x[idx] = old - step
        lo = f(*[Tensor(a) for a in arrays]).item()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * step)
    return g


def analytic_grads(f, arrays):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    f(*leaves).backward()
    return [leaf.grad for leaf in leaves]


def max_rel_error(a, n):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check(f, *arrays, wrt=None):
    """Return the worst elementwise relative error of f's gradients."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = analytic_grads(f, arrays)
    worst = 0.0
    for k in (range(len(arrays)) if wrt is None else wrt):
        num = numeric_grad(f, arrays, k)
        worst = max(worst, max_rel_error(grads[k], num))
    return worst
