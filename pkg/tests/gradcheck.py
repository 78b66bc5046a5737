"""Central finite-difference oracle for gradient checks.

Kept deliberately independent of the autodiff engine: it only mutates
raw parameter arrays and re-runs a scalar closure forward.
"""

import numpy as np

from diffpolicy import tensor as T


def finite_diff_grad(f, array, h=1e-5):
    """d f / d array by central differences, mutating `array` in place."""
    flat = array.ravel()
    grad = np.zeros(array.size)
    for i in range(array.size):
        saved = flat[i]
        flat[i] = saved + h
        fp = f()
        flat[i] = saved - h
        fm = f()
        flat[i] = saved
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(array.shape)


def finite_diff_grad_at(f, array, flat_indices, h=1e-5):
    """Central differences at a subset of flat indices only."""
    flat = array.ravel()
    out = np.zeros(len(flat_indices))
    for j, i in enumerate(flat_indices):
        saved = flat[i]
        flat[i] = saved + h
        fp = f()
        flat[i] = saved - h
        fm = f()
        flat[i] = saved
        out[j] = (fp - fm) / (2.0 * h)
    return out


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_param_grads(loss_fn, params, h=1e-5, tol=1e-4):
    """Assert every parameter's analytic grad matches central differences.

    loss_fn() builds the graph fresh and returns the scalar loss Tensor.
    Returns the worst relative error seen.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()

    def value():
        with T.no_grad():
            return float(loss_fn().data)

    worst = 0.0
    for name, p in params.items():
        assert p.grad is not None, f"no grad reached {name}"
        analytic = p.grad
        numeric = finite_diff_grad(value, p.data, h=h)
        err = rel_error(analytic, numeric)
        worst = max(worst, err)
        assert err <= tol, f"{name}: grad rel err {err:.3e} > {tol}"
    return worst
