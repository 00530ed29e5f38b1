"""Central-difference gradient checking helpers shared by the test modules."""

import numpy as np

EPS = 1e-4
TOL = 1e-4
FLOOR = 1e-8  # below this both gradients count as zero


def numeric_grad(f, x, eps=EPS):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic, numeric):
    """``|a - n| / max(|a|, |n|)`` in the Frobenius norm; 0 when both are below FLOOR."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < FLOOR:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_layer(forward, backward, inputs, seed=0):
    """Compare ``backward`` against central differences of ``sum(forward(*inputs) * R)``.

    ``backward(R)`` must return a dict of analytic gradients keyed like ``inputs``.
    Returns the worst relative error and the per-name errors.
    """
    rng = np.random.default_rng(seed)
    out = forward()
    R = rng.normal(size=np.shape(out))
    analytic = backward(R)
    errs = {}
    for name, arr in inputs.items():
        num = numeric_grad(lambda: float(np.sum(forward() * R)), arr)
        errs[name] = rel_error(analytic[name], num)
    return max(errs.values()), errs
