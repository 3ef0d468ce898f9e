"""Shared finite-difference oracles and small helpers for the test suite."""

import numpy as np


def central_diff_grad(f, x, eps=1e-5):
    """Gradient of scalar f at x by central differences, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def central_diff_jacobian(f, x, eps=1e-5):
    """Jacobian of vector f at x: rows index outputs, cols index inputs."""
    x = np.asarray(x, dtype=np.float64)
    y0 = np.asarray(f(x), dtype=np.float64)
    J = np.zeros((y0.size, x.size))
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = np.asarray(f(x)).reshape(-1)
        flat[i] = old - eps
        fm = np.asarray(f(x)).reshape(-1)
        flat[i] = old
        J[:, i] = (fp - fm) / (2 * eps)
    return J


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom
