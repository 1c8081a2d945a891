"""Central finite-difference gradient checking utilities (float64)."""

from __future__ import annotations

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar-valued f() w.r.t. array x.

    f must read x from the enclosing scope; x is perturbed in place and
    restored, so cached references inside f stay valid.
    """
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = f()
        flat_x[i] = orig - h
        fm = f()
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Scale-safe relative error between two gradient arrays.

    The denominator is floored so structurally-zero gradients (e.g. a conv
    bias feeding a batch-norm layer) compare by absolute error instead of
    amplifying finite-difference noise.
    """
    num = np.abs(a - b).max()
    den = max(np.abs(a).max() + np.abs(b).max(), 1e-4)
    return float(num / den)


def check_layer(layer, x: np.ndarray, training: bool = False, h: float = 1e-6,
                rng: np.random.Generator | None = None):
    """Compare analytic input/parameter gradients of a layer against
    finite differences, through a random linear readout of the output.

    Returns a dict of relative errors keyed by 'input' and parameter names.
    """
    rng = rng or np.random.default_rng(0)
    y = layer.forward(x, training=training)
    readout = rng.standard_normal(y.shape)

    def scalar():
        return float((layer.forward(x, training=training) * readout).sum())

    layer.zero_grad()
    layer.forward(x, training=training)
    dx = layer.backward(readout.copy())

    errors = {"input": rel_error(dx, numeric_grad(scalar, x, h))}
    for name, p in layer.params.items():
        errors[name] = rel_error(layer.grads[name], numeric_grad(scalar, p, h))
    return errors
