"""Shared test oracles: finite differences and error measures."""

import numpy as np


def finite_difference_gradients(build_loss, leaves, h=1e-5):
    """Central-difference gradients of a scalar loss w.r.t. leaf arrays.

    build_loss() must rebuild the graph from the leaves' current .data
    and return the loss as a float. Leaves are perturbed in place one
    element at a time; everything runs in the leaves' own precision
    (use float64 leaves for tight tolerances).
    """
    grads = []
    for leaf in leaves:
        grad = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss()
            flat[i] = orig - h
            down = build_loss()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(grad)
    return grads


def max_rel_error(analytic, numeric):
    """Largest elementwise relative error, floored so near-zero pairs pass."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1e-4, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / scale).max())


def check_gradients(build_loss_tensor, leaves, h=1e-5, tol=1e-4):
    """Backward pass vs central differences; returns the worst error."""
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.zero_grad()
    loss = build_loss_tensor()
    loss.backward()
    analytic = [leaf.grad.copy() for leaf in leaves]
    numeric = finite_difference_gradients(
        lambda: float(build_loss_tensor().data), leaves, h=h)
    worst = max(max_rel_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e}"
    return worst
