"""Finite-difference gradient checking shared by unit and acceptance tests."""

import numpy as np


def elementwise_fd(f, tensors, eps=1e-6):
    """Max relative error between backprop gradients and central differences.

    ``f()`` must rebuild the graph from the given parameter tensors and
    return a scalar Tensor.  Relative error is normalized by the largest
    finite-difference magnitude per tensor.
    """
    for t in tensors:
        t.zero_grad()
    f().backward()
    worst = 0.0
    for t in tensors:
        fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            fd_flat[i] = (fp - fm) / (2.0 * eps)
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = max(np.abs(fd).max(), 1e-8)
        worst = max(worst, float(np.abs(grad - fd).max() / denom))
    return worst


def directional_fd(f, tensors, rng, eps=1e-6):
    """Relative error of the directional derivative along one random direction."""
    for t in tensors:
        t.zero_grad()
    f().backward()
    dirs = [rng.standard_normal(t.data.shape) for t in tensors]
    norm = np.sqrt(sum((d * d).sum() for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(
        ((t.grad if t.grad is not None else 0.0) * d).sum()
        for t, d in zip(tensors, dirs)
    )
    for t, d in zip(tensors, dirs):
        t.data = t.data + eps * d
    fp = float(f().data)
    for t, d in zip(tensors, dirs):
        t.data = t.data - 2.0 * eps * d
    fm = float(f().data)
    for t, d in zip(tensors, dirs):
        t.data = t.data + eps * d
    numeric = (fp - fm) / (2.0 * eps)
    return abs(analytic - numeric) / max(abs(numeric), 1e-8)
