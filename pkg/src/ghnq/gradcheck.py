"""Finite-difference verification of analytic gradients.

The checker perturbs each coordinate of each leaf by +/-h, re-evaluates the
scalar function, and compares the central-difference quotient against the
gradient produced by the tape. It runs the function in float64 so the
quotient at h=1e-4 is not dominated by storage rounding.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, use_dtype


def numerical_gradient(fn: Callable[[Sequence[Tensor]], Tensor],
                       leaves: Sequence[Tensor], h: float = 1e-4) -> list[np.ndarray]:
    """Central finite differences of ``fn`` wrt every leaf, coordinatewise."""
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data, dtype=np.float64)
        flat = leaf.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(leaves).item()
            flat[i] = orig - h
            lo = fn(leaves).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(fn: Callable[[Sequence[Tensor]], Tensor],
                    arrays: Sequence[np.ndarray], h: float = 1e-4,
                    rel_tol: float = 1e-3, min_pass_fraction: float = 1.0):
    """Compare tape gradients of ``fn`` against central differences.

    Returns ``(pass_fraction, worst_rel_error)``; raises AssertionError when
    fewer than ``min_pass_fraction`` of the coordinates meet ``rel_tol``.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    with use_dtype(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = fn(leaves)
        backward(loss)
        analytic = [np.array(leaf.grad) for leaf in leaves]
        numeric = numerical_gradient(fn, leaves, h=h)
    total = 0
    passed = 0
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        rel = np.abs(a - n) / denom
        total += rel.size
        passed += int((rel < rel_tol).sum())
        worst = max(worst, float(rel.max()))
    fraction = passed / max(total, 1)
    if fraction < min_pass_fraction:
        raise AssertionError(
            f"gradient check failed: {fraction:.4f} of coordinates within "
            f"rel_tol={rel_tol} (worst rel error {worst:.3e})")
    return fraction, worst
