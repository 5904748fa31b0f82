"""Gradient evaluation and the central-difference oracle used to check it."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def evaluate_with_gradients(
    f: Callable[..., Tensor], params: Sequence[Tensor]
) -> tuple[float, list[Tensor]]:
    """Return ``f(*params)`` and its gradient with respect to each parameter.

    Parameters the output does not depend on get all-zero gradients. The
    ``requires_grad`` flags of ``params`` are restored afterwards.
    """
    saved = [(p.requires_grad, p.grad) for p in params]
    try:
        for p in params:
            p.requires_grad = True
            p.grad = None
        out = f(*params)
        if not isinstance(out, Tensor) or out.size != 1:
            raise ValueError("evaluate_with_gradients: f must return a scalar Tensor")
        if out.requires_grad:
            out.backward()
        grads = [Tensor(p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params]
        return float(out.data), grads
    finally:
        for p, (flag, grad) in zip(params, saved):
            p.requires_grad = flag
            p.grad = grad


def finite_difference_gradients(
    f: Callable[..., Tensor], params: Sequence[Tensor], step: float = 1e-6
) -> list[Tensor]:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h`` per coordinate."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    grads = []
    with no_grad():
        for k, p in enumerate(params):
            original = p.data
            g = np.zeros(original.shape, dtype=np.float64)
            flat = original.reshape(-1)
            for i in range(flat.size):
                values = []
                for sign in (1.0, -1.0):
                    probe = flat.copy()
                    probe[i] += sign * step
                    p.data = probe.reshape(original.shape)
                    v = float(np.asarray(f(*params).data).reshape(()))
                    if not np.isfinite(v):
                        p.data = original
                        raise FloatingPointError(
                            f"non-finite f at parameter {k}, coordinate {i} (sign {sign:+.0f})")
                    values.append(v)
                g.reshape(-1)[i] = (values[0] - values[1]) / (2.0 * step)
            p.data = original
            grads.append(Tensor(g))
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``, maximised."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def relative_error(a, b, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)`` over a whole tensor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / scale
