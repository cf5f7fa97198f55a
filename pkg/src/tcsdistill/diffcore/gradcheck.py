"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_grad(f: Callable[[], Tensor], leaf: Tensor, eps: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f().item()
        flat[i] = orig - eps
        down = f().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return out


def analytic_grads(f: Callable[[], Tensor], leaves: Sequence[Tensor]) -> list[np.ndarray]:
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Per-leaf max relative error between tape and finite-difference gradients.

    The error for a leaf is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|)``, i.e. the worst elementwise deviation measured against the
    leaf's gradient scale, which keeps near-zero entries from dominating.
    ``f`` must be deterministic and rebuild its graph on every call.
    """
    analytic = analytic_grads(f, leaves)
    errors = []
    for leaf, a in zip(leaves, analytic):
        n = numerical_grad(f, leaf, eps)
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        if scale == 0.0:
            errors.append(0.0)
        else:
            errors.append(float(np.abs(a - n).max() / scale))
    return errors
