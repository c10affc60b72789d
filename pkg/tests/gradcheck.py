"""Central finite-difference oracle used across the gradient tests.

The oracle only calls the forward pass, so it stays independent of the
reverse-mode implementation it is checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from nodulediag.tensor import Tensor, backward


def finite_difference_grad(
    f: Callable[..., Tensor],
    args: Sequence[np.ndarray],
    wrt: int,
    step: float = 1e-4,
) -> np.ndarray:
    """Central differences of scalar f w.r.t. args[wrt], elementwise."""
    base = [np.asarray(a, dtype=np.float64).copy() for a in args]
    grad = np.zeros_like(base[wrt])
    flat = base[wrt].reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(*[Tensor(a) for a in base]).data)
        flat[i] = orig - step
        lo = float(f(*[Tensor(a) for a in base]).data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise |a-b| scaled by max(1, |a|, |b|), reduced to the worst case."""
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(
    f: Callable[..., Tensor],
    args: Sequence[np.ndarray],
    tol: float = 1e-4,
    step: float = 1e-4,
) -> float:
    """Reverse-mode vs central differences for every argument; returns worst error."""
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in args]
    loss = f(*tensors)
    backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        fd = finite_difference_grad(f, args, wrt=i, step=step)
        ad = t.grad if t.grad is not None else np.zeros_like(fd)
        err = max_rel_error(ad, fd)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch on arg {i}: rel err {err:.3e} >= {tol}"
    return worst
