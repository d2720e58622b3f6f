"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(loss_fn: Callable[[], float], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Estimate d loss / d tensor by central differences, perturbing in place."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |a|) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0


def check_gradients(
    build_loss: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backprop against central differences for ``tensors``.

    ``build_loss`` must rebuild the graph from the current tensor values on
    every call (it is invoked twice per perturbed entry).  When
    ``max_entries`` is set, only that many randomly chosen entries of each
    tensor are perturbed.  Returns the worst relative error.
    """
    for t in tensors:
        t.zero_grad()
    build_loss().backward()
    analytic = [np.array(t.grad, dtype=np.float64) for t in tensors]
    for t in tensors:
        t.zero_grad()

    def value() -> float:
        return build_loss().item()

    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            worst = max(worst, max_relative_error(a, numerical_gradient(value, t, h)))
            continue
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(flat.size, size=max_entries, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            worst = max(worst, abs(a.reshape(-1)[i] - num) / max(1.0, abs(a.reshape(-1)[i])))
    return worst
