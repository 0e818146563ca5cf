"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute discrepancy scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict[int, float]:
    """Compare backward() gradients of the scalar ``fn()`` against central differences.

    ``fn`` must read the current ``.data`` of ``inputs``. When ``max_entries``
    is set, only that many randomly chosen entries of each input are probed.
    Returns the relative error per input position.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    errors = {}
    for k, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                plus = fn().item()
                flat[i] = orig - eps
                minus = fn().item()
                flat[i] = orig
                numeric[j] = (plus - minus) / (2 * eps)
        errors[k] = relative_error(analytic.reshape(-1)[idx], numeric)
    return errors


def max_gradcheck_error(fn, inputs, **kwargs) -> float:
    return max(gradcheck(fn, inputs, **kwargs).values())
