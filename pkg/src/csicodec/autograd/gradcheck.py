"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_grad(fn: Callable[[], float], array: np.ndarray, index: tuple, h: float = 1e-5) -> float:
    """d fn / d array[index] by central differences; ``array`` is perturbed in
    place and restored."""
    old = array[index]
    array[index] = old + h
    plus = fn()
    array[index] = old - h
    minus = fn()
    array[index] = old
    return (plus - minus) / (2.0 * h)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Iterable[Tensor],
    n_samples: int | None = None,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, tuple, float, float, float]]:
    """Compare reverse-mode gradients of ``loss_fn()`` against central
    differences.

    ``loss_fn`` must rebuild the graph from the current tensor values each
    call and be deterministic. Returns ``(tensor index, element index,
    analytic, numeric, relative error)`` per probed entry; ``n_samples``
    entries are drawn per tensor (all entries when ``None``).
    """
    rng = rng or np.random.default_rng(0)
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value() -> float:
        return float(loss_fn().data)

    results = []
    for ti, (t, g) in enumerate(zip(tensors, grads)):
        flat = np.arange(t.data.size)
        if n_samples is not None and n_samples < flat.size:
            flat = rng.choice(flat, size=n_samples, replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), t.shape)
            num = numeric_grad(value, t.data, idx, h)
            ana = float(g[idx])
            results.append((ti, idx, ana, num, relative_error(ana, num)))
    return results
