"""Central finite-difference gradient checking shared across test modules."""

from __future__ import annotations

import numpy as np

from stairsformer.tensor import Tensor


def finite_difference_grad(loss_fn, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar-valued loss_fn around x, entry by entry."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn()
        flat[i] = orig - step
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def check_grads(build_loss, inputs: list[Tensor], rtol: float = 1e-4, step: float = 1e-4):
    """Compare autodiff grads of build_loss(inputs) against central differences.

    build_loss must rebuild the graph from the current .data of each input on
    every call so the finite-difference probe sees the perturbed values.
    """
    for t in inputs:
        t._grad = None
    loss = build_loss()
    loss.backward()
    for t in inputs:
        ad = np.array(t.grad)
        fd = finite_difference_grad(lambda: float(build_loss().data), t.data, step=step)
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-3)
        rel = np.abs(ad - fd) / denom
        assert rel.max() <= rtol, (
            f"gradient mismatch for {t.name or 'input'}: max rel err {rel.max():.3e}"
        )
