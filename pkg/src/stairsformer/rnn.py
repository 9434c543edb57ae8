"""Gated recurrent unit cell on the autodiff tensor core."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from .tensor import ShapeError, Tensor, add, matmul, mul, sigmoid, tanh


@dataclass
class GRUParams:
    """Three-gate GRU weights: input maps W, recurrent maps U, biases b."""

    wz: Tensor
    uz: Tensor
    bz: Tensor
    wr: Tensor
    ur: Tensor
    br: Tensor
    wh: Tensor
    uh: Tensor
    bh: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, prefix: str = "gru") -> "GRUParams":
        scale = 1.0 / np.sqrt(d)

        def w(name):
            return Tensor(rng.uniform(-scale, scale, size=(d, d)), requires_grad=True,
                          name=f"{prefix}.{name}")

        def b(name):
            return Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.{name}")

        return cls(w("wz"), w("uz"), b("bz"), w("wr"), w("ur"), b("br"),
                   w("wh"), w("uh"), b("bh"))

    def named(self, prefix: str = "gru") -> Dict[str, Tensor]:
        return {
            f"{prefix}.{k}": getattr(self, k)
            for k in ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")
        }


def gru_cell(h_prev: Tensor, x: Tensor, params: GRUParams) -> Tensor:
    """h' = (1-z) * h_prev + z * h_tilde, reset gate applied to h before the candidate.

    Accepts (d,) vectors or (..., d) batches; the last axis is the model dim.
    """
    d = params.wz.shape[0]
    if h_prev.shape[-1] != d or x.shape[-1] != d:
        raise ShapeError(f"gru_cell: inputs {h_prev.shape}/{x.shape} vs model dim {d}")
    squeeze = h_prev.ndim == 1
    if squeeze:
        h_prev = h_prev.reshape(1, d)
        x = x.reshape(1, d)
    z = sigmoid(add(add(matmul(x, params.wz), matmul(h_prev, params.uz)), params.bz))
    r = sigmoid(add(add(matmul(x, params.wr), matmul(h_prev, params.ur)), params.br))
    cand = tanh(add(add(matmul(x, params.wh), matmul(mul(r, h_prev), params.uh)), params.bh))
    out = add(mul(add(mul(z, -1.0), 1.0), h_prev), mul(z, cand))
    if squeeze:
        out = out.reshape(d)
    return out
