"""Attention-based monotonic mixing of per-agent utilities into Q_tot.

Head weights are softmaxes over agents, so dQ_tot/dQ_i >= 0 everywhere and
the joint greedy action decomposes into per-agent argmaxes. The global state
is a variable-size set of unit feature vectors pooled by mean embedding, so
one parameter set serves any population size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class MixerParams:
    w_state: Tensor            # (state_feats, d) unit embedding
    w_query: Tensor            # (d, H*d) per-head query maps on pooled state
    w_key: Tensor              # (d, H*d) per-head key maps on agent vectors
    w_v1: Tensor
    b_v1: Tensor
    w_v2: Tensor
    b_v2: Tensor
    n_heads: int = 4

    @classmethod
    def init(cls, d: int, state_feats: int, rng: np.random.Generator,
             n_heads: int = 4) -> "MixerParams":
        def u(n_in, shape, name):
            s = 1.0 / np.sqrt(n_in)
            return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True,
                          name=f"mixer.{name}")

        return cls(
            w_state=u(state_feats, (state_feats, d), "state.w"),
            w_query=u(d, (d, n_heads * d), "query.w"),
            w_key=u(d, (d, n_heads * d), "key.w"),
            w_v1=u(d, (d, d), "value.l1.w"),
            b_v1=Tensor(np.zeros(d), requires_grad=True, name="mixer.value.l1.b"),
            w_v2=u(d, (d, 1), "value.l2.w"),
            b_v2=Tensor(np.zeros(1), requires_grad=True, name="mixer.value.l2.b"),
            n_heads=n_heads,
        )

    def named(self) -> Dict[str, Tensor]:
        return {
            "mixer.state.w": self.w_state,
            "mixer.query.w": self.w_query,
            "mixer.key.w": self.w_key,
            "mixer.value.l1.w": self.w_v1,
            "mixer.value.l1.b": self.b_v1,
            "mixer.value.l2.w": self.w_v2,
            "mixer.value.l2.b": self.b_v2,
        }

    @property
    def d(self) -> int:
        return self.w_state.shape[1]


def pool_state(state_units, params: MixerParams) -> Tensor:
    """Mean of linearly embedded unit features; permutation invariant."""
    units = state_units if isinstance(state_units, Tensor) else Tensor(np.asarray(state_units, dtype=np.float64))
    if units.ndim < 2 or units.shape[-2] == 0:
        raise ValueError("pool_state: need at least one state unit")
    if units.shape[-1] != params.w_state.shape[0]:
        raise ShapeError(
            f"pool_state: unit features {units.shape[-1]} vs map input {params.w_state.shape[0]}")
    return T.mean(T.matmul(units, params.w_state), axis=-2)


def mix_batch(agent_qs: Tensor, agent_keys: Tensor, state_units, params: MixerParams) -> Tensor:
    """(B, N) utilities + (B, N, d) keys + (B, U, f) state -> (B,) Q_tot."""
    b, n = agent_qs.shape
    h, d = params.n_heads, params.d
    if agent_keys.shape[:2] != (b, n):
        raise ShapeError(f"mix: keys {agent_keys.shape} vs utilities {agent_qs.shape}")
    pooled = pool_state(state_units, params)                      # (B, d)
    q = T.reshape(T.matmul(pooled, params.w_query), (b, h, 1, d))
    k = T.permute(T.reshape(T.matmul(agent_keys, params.w_key), (b, n, h, d)),
                  (0, 2, 3, 1))                                   # (B, H, d, N)
    scores = T.mul(T.matmul(q, k), 1.0 / np.sqrt(d))              # (B, H, 1, N)
    lam = T.reshape(T.softmax_rows(scores), (b, h, n))
    contrib = T.tsum(T.mul(lam, T.reshape(agent_qs, (b, 1, n))), axis=2)  # (B, H)
    total = T.tsum(contrib, axis=1)                               # (B,)
    hidden = T.relu(T.add(T.matmul(pooled, params.w_v1), params.b_v1))
    v = T.reshape(T.add(T.matmul(hidden, params.w_v2), params.b_v2), (b,))
    return T.add(total, v)


def mix(agent_qs, agent_keys, state_units, params: MixerParams) -> Tensor:
    """Single-instance Q_tot as a scalar tensor."""
    qs = agent_qs if isinstance(agent_qs, Tensor) else Tensor(np.asarray(agent_qs, dtype=np.float64))
    keys = agent_keys if isinstance(agent_keys, Tensor) else Tensor(np.asarray(agent_keys, dtype=np.float64))
    if qs.ndim != 1 or qs.shape[0] < 1:
        raise ValueError(f"mix: need at least one agent utility, got shape {qs.shape}")
    n = qs.shape[0]
    units = state_units if isinstance(state_units, Tensor) else Tensor(np.asarray(state_units, dtype=np.float64))
    out = mix_batch(T.reshape(qs, (1, n)), T.reshape(keys, (1, n, keys.shape[-1])),
                    T.reshape(units, (1,) + tuple(units.shape)), params)
    return T.reshape(out, ())
