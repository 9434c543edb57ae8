"""Entity-group observation decomposition and shared linear token embeddings.

Each agent's observation splits into its own features, one vector per other
agent, and one vector per environment entity; every group is embedded by one
shared linear map so the token count can vary across tasks without any
parameter change.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, add, concat, matmul, reshape

OWN_LABEL = "Own"
LOW_HISTORY_LABEL = "LH"
HIGH_HISTORY_LABEL = "HH"


def _as_group(arr) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.size == 0:
        return out.reshape(0, out.shape[-1] if out.ndim == 2 else 0)
    if out.ndim != 2:
        raise ShapeError(f"entity group must be (K, features), got shape {out.shape}")
    return out


@dataclass
class EntityObservation:
    """One agent's view: own features plus per-agent and per-entity vectors."""

    own: np.ndarray                 # (d_own,)
    other_agents: np.ndarray        # (K_a, d_oa)
    env_entities: np.ndarray        # (K_e, d_en)

    def __post_init__(self):
        self.own = np.asarray(self.own, dtype=np.float64)
        self.other_agents = _as_group(self.other_agents)
        self.env_entities = _as_group(self.env_entities)

    @property
    def k_agents(self) -> int:
        return self.other_agents.shape[0]

    @property
    def k_entities(self) -> int:
        return self.env_entities.shape[0]


@dataclass
class EmbeddingParams:
    """Shared per-group linear maps; identical for every entity of a group."""

    w_own: Tensor
    b_own: Tensor
    w_oa: Tensor
    b_oa: Tensor
    w_en: Tensor
    b_en: Tensor

    @classmethod
    def init(cls, d: int, d_own: int, d_oa: int, d_en: int,
             rng: np.random.Generator) -> "EmbeddingParams":
        def w(n_in, name):
            s = 1.0 / np.sqrt(n_in)
            return Tensor(rng.uniform(-s, s, size=(n_in, d)), requires_grad=True,
                          name=f"embed.{name}.w")

        def b(name):
            return Tensor(np.zeros(d), requires_grad=True, name=f"embed.{name}.b")

        return cls(w(d_own, "own"), b("own"), w(d_oa, "oa"), b("oa"), w(d_en, "en"), b("en"))

    def named(self) -> Dict[str, Tensor]:
        return {
            "embed.own.w": self.w_own, "embed.own.b": self.b_own,
            "embed.oa.w": self.w_oa, "embed.oa.b": self.b_oa,
            "embed.en.w": self.w_en, "embed.en.b": self.b_en,
        }


@dataclass
class TokenSequence:
    """Entity tokens plus history rows, with per-row labels in fixed order."""

    tokens: Tensor                  # (K_a + K_e + n_history, d)
    labels: List[str]

    def __post_init__(self):
        if self.tokens.shape[-2] != len(self.labels):
            raise ShapeError(
                f"token sequence: {self.tokens.shape[-2]} rows vs {len(self.labels)} labels")


def entity_labels(k_agents: int, k_entities: int) -> List[str]:
    return ([OWN_LABEL]
            + [f"A{i + 1}" for i in range(k_agents)]
            + [f"E{i + 1}" for i in range(k_entities)])


def embed_entities(obs: EntityObservation, params: EmbeddingParams) -> Tensor:
    """Stack embedded tokens: row 0 own, then other agents, then entities."""
    if obs.own.shape[0] != params.w_own.shape[0]:
        raise ShapeError(
            f"embed_entities: own features {obs.own.shape[0]} vs map input {params.w_own.shape[0]}")
    if obs.k_agents and obs.other_agents.shape[1] != params.w_oa.shape[0]:
        raise ShapeError(
            f"embed_entities: other-agent features {obs.other_agents.shape[1]} "
            f"vs map input {params.w_oa.shape[0]}")
    if obs.k_entities and obs.env_entities.shape[1] != params.w_en.shape[0]:
        raise ShapeError(
            f"embed_entities: env-entity features {obs.env_entities.shape[1]} "
            f"vs map input {params.w_en.shape[0]}")
    d = params.w_own.shape[1]
    rows = [reshape(add(matmul(Tensor(obs.own.reshape(1, -1)), params.w_own), params.b_own), (1, d))]
    if obs.k_agents:
        rows.append(add(matmul(Tensor(obs.other_agents), params.w_oa), params.b_oa))
    if obs.k_entities:
        rows.append(add(matmul(Tensor(obs.env_entities), params.w_en), params.b_en))
    return concat(rows, axis=0)


def assemble_sequence(entity_tokens: Tensor, h_low: Tensor,
                      h_high: Optional[Tensor] = None,
                      labels: Optional[Sequence[str]] = None) -> TokenSequence:
    """Append history rows (low, then high when present) after the entity tokens."""
    d = entity_tokens.shape[-1]
    if h_low.shape[-1] != d or (h_high is not None and h_high.shape[-1] != d):
        raise ShapeError(f"assemble_sequence: history dim vs token dim {d}")
    if labels is None:
        k = entity_tokens.shape[0] - 1
        labels = entity_labels(k, 0)  # caller should pass real labels when K_e > 0
    rows = [entity_tokens, reshape(h_low, (1, d))]
    out_labels = list(labels) + [LOW_HISTORY_LABEL]
    if h_high is not None:
        rows.append(reshape(h_high, (1, d)))
        out_labels.append(HIGH_HISTORY_LABEL)
    return TokenSequence(tokens=concat(rows, axis=0), labels=out_labels)
