"""Training-time token dropout with protection rules.

Droppable rows are the other-agent and environment-entity tokens. The own
token, both history tokens, and (for attack actions) the enemy token tied to
the dataset action always survive. Dropped rows are removed from the
sequence, not zeroed, so the model trains on genuinely shorter inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .entities import HIGH_HISTORY_LABEL, LOW_HISTORY_LABEL, OWN_LABEL, TokenSequence
from .network import N_FIXED_ACTIONS
from .tensor import ShapeError, slice_axis, concat

PROTECTED_LABELS = {OWN_LABEL, LOW_HISTORY_LABEL, HIGH_HISTORY_LABEL}


@dataclass
class DropoutMask:
    keep: np.ndarray          # bool per token row
    p_drop: float
    rng_seed: int


def protected_enemy_label(dataset_action: Optional[int]) -> Optional[str]:
    """Attack actions (index >= 6) bind protection to their enemy token."""
    if dataset_action is None or dataset_action < N_FIXED_ACTIONS:
        return None
    return f"E{dataset_action - N_FIXED_ACTIONS + 1}"


def sample_mask(labels: Sequence[str], dataset_action: Optional[int], p_drop: float,
                rng: Union[int, np.random.Generator]) -> DropoutMask:
    """Independent drop decisions per droppable row; protected rows always kept."""
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"p_drop must be in [0, 1), got {p_drop}")
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        gen = np.random.Generator(np.random.Philox(key=seed))
    else:
        seed = 0
        gen = rng
    protected = set(PROTECTED_LABELS)
    enemy = protected_enemy_label(dataset_action)
    if enemy is not None:
        protected.add(enemy)
    keep = np.ones(len(labels), dtype=bool)
    if p_drop > 0.0:
        draws = gen.random(len(labels))
        for i, lab in enumerate(labels):
            if lab not in protected and draws[i] < p_drop:
                keep[i] = False
    return DropoutMask(keep=keep, p_drop=p_drop, rng_seed=seed)


def apply_mask(seq: TokenSequence, mask: DropoutMask) -> TokenSequence:
    """Return the kept subsequence, labels preserved in order."""
    if len(mask.keep) != len(seq.labels):
        raise ShapeError(
            f"apply_mask: mask length {len(mask.keep)} vs {len(seq.labels)} rows")
    if mask.keep.all():
        return seq
    idx = np.flatnonzero(mask.keep)
    pieces = [slice_axis(seq.tokens, -2, int(i), int(i) + 1) for i in idx]
    labels = [seq.labels[i] for i in idx]
    return TokenSequence(tokens=concat(pieces, axis=-2), labels=labels)


def sample_keep_block(shape: tuple, droppable: np.ndarray, protected_attack: np.ndarray,
                      p_drop: float, seed: int, step: int) -> np.ndarray:
    """Vectorized keep masks for a training step, from a counter-based stream.

    shape is (..., R) over droppable-token positions; `droppable` marks entity
    rows (per position) and `protected_attack` marks rows protected by the
    dataset action (same shape as the output). Streams are keyed by
    (seed, step) so batches regenerate deterministically and in parallel.
    """
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"p_drop must be in [0, 1), got {p_drop}")
    gen = np.random.Generator(np.random.Philox(key=(np.uint64(seed) << np.uint64(20)) + np.uint64(step)))
    draws = gen.random(shape)
    drop = (draws < p_drop) & droppable & ~protected_attack
    return ~drop
