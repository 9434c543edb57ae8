"""Recursive spatial transformer with dual-timescale history and a Q head.

The same code path serves single sequences (R, d) and batches (B, R, d);
all heavy math is rank-agnostic over leading axes. History rows always sit
at the end of the sequence: [entities..., LH] or [entities..., LH, HH].
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .entities import (
    HIGH_HISTORY_LABEL,
    LOW_HISTORY_LABEL,
    EmbeddingParams,
    TokenSequence,
    entity_labels,
)
from .rnn import GRUParams, gru_cell
from .tensor import ShapeError, Tensor

ACTION_NOOP = 0
ACTION_STOP = 1
N_FIXED_ACTIONS = 6  # no-op, stop, move N/S/E/W
UNAVAILABLE_Q = -1e9


@dataclass
class StairsConfig:
    """Network hyper-parameters and ablation switches."""

    d: int = 64
    d_attn: int = 64
    d_ff: int = 256
    n_layers: int = 2
    nu: Tuple[int, ...] = (2, 1)
    t_high: int = 3
    attn_temperature: float = 1.0
    p_drop: float = 0.1
    spatial_recursion: bool = True
    high_history: bool = True
    dual_ffn: bool = True
    token_dropout: bool = True
    # literal update condition fires at t=0 against the zero state; set True
    # to postpone the first high-level update by one interval
    defer_first_high_update: bool = False

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        self.nu = tuple(int(v) for v in self.nu)
        if len(self.nu) != self.n_layers:
            raise ValueError(f"nu has {len(self.nu)} entries for {self.n_layers} layers")
        if any(v < 1 for v in self.nu):
            raise ValueError(f"every recursion count must be >= 1, got {self.nu}")
        if self.t_high < 1:
            raise ValueError(f"t_high must be >= 1, got {self.t_high}")
        if self.attn_temperature <= 0:
            raise ValueError(f"attn_temperature must be > 0, got {self.attn_temperature}")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError(f"p_drop must be in [0, 1), got {self.p_drop}")

    @property
    def effective_nu(self) -> Tuple[int, ...]:
        return self.nu if self.spatial_recursion else tuple(1 for _ in self.nu)

    @property
    def n_history(self) -> int:
        return 2 if self.high_history else 1

    def ablated(self, variant: str) -> "StairsConfig":
        """Named ablations: spatial / temporal / dropout / st / std."""
        v = variant.lower().replace("w/o", "").replace("-", "").replace("_", "").strip()
        if v == "spatial":
            return replace(self, spatial_recursion=False)
        if v == "temporal":
            return replace(self, high_history=False, dual_ffn=False)
        if v == "dropout":
            return replace(self, token_dropout=False)
        if v == "st":
            return replace(self, spatial_recursion=False, high_history=False, dual_ffn=False)
        if v == "std":
            return replace(self, spatial_recursion=False, high_history=False,
                           dual_ffn=False, token_dropout=False)
        if v == "gru":
            return replace(self, high_history=False)
        if v == "tfl":
            return replace(self, dual_ffn=False)
        raise ValueError(f"unknown ablation variant {variant!r}")


@dataclass
class FFNParams:
    w_up: Tensor
    b_up: Tensor
    w_down: Tensor
    b_down: Tensor


@dataclass
class LayerParams:
    """One transformer layer: pre-norm attention plus routed FFNs."""

    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    w_proj: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ffn_obs: FFNParams
    ffn_his: Optional[FFNParams]  # None when a single shared FFN is used


@dataclass
class HistoryState:
    """Per-agent recurrent state; tensors may carry leading batch axes."""

    h_low: Tensor
    h_high: Tensor
    t: int = 0


@dataclass
class AttentionEntry:
    layer: int
    rstep: int
    weights: np.ndarray      # (..., R, R), rows sum to 1
    scores: np.ndarray       # pre-softmax logits including temperature scaling


@dataclass
class SpatialOutput:
    z_sp: Tensor
    attention: List[AttentionEntry] = field(default_factory=list)


def _uniform(rng, n_in, shape, name):
    s = 1.0 / np.sqrt(n_in)
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True, name=name)


def _ffn_init(cfg: StairsConfig, rng, prefix: str) -> FFNParams:
    return FFNParams(
        w_up=_uniform(rng, cfg.d, (cfg.d, cfg.d_ff), f"{prefix}.up.w"),
        b_up=Tensor(np.zeros(cfg.d_ff), requires_grad=True, name=f"{prefix}.up.b"),
        w_down=_uniform(rng, cfg.d_ff, (cfg.d_ff, cfg.d), f"{prefix}.down.w"),
        b_down=Tensor(np.zeros(cfg.d), requires_grad=True, name=f"{prefix}.down.b"),
    )


def init_layer(cfg: StairsConfig, rng: np.random.Generator, index: int) -> LayerParams:
    p = f"layer{index}"
    return LayerParams(
        ln1_g=Tensor(np.ones(cfg.d), requires_grad=True, name=f"{p}.ln1.g"),
        ln1_b=Tensor(np.zeros(cfg.d), requires_grad=True, name=f"{p}.ln1.b"),
        wq=_uniform(rng, cfg.d, (cfg.d, cfg.d_attn), f"{p}.attn.q.w"),
        wk=_uniform(rng, cfg.d, (cfg.d, cfg.d_attn), f"{p}.attn.k.w"),
        wv=_uniform(rng, cfg.d, (cfg.d, cfg.d_attn), f"{p}.attn.v.w"),
        w_proj=_uniform(rng, cfg.d_attn, (cfg.d_attn, cfg.d), f"{p}.attn.proj.w"),
        ln2_g=Tensor(np.ones(cfg.d), requires_grad=True, name=f"{p}.ln2.g"),
        ln2_b=Tensor(np.zeros(cfg.d), requires_grad=True, name=f"{p}.ln2.b"),
        ffn_obs=_ffn_init(cfg, rng, f"{p}.ffn_obs"),
        ffn_his=_ffn_init(cfg, rng, f"{p}.ffn_his") if cfg.dual_ffn else None,
    )


def _ffn_apply(x: Tensor, ffn: FFNParams) -> Tensor:
    hidden = T.relu(T.add(T.matmul(x, ffn.w_up), ffn.b_up))
    return T.add(T.matmul(hidden, ffn.w_down), ffn.b_down)


def block_forward(x: Tensor, layer: LayerParams, cfg: StairsConfig,
                  n_history: Optional[int] = None,
                  key_mask: Optional[np.ndarray] = None,
                  ffn_tape: Optional[list] = None) -> Tuple[Tensor, AttentionEntry]:
    """Pre-norm self-attention, then per-token-type FFN, both with residuals.

    The FFN is always evaluated as two row groups (entity rows, history rows)
    so that tying the history FFN to the entity FFN reproduces the single-FFN
    output bit for bit. `key_mask` (..., R) removes dropped tokens from the
    key side; their query rows still produce outputs but carry no meaning.
    """
    n_his = cfg.n_history if n_history is None else n_history
    rows = x.shape[-2]
    u = T.layer_norm(x, layer.ln1_g, layer.ln1_b)
    q = T.matmul(u, layer.wq)
    k = T.matmul(u, layer.wk)
    v = T.matmul(u, layer.wv)
    scores = T.mul(T.matmul(q, T.transpose_last2(k)), 1.0 / np.sqrt(cfg.d_attn))
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, :]
    attn = T.softmax_rows(scores, temperature=cfg.attn_temperature, key_mask=mask)
    attended = T.matmul(T.matmul(attn, v), layer.w_proj)
    x = T.add(x, attended)

    w = T.layer_norm(x, layer.ln2_g, layer.ln2_b)
    obs_rows = T.slice_axis(w, -2, 0, rows - n_his)
    his_rows = T.slice_axis(w, -2, rows - n_his, rows)
    ffn_his = layer.ffn_his if layer.ffn_his is not None else layer.ffn_obs
    obs_out = _ffn_apply(obs_rows, layer.ffn_obs)
    his_out = _ffn_apply(his_rows, ffn_his)
    if ffn_tape is not None:
        # post-activation hidden units, for dormant-neuron analysis
        up_obs = T.relu(T.add(T.matmul(obs_rows, layer.ffn_obs.w_up), layer.ffn_obs.b_up))
        up_his = T.relu(T.add(T.matmul(his_rows, ffn_his.w_up), ffn_his.b_up))
        ffn_tape.append((up_obs.data, up_his.data))
    x = T.add(x, T.concat([obs_out, his_out], axis=-2))

    scaled = scores.data / cfg.attn_temperature
    if mask is not None:
        scaled = np.where(np.broadcast_to(mask, scaled.shape), scaled, -np.inf)
    entry = AttentionEntry(layer=-1, rstep=-1, weights=attn.data, scores=scaled)
    return x, entry


def spatial_forward(tokens: Tensor, layers: Sequence[LayerParams], cfg: StairsConfig,
                    n_history: Optional[int] = None,
                    key_mask: Optional[np.ndarray] = None,
                    record_attention: bool = False,
                    ffn_tape: Optional[list] = None) -> SpatialOutput:
    """Recursive update: each layer runs nu_l shared-weight steps seeded at zero,
    re-injecting the previous layer's output every step."""
    records: List[AttentionEntry] = []
    z_prev = tokens
    for li, layer in enumerate(layers):
        steps = cfg.effective_nu[li]
        z = None  # recursion seed is the zero state; first step reduces to f(z_prev)
        for j in range(steps):
            inp = z_prev if z is None else T.add(z, z_prev)
            z, entry = block_forward(inp, layer, cfg, n_history=n_history,
                                     key_mask=key_mask, ffn_tape=ffn_tape)
            if record_attention:
                entry.layer, entry.rstep = li, j
                records.append(entry)
        z_prev = z
    return SpatialOutput(z_sp=z_prev, attention=records)


@dataclass
class QHeadParams:
    """Fixed-action map on the own row plus a shared per-enemy attack map."""

    w_fixed: Tensor
    b_fixed: Tensor
    w_attack: Tensor
    b_attack: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "QHeadParams":
        return cls(
            w_fixed=_uniform(rng, d, (d, N_FIXED_ACTIONS), "qhead.fixed.w"),
            b_fixed=Tensor(np.zeros(N_FIXED_ACTIONS), requires_grad=True, name="qhead.fixed.b"),
            w_attack=_uniform(rng, d, (d, 1), "qhead.attack.w"),
            b_attack=Tensor(np.zeros(1), requires_grad=True, name="qhead.attack.b"),
        )


def q_values(z_sp: Tensor, head: QHeadParams, k_agents: int, k_entities: int,
             n_history: int) -> Tensor:
    """Raw Q vector (..., 6 + K_e): fixed actions from Own, attacks per enemy row."""
    lead = z_sp.shape[:-2]
    own = T.slice_axis(z_sp, -2, 0, 1)
    fixed = T.reshape(T.add(T.matmul(own, head.w_fixed), head.b_fixed),
                      lead + (N_FIXED_ACTIONS,))
    if k_entities == 0:
        return fixed
    lo = 1 + k_agents
    enemy = T.slice_axis(z_sp, -2, lo, lo + k_entities)
    attack = T.reshape(T.add(T.matmul(enemy, head.w_attack), head.b_attack),
                       lead + (k_entities,))
    return T.concat([fixed, attack], axis=-1)


def q_head(z_sp: Tensor, head: QHeadParams, avail_mask: np.ndarray,
           k_agents: int, k_entities: int, n_history: int = 2) -> Tensor:
    """Masked Q vector; unavailable actions are pinned to UNAVAILABLE_Q."""
    avail = np.asarray(avail_mask, dtype=bool)
    if avail.shape[-1] != N_FIXED_ACTIONS + k_entities:
        raise ShapeError(
            f"q_head: mask length {avail.shape[-1]} vs {N_FIXED_ACTIONS + k_entities} actions")
    raw = q_values(z_sp, head, k_agents, k_entities, n_history)
    return T.mask_fill(raw, avail, UNAVAILABLE_Q)


class StairsFormer:
    """Parameter bundle plus forward passes; population-size independent."""

    def __init__(self, cfg: StairsConfig, feature_dims: Tuple[int, int, int],
                 mixer_params=None, seed: int = 0):
        from .mixer import MixerParams  # avoid import cycle at module load

        self.cfg = cfg
        self.feature_dims = tuple(feature_dims)
        rng = np.random.default_rng(seed)
        d_own, d_oa, d_en = self.feature_dims
        self.embed = EmbeddingParams.init(cfg.d, d_own, d_oa, d_en, rng)
        self.layers = [init_layer(cfg, rng, i) for i in range(cfg.n_layers)]
        self.gru = GRUParams.init(cfg.d, rng)
        self.qhead = QHeadParams.init(cfg.d, rng)
        self.mixer = mixer_params if mixer_params is not None else MixerParams.init(
            cfg.d, state_feats=5, rng=rng)

    # -- parameters -----------------------------------------------------------

    def named_params(self) -> Dict[str, Tensor]:
        out = dict(self.embed.named())
        for i, layer in enumerate(self.layers):
            p = f"layer{i}"
            out[f"{p}.ln1.g"] = layer.ln1_g
            out[f"{p}.ln1.b"] = layer.ln1_b
            out[f"{p}.attn.q.w"] = layer.wq
            out[f"{p}.attn.k.w"] = layer.wk
            out[f"{p}.attn.v.w"] = layer.wv
            out[f"{p}.attn.proj.w"] = layer.w_proj
            out[f"{p}.ln2.g"] = layer.ln2_g
            out[f"{p}.ln2.b"] = layer.ln2_b
            for tag, ffn in (("ffn_obs", layer.ffn_obs), ("ffn_his", layer.ffn_his)):
                if ffn is None:
                    continue
                out[f"{p}.{tag}.up.w"] = ffn.w_up
                out[f"{p}.{tag}.up.b"] = ffn.b_up
                out[f"{p}.{tag}.down.w"] = ffn.w_down
                out[f"{p}.{tag}.down.b"] = ffn.b_down
        out.update(self.gru.named())
        out["qhead.fixed.w"] = self.qhead.w_fixed
        out["qhead.fixed.b"] = self.qhead.b_fixed
        out["qhead.attack.w"] = self.qhead.w_attack
        out["qhead.attack.b"] = self.qhead.b_attack
        out.update(self.mixer.named())
        return out

    def copy_params_from(self, other: "StairsFormer") -> None:
        mine, theirs = self.named_params(), other.named_params()
        for name, p in mine.items():
            p.data[...] = theirs[name].data

    # -- forward ---------------------------------------------------------------

    def init_history(self, batch_shape: Tuple[int, ...] = ()) -> HistoryState:
        shape = batch_shape + (self.cfg.d,)
        return HistoryState(h_low=Tensor(np.zeros(shape)), h_high=Tensor(np.zeros(shape)), t=0)

    def embed_batch(self, own: np.ndarray, oa: np.ndarray, en: np.ndarray) -> Tensor:
        """(B, d_own), (B, K_a, d_oa), (B, K_e, d_en) -> (B, K_a+K_e+1, d)."""
        b = own.shape[0]
        rows = [T.reshape(T.add(T.matmul(Tensor(own), self.embed.w_own), self.embed.b_own),
                          (b, 1, self.cfg.d))]
        if oa.shape[1]:
            rows.append(T.add(T.matmul(Tensor(oa), self.embed.w_oa), self.embed.b_oa))
        if en.shape[1]:
            rows.append(T.add(T.matmul(Tensor(en), self.embed.w_en), self.embed.b_en))
        return T.concat(rows, axis=-2)

    def attach_history(self, entity_tokens: Tensor, state: HistoryState) -> Tensor:
        lead = entity_tokens.shape[:-2]
        rows = [entity_tokens, T.reshape(state.h_low, lead + (1, self.cfg.d))]
        if self.cfg.high_history:
            rows.append(T.reshape(state.h_high, lead + (1, self.cfg.d)))
        return T.concat(rows, axis=-2)

    def temporal_update(self, state: HistoryState, z_sp: Tensor) -> HistoryState:
        """Low history from the LH row every step; high history via GRU on the
        interval schedule (frozen at zero when high_history is ablated)."""
        n_his = self.cfg.n_history
        lead = z_sp.shape[:-2]
        rows = z_sp.shape[-2]
        h_low = T.reshape(T.slice_axis(z_sp, -2, rows - n_his, rows - n_his + 1),
                          lead + (self.cfg.d,))
        t = state.t
        h_high = state.h_high
        if self.cfg.high_history:
            due = (t % self.cfg.t_high == 0)
            if self.cfg.defer_first_high_update and t == 0:
                due = False
            if due:
                h_high = gru_cell(state.h_high, h_low, self.gru)
        return HistoryState(h_low=h_low, h_high=h_high, t=t + 1)

    def step(self, own: np.ndarray, oa: np.ndarray, en: np.ndarray,
             state: HistoryState, key_mask: Optional[np.ndarray] = None,
             record_attention: bool = False,
             ffn_tape: Optional[list] = None) -> Tuple[Tensor, HistoryState, SpatialOutput]:
        """One decision step for a batch of agents; returns raw Q, new state, spatial out."""
        k_a, k_e = oa.shape[1], en.shape[1]
        tokens = self.attach_history(self.embed_batch(own, oa, en), state)
        if key_mask is not None:
            full = np.ones(tokens.shape[:-1], dtype=bool)
            full[..., 1:1 + k_a + k_e] = key_mask
            key_mask = full
        out = spatial_forward(tokens, self.layers, self.cfg, key_mask=key_mask,
                              record_attention=record_attention, ffn_tape=ffn_tape)
        q = q_values(out.z_sp, self.qhead, k_a, k_e, self.cfg.n_history)
        new_state = self.temporal_update(state, out.z_sp)
        return q, new_state, out

    def agent_forward(self, obs, state: HistoryState,
                      dropout_mask=None, avail_mask: Optional[np.ndarray] = None,
                      record_attention: bool = False):
        """Single-agent end-to-end pass on an EntityObservation.

        With a dropout mask the kept subsequence is evaluated (rows removed,
        not zeroed); Q entries for removed enemies are pinned unavailable.
        """
        from .dropout import apply_mask
        from .entities import assemble_sequence, embed_entities

        k_a, k_e = obs.k_agents, obs.k_entities
        ent = embed_entities(obs, self.embed)
        labels = entity_labels(k_a, k_e)
        seq = assemble_sequence(ent, state.h_low,
                                state.h_high if self.cfg.high_history else None,
                                labels=labels)
        if dropout_mask is not None:
            seq = apply_mask(seq, dropout_mask)
        out = spatial_forward(seq.tokens, self.layers, self.cfg,
                              record_attention=record_attention)
        q = self._q_from_labels(out.z_sp, seq.labels, k_e)
        if avail_mask is not None:
            avail = np.asarray(avail_mask, dtype=bool)
            if avail.shape[-1] != q.shape[-1]:
                raise ShapeError(
                    f"agent_forward: mask length {avail.shape[-1]} vs {q.shape[-1]} actions")
            q = T.mask_fill(q, avail, UNAVAILABLE_Q)
        new_state = self.temporal_update(state, out.z_sp)
        return q, new_state, out

    def _q_from_labels(self, z_sp: Tensor, labels: List[str], k_e_total: int) -> Tensor:
        """Q vector honoring dropped enemy rows: missing attacks are unavailable."""
        own = T.slice_axis(z_sp, -2, 0, 1)
        fixed = T.reshape(T.add(T.matmul(own, self.qhead.w_fixed), self.qhead.b_fixed),
                          (N_FIXED_ACTIONS,))
        if k_e_total == 0:
            return fixed
        enemy_rows = [i for i, lab in enumerate(labels) if lab.startswith("E")]
        present = {int(labels[i][1:]) - 1: pos for pos, i in enumerate(enemy_rows)}
        attack = None
        if enemy_rows:
            lo, hi = enemy_rows[0], enemy_rows[-1] + 1
            enemy = T.slice_axis(z_sp, -2, lo, hi)
            attack = T.reshape(T.add(T.matmul(enemy, self.qhead.w_attack), self.qhead.b_attack),
                               (len(enemy_rows),))
        if len(present) == k_e_total:
            return T.concat([fixed, attack], axis=-1)
        parts = [fixed]
        for j in range(k_e_total):
            if j in present:
                parts.append(T.slice_axis(attack, -1, present[j], present[j] + 1))
            else:
                parts.append(Tensor([UNAVAILABLE_Q]))  # dropped enemy: attack not scorable
        return T.concat(parts, axis=-1)
