"""Desk-scale cooperative skirmish Dec-POMDP with variable unit counts.

Two teams of identical units fight on a continuous 2D map. Controlled
agents pick from {no-op, stop, move N/S/E/W, attack enemy j}; the enemy
team runs a fixed script (attack the nearest ally in range, otherwise
close distance). All agents share one reward built from damage, kills and
a win bonus, scaled so a flawless episode returns 20.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .entities import EntityObservation
from .network import ACTION_NOOP, ACTION_STOP, N_FIXED_ACTIONS

MAX_HEALTH = 10.0
ATTACK_DAMAGE = 3.0
ENEMY_DAMAGE = 2.5          # scripted side hits softer; coordination decides fights
ENEMY_COOLDOWN = 2          # scripted side shoots every other step
COOLDOWN_STEPS = 0          # steps an agent must wait between attacks
MOVE_STEP = 1.0
KILL_BONUS = 5.0
WIN_BONUS = 20.0
TARGET_RETURN = 20.0        # perfect-episode return after scaling
STATE_UNIT_FEATS = 5        # [is_ally, x, y, health, cooldown]
OBS_FEATS = 4               # own and per-unit observation feature width

_MOVES = {2: (0.0, 1.0), 3: (0.0, -1.0), 4: (1.0, 0.0), 5: (-1.0, 0.0)}  # N, S, E, W


@dataclass
class TaskSpec:
    n_allies: int
    n_enemies: int
    map_size: float = 16.0
    sight_range: float = 6.0
    attack_range: float = 3.0
    horizon: int = 40
    name: str = ""

    def __post_init__(self):
        if self.n_allies < 1 or self.n_enemies < 1:
            raise ValueError("need at least one unit per side")
        if self.horizon > 60 or self.horizon < 1:
            raise ValueError(f"horizon must be in [1, 60], got {self.horizon}")
        if min(self.sight_range, self.attack_range, self.map_size) <= 0:
            raise ValueError("ranges and map size must be positive")
        if not self.name:
            self.name = f"{self.n_allies}v{self.n_enemies}"

    @classmethod
    def from_name(cls, name: str, **kw) -> "TaskSpec":
        try:
            a, e = name.lower().split("v")
            return cls(n_allies=int(a), n_enemies=int(e), name=name, **kw)
        except (ValueError, AttributeError):
            raise ValueError(f"task name must look like '3v3', got {name!r}") from None

    @property
    def n_actions(self) -> int:
        return N_FIXED_ACTIONS + self.n_enemies

    @property
    def reward_scale(self) -> float:
        raw_max = self.n_enemies * (MAX_HEALTH + KILL_BONUS) + WIN_BONUS
        return TARGET_RETURN / raw_max


@dataclass
class UnitState:
    position: np.ndarray
    health: float = MAX_HEALTH
    cooldown: int = 0

    @property
    def alive(self) -> bool:
        return self.health > 0.0


@dataclass
class EnvState:
    allies: List[UnitState]
    enemies: List[UnitState]
    t: int = 0
    under_fire: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _dist(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


class SkirmishEnv:
    """One episode of cooperative combat; fully determined by (task, seed)."""

    def __init__(self, task: TaskSpec):
        self.task = task
        self.state: Optional[EnvState] = None

    # -- lifecycle ---------------------------------------------------------

    def reset(self, rng: np.random.Generator) -> EnvState:
        t = self.task
        lo, hi = 0.25 * t.map_size, 0.75 * t.map_size

        def spawn(x0, x1):
            return UnitState(position=np.array([
                rng.uniform(x0, x1), rng.uniform(lo, hi)]))

        allies = [spawn(0.2 * t.map_size, 0.4 * t.map_size) for _ in range(t.n_allies)]
        enemies = [spawn(0.6 * t.map_size, 0.8 * t.map_size) for _ in range(t.n_enemies)]
        self.state = EnvState(allies=allies, enemies=enemies, t=0,
                              under_fire=np.zeros(t.n_allies, dtype=bool))
        return self.state

    # -- observations --------------------------------------------------------

    def observe(self, agent_i: int) -> Tuple[EntityObservation, np.ndarray]:
        """Local view and availability mask for one ally.

        Own features: [health, cooldown, x, y] (all normalized). Every other
        unit contributes [visible, rel_x, rel_y, health]; units beyond sight
        (or dead) are all-zero with the visible flag down. Dead agents see
        zeros and may only no-op.
        """
        t, s = self.task, self.state
        me = s.allies[agent_i]
        avail = np.zeros(t.n_actions, dtype=bool)
        if not me.alive:
            avail[ACTION_NOOP] = True
            return EntityObservation(
                own=np.zeros(OBS_FEATS),
                other_agents=np.zeros((t.n_allies - 1, OBS_FEATS)),
                env_entities=np.zeros((t.n_enemies, OBS_FEATS)),
            ), avail

        cd_norm = me.cooldown / max(COOLDOWN_STEPS, 1)
        own = np.array([me.health / MAX_HEALTH, cd_norm,
                        me.position[0] / t.map_size, me.position[1] / t.map_size])

        def unit_feats(u: UnitState) -> np.ndarray:
            if not u.alive:
                return np.zeros(OBS_FEATS)
            d = _dist(me.position, u.position)
            if d > t.sight_range:
                return np.zeros(OBS_FEATS)
            return np.array([1.0,
                             (u.position[0] - me.position[0]) / t.sight_range,
                             (u.position[1] - me.position[1]) / t.sight_range,
                             u.health / MAX_HEALTH])

        others = np.array([unit_feats(u) for j, u in enumerate(s.allies) if j != agent_i])
        if others.size == 0:
            others = np.zeros((0, OBS_FEATS))
        enemies = np.array([unit_feats(u) for u in s.enemies])

        avail[ACTION_STOP] = True
        avail[2:N_FIXED_ACTIONS] = True  # moves are clipped at map edges, never illegal
        if me.cooldown == 0:
            for j, u in enumerate(s.enemies):
                if u.alive and _dist(me.position, u.position) <= t.attack_range:
                    avail[N_FIXED_ACTIONS + j] = True
        return EntityObservation(own=own, other_agents=others, env_entities=enemies), avail

    def observe_all(self) -> Tuple[List[EntityObservation], np.ndarray]:
        pairs = [self.observe(i) for i in range(self.task.n_allies)]
        return [p[0] for p in pairs], np.array([p[1] for p in pairs])

    def state_units(self) -> np.ndarray:
        """Global state as unit feature rows (mixer input)."""
        t = self.task
        rows = []
        for is_ally, team in ((1.0, self.state.allies), (0.0, self.state.enemies)):
            for u in team:
                if u.alive:
                    rows.append([is_ally, u.position[0] / t.map_size,
                                 u.position[1] / t.map_size, u.health / MAX_HEALTH,
                                 u.cooldown / max(COOLDOWN_STEPS, 1)])
                else:
                    rows.append([is_ally, 0.0, 0.0, 0.0, 0.0])
        return np.array(rows)

    # -- dynamics ----------------------------------------------------------------

    def step(self, joint_action: np.ndarray,
             rng: np.random.Generator) -> Tuple[float, bool, Optional[str]]:
        """Advance one tick; returns (scaled shared reward, terminal, outcome)."""
        t, s = self.task, self.state
        acts = np.asarray(joint_action, dtype=np.int64)
        _, avail = self.observe_all()
        for i, a in enumerate(acts):
            if not avail[i, a]:
                raise ValueError(f"agent {i}: action {a} not available")

        raw = 0.0
        took_fire = np.zeros(t.n_allies, dtype=bool)

        # ally moves resolve simultaneously from pre-step positions
        for i, a in enumerate(acts):
            me = s.allies[i]
            if me.alive and int(a) in _MOVES:
                dx, dy = _MOVES[int(a)]
                me.position = np.clip(me.position + np.array([dx, dy]) * MOVE_STEP,
                                      0.0, t.map_size)
        # ally attacks in index order; damage capped at remaining health
        for i, a in enumerate(acts):
            me = s.allies[i]
            if not me.alive or a < N_FIXED_ACTIONS:
                continue
            target = s.enemies[a - N_FIXED_ACTIONS]
            if not target.alive or _dist(me.position, target.position) > t.attack_range:
                continue  # target died earlier this tick or slipped out of range
            dealt = min(ATTACK_DAMAGE, target.health)
            target.health -= dealt
            me.cooldown = COOLDOWN_STEPS
            raw += dealt
            if not target.alive:
                raw += KILL_BONUS

        # scripted enemies: attack the nearest visible ally in range, approach the
        # nearest visible ally otherwise, and hold position when none is in sight
        for u in s.enemies:
            if not u.alive:
                continue
            visible = [(j, al) for j, al in enumerate(s.allies)
                       if al.alive and _dist(u.position, al.position) <= t.sight_range]
            if not visible:
                continue
            j, nearest = min(visible, key=lambda p: (_dist(u.position, p[1].position), p[0]))
            d = _dist(u.position, nearest.position)
            if d <= t.attack_range and u.cooldown == 0:
                nearest.health = max(0.0, nearest.health - ENEMY_DAMAGE)
                u.cooldown = ENEMY_COOLDOWN
                took_fire[j] = True
            elif d > 1e-9:
                # same cardinal-move grid as the agents
                delta = nearest.position - u.position
                if abs(delta[0]) >= abs(delta[1]):
                    step = np.array([np.sign(delta[0]), 0.0]) * MOVE_STEP
                else:
                    step = np.array([0.0, np.sign(delta[1])]) * MOVE_STEP
                u.position = np.clip(u.position + step, 0.0, t.map_size)

        for u in s.allies + s.enemies:
            if u.cooldown > 0:
                u.cooldown -= 1
        s.under_fire = took_fire
        s.t += 1

        enemies_alive = any(u.alive for u in s.enemies)
        allies_alive = any(u.alive for u in s.allies)
        outcome = None
        if not enemies_alive:
            raw += WIN_BONUS
            outcome = "win"
        elif not allies_alive:
            outcome = "loss"
        elif s.t >= t.horizon:
            outcome = "timeout"
        return raw * t.reward_scale, outcome is not None, outcome


# -- scripted behavior policies ------------------------------------------------


def _visible_enemies(obs: EntityObservation, avail: np.ndarray):
    """(index, health, distance, attackable) for enemies with the visible flag up."""
    out = []
    for j, row in enumerate(obs.env_entities):
        if row[0] > 0.0:
            out.append((j, row[3], float(np.hypot(row[1], row[2])),
                        bool(avail[N_FIXED_ACTIONS + j])))
    return out

def _move_toward(dx: float, dy: float) -> int:
    if abs(dx) >= abs(dy):
        return 4 if dx > 0 else 5
    return 2 if dy > 0 else 3


def _move_away(dx: float, dy: float) -> int:
    return _move_toward(-dx, -dy)


def expert_policy(obs: EntityObservation, avail: np.ndarray, under_fire: bool,
                  rng: np.random.Generator) -> int:
    """Focus the weakest visible enemy; fall back retreat below 25% health."""
    if not avail[ACTION_STOP]:
        return ACTION_NOOP  # dead
    vis = _visible_enemies(obs, avail)
    if obs.own[0] < 0.25 and under_fire and vis:
        j, _, _, _ = min(vis, key=lambda v: (v[2], v[0]))
        row = obs.env_entities[j]
        return _move_away(row[1], row[2])
    if not vis:
        return 4  # advance east toward the enemy spawn side
    j, _, _, attackable = min(vis, key=lambda v: (v[1], v[2], v[0]))
    if attackable:
        return N_FIXED_ACTIONS + j
    row = obs.env_entities[j]
    return _move_toward(row[1], row[2])


def medium_policy(obs: EntityObservation, avail: np.ndarray, under_fire: bool,
                  rng: np.random.Generator, epsilon: float = 0.3) -> int:
    """Attack the nearest visible enemy, with epsilon-random legal actions."""
    if not avail[ACTION_STOP]:
        return ACTION_NOOP
    if rng.random() < epsilon:
        return int(rng.choice(np.flatnonzero(avail)))
    vis = _visible_enemies(obs, avail)
    if not vis:
        legal_moves = [a for a in range(2, N_FIXED_ACTIONS) if avail[a]]
        return int(rng.choice(legal_moves))
    j, _, _, attackable = min(vis, key=lambda v: (v[2], v[0]))
    if attackable:
        return N_FIXED_ACTIONS + j
    row = obs.env_entities[j]
    return _move_toward(row[1], row[2])


def random_policy(obs: EntityObservation, avail: np.ndarray, under_fire: bool,
                  rng: np.random.Generator) -> int:
    return int(rng.choice(np.flatnonzero(avail)))


def scripted_policy(quality: str, obs: EntityObservation, avail: np.ndarray,
                    under_fire: bool, rng: np.random.Generator,
                    epsilon: Optional[float] = None) -> int:
    if quality == "expert":
        return expert_policy(obs, avail, under_fire, rng)
    if quality == "medium":
        eps = 0.3 if epsilon is None else epsilon
        return medium_policy(obs, avail, under_fire, rng, epsilon=eps)
    if quality == "random":
        return random_policy(obs, avail, under_fire, rng)
    raise ValueError(f"unknown policy quality {quality!r}")
