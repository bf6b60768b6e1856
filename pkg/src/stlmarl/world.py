"""Landmark world: a cooperative particle game scored by formula robustness.

Agents live on the plane inside a clamped square arena, accelerate along
axis directions, and are rewarded through temporal-logic specifications
over the entity trajectory.  Agent i and landmark j appear in traces under
the names ``agent{i}`` and ``landmark{j}``.

The per-step reward after taking the joint action at time t is the prefix
robustness of each agent's specification on the states observed so far
(s_0..s_{t+1}), so the action's effect is part of the reward it earns and
the final step's reward scores the whole episode.  The team reward is the
robustness of the conjunction over agents, which is the per-agent minimum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .stl import (
    And,
    Atom,
    DistancePredicate,
    Eventually,
    Formula,
    Trajectory,
    conjoin,
    prefix_robustness,
)

ACTION_NAMES = ("UP", "DOWN", "LEFT", "RIGHT", "NOTHING")

# unit direction per action id, in (x, y) coordinates
_ACTION_DIRECTIONS = np.array(
    [[0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]
)

N_ACTIONS = len(ACTION_NAMES)

# observation width never shrinks below the reference 3-agent size; the
# spare slots stay zero
MIN_OBS_DIM = 18


def obs_dim_for(n_agents: int) -> int:
    return max(MIN_OBS_DIM, 4 * n_agents + 2)


@dataclass(frozen=True)
class GameConfig:
    """World constants; defaults are the reference 3-agent setup."""

    n_agents: int = 3
    horizon: int = 25
    gamma: float = 0.99
    goal_distance: float = 0.3
    accel: float = 3.0
    damping: float = 0.75
    dt: float = 0.1
    arena_half_width: float = 1.0

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("need at least one agent")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.goal_distance <= 0.0 or self.dt <= 0.0 or self.arena_half_width <= 0.0:
            raise ValueError("distances and dt must be positive")

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    @property
    def obs_dim(self) -> int:
        return obs_dim_for(self.n_agents)


@dataclass
class WorldState:
    agent_pos: np.ndarray  # (n_agents, 2)
    agent_vel: np.ndarray  # (n_agents, 2)
    landmark_pos: np.ndarray  # (n_agents, 2)
    step: int


def agent_name(i: int) -> str:
    return f"agent{i}"


def landmark_name(j: int) -> str:
    return f"landmark{j}"


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def reset_world(config: GameConfig, seed) -> WorldState:
    """Place agents and landmarks uniformly in the arena; velocities start at rest.

    ``seed`` may be anything ``np.random.default_rng`` accepts.  Sampling
    order is fixed (agents, then landmarks) so placements are reproducible.
    """
    rng = np.random.default_rng(seed)
    w = config.arena_half_width
    agent_pos = rng.uniform(-w, w, size=(config.n_agents, 2))
    landmark_pos = rng.uniform(-w, w, size=(config.n_agents, 2))
    return WorldState(
        agent_pos=agent_pos,
        agent_vel=np.zeros((config.n_agents, 2)),
        landmark_pos=landmark_pos,
        step=0,
    )


def step_world(config: GameConfig, state: WorldState, actions) -> WorldState:
    """Advance one step: acceleration impulse, damped velocity, clamped position.

    Landmarks never move.  Raises once the episode has already run for the
    full horizon; agents cannot collide (no contact forces).
    """
    if state.step >= config.horizon:
        raise RuntimeError(f"episode finished at step {config.horizon}; cannot step further")
    actions = np.asarray(actions)
    if actions.shape != (config.n_agents,):
        raise ValueError(f"expected {config.n_agents} action ids, got shape {actions.shape}")
    if actions.dtype.kind not in "iu" or (actions < 0).any() or (actions >= N_ACTIONS).any():
        raise ValueError(f"action ids must be integers in [0, {N_ACTIONS})")
    vel = state.agent_vel * config.damping + config.accel * _ACTION_DIRECTIONS[actions] * config.dt
    w = config.arena_half_width
    pos = np.clip(state.agent_pos + vel * config.dt, -w, w)
    return WorldState(
        agent_pos=pos,
        agent_vel=vel,
        landmark_pos=state.landmark_pos,
        step=state.step + 1,
    )


def observe(config: GameConfig, state: WorldState) -> np.ndarray:
    """Per-agent observation matrix of shape (n_agents, obs_dim).

    Layout for agent i, in order: own velocity (2), own position (2), every
    landmark position relative to the agent (2 per landmark), every other
    agent's position relative to the agent in increasing index order
    (2 per other agent), then zero padding up to ``obs_dim``.
    """
    n = config.n_agents
    out = np.zeros((n, config.obs_dim))
    for i in range(n):
        parts = [state.agent_vel[i], state.agent_pos[i]]
        parts.append((state.landmark_pos - state.agent_pos[i]).ravel())
        others = [state.agent_pos[j] - state.agent_pos[i] for j in range(n) if j != i]
        parts.extend(others)
        flat = np.concatenate(parts)
        out[i, : flat.size] = flat
    return out


# ---------------------------------------------------------------------------
# Task specifications
# ---------------------------------------------------------------------------


def near(agent: int, landmark: int, threshold: float) -> Formula:
    """Atom: the agent is closer than ``threshold`` to the landmark."""
    return Atom(DistancePredicate(agent_name(agent), landmark_name(landmark), threshold))


def build_visit_task(n_agents: int, horizon: int = 25, threshold: float = 0.3) -> list[Formula]:
    """Each agent must eventually visit its own landmark and its successor's.

    Agent k targets landmarks k and (k+1) mod n, each within [0, horizon].
    """
    return [
        And(
            Eventually(0, horizon, near(k, k, threshold)),
            Eventually(0, horizon, near(k, (k + 1) % n_agents, threshold)),
        )
        for k in range(n_agents)
    ]


def build_rendezvous_task(n_agents: int, horizon: int = 25, threshold: float = 0.3) -> list[Formula]:
    """All agents must eventually gather at the first landmark at one common
    time, and each agent must also eventually visit its own landmark."""
    gathered = conjoin([near(k, 0, threshold) for k in range(n_agents)])
    return [
        And(
            Eventually(0, horizon, gathered),
            Eventually(0, horizon, near(i, i, threshold)),
        )
        for i in range(n_agents)
    ]


def build_reach_task(n_agents: int, horizon: int = 25, threshold: float = 0.3) -> list[Formula]:
    """Each agent must eventually reach its own landmark (no second target)."""
    return [Eventually(0, horizon, near(i, i, threshold)) for i in range(n_agents)]


TASK_BUILDERS = {
    "task1": build_visit_task,
    "task2": build_rendezvous_task,
    "reach": build_reach_task,
}


# ---------------------------------------------------------------------------
# Rewards and episodes
# ---------------------------------------------------------------------------


def rewards_for_prefix(
    prefix: Trajectory, specs: list[Formula], floor: float = -10.0
) -> tuple[np.ndarray, float]:
    """Per-agent prefix robustness and the team value (their minimum)."""
    per_agent = np.array([prefix_robustness(f, prefix, floor) for f in specs])
    return per_agent, float(per_agent.min())


def trajectory_from_states(states: list[WorldState]) -> Trajectory:
    n = states[0].agent_pos.shape[0]
    entities = {}
    for i in range(n):
        entities[agent_name(i)] = np.array([s.agent_pos[i] for s in states])
    for j in range(n):
        entities[landmark_name(j)] = np.array([s.landmark_pos[j] for s in states])
    return Trajectory(entities)


@dataclass
class EpisodeRecord:
    """One finished episode: T+1 states and observations, T transitions.

    ``rewards[t]`` is the prefix robustness of each agent's specification on
    states 0..t+1, so stored rewards are always recomputable from the
    stored trajectory.
    """

    trajectory: Trajectory
    observations: np.ndarray  # (horizon + 1, n_agents, obs_dim)
    actions: np.ndarray  # (horizon, n_agents), int
    rewards: np.ndarray  # (horizon, n_agents)
    team_rewards: np.ndarray  # (horizon,)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def n_agents(self) -> int:
        return self.actions.shape[1]


def run_episode(
    config: GameConfig,
    specs: list[Formula],
    act_fn,
    seed: int | Sequence[int],
    reward_floor: float = -10.0,
) -> EpisodeRecord:
    """Roll one seeded episode with ``act_fn`` choosing joint actions.

    ``act_fn(obs_history, rng)`` receives the observations seen so far as an
    array of shape (t+1, n_agents, obs_dim) plus a dedicated action
    generator, and returns n_agents action ids.  Reset placement and action
    sampling draw from independent streams derived from ``seed``, so a
    policy that ignores the generator (greedy) stays deterministic too.

    ``seed`` is an integer or a sequence of integers (entropy words); the
    sequence form lets callers build non-colliding per-episode seeds such
    as ``[run_seed, iteration, episode]``.
    """
    if len(specs) != config.n_agents:
        raise ValueError(f"need one spec per agent ({config.n_agents}), got {len(specs)}")
    entropy = [int(x) for x in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    state = reset_world(config, np.random.SeedSequence(entropy + [0]))
    action_rng = np.random.default_rng(np.random.SeedSequence(entropy + [1]))

    states = [state]
    observations = [observe(config, state)]
    actions, rewards, team_rewards = [], [], []
    for _ in range(config.horizon):
        joint = np.asarray(act_fn(np.stack(observations), action_rng))
        state = step_world(config, state, joint)
        states.append(state)
        observations.append(observe(config, state))
        per_agent, team = rewards_for_prefix(trajectory_from_states(states), specs, reward_floor)
        actions.append(joint)
        rewards.append(per_agent)
        team_rewards.append(team)

    return EpisodeRecord(
        trajectory=trajectory_from_states(states),
        observations=np.stack(observations),
        actions=np.stack(actions).astype(np.int64),
        rewards=np.stack(rewards),
        team_rewards=np.asarray(team_rewards),
    )


def uniform_random_policy(n_agents: int):
    """Baseline act_fn: independent uniform action ids each step."""

    def act(obs_history, rng):
        return rng.integers(0, N_ACTIONS, size=n_agents)

    return act


# ---------------------------------------------------------------------------
# Episode persistence
# ---------------------------------------------------------------------------


def save_episode(record: EpisodeRecord, path) -> None:
    """JSON Lines, one state per line; the final line carries no transition."""
    traj = record.trajectory
    with open(path, "w", encoding="utf-8") as fh:
        for t in range(len(traj)):
            row = {
                "t": t,
                "entities": {
                    name: [float(x) for x in arr[t]] for name, arr in traj.entities.items()
                },
                "obs": record.observations[t].tolist(),
            }
            if t < record.horizon:
                row["actions"] = record.actions[t].tolist()
                row["rewards"] = record.rewards[t].tolist()
                row["team_reward"] = float(record.team_rewards[t])
            fh.write(json.dumps(row) + "\n")


def load_episode(path) -> EpisodeRecord:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if len(rows) < 2:
        raise ValueError(f"{path}: an episode needs at least one transition")
    names = list(rows[0]["entities"])
    entities = {name: np.array([row["entities"][name] for row in rows]) for name in names}
    last = rows[-1]
    if "actions" in last:
        raise ValueError(f"{path}: final line must be a bare state")
    for row in rows[:-1]:
        if "actions" not in row:
            raise ValueError(f"{path}: line t={row['t']} is missing its transition")
    return EpisodeRecord(
        trajectory=Trajectory(entities),
        observations=np.array([row["obs"] for row in rows]),
        actions=np.array([row["actions"] for row in rows[:-1]], dtype=np.int64),
        rewards=np.array([row["rewards"] for row in rows[:-1]]),
        team_rewards=np.array([row["team_reward"] for row in rows[:-1]]),
    )
