"""On-policy training for the transformer policy.

One iteration collects a batch of seeded episodes, scores them against the
task formulas, and runs clipped-surrogate updates on two disjoint parameter
groups: the encoder plus value decoder minimize a temporal-difference
regression on team rewards, the action decoder maximizes the clipped policy
objective with advantages shared across agents.  Rollout collection is
embarrassingly parallel over episodes; every episode is reproducible from
its seed alone, so the parallel and sequential schedules produce identical
buffers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import (
    ModelConfig,
    TransformerPolicy,
    action_log_probs,
    encode_tokens,
    encoder_forward,
    sample_joint_action,
    value_forward,
)
from .stl import Formula, prefix_robustness
from .tensor import Parameters, Tensor
from .world import EpisodeRecord, GameConfig, rewards_for_prefix, run_episode

_OPTIMIZERS = ("momentum", "adam")
_REWARD_MODES = ("prefix", "increment", "progress")


class TrainingDiverged(RuntimeError):
    """Raised when a loss or a parameter stops being finite.

    Carries the iteration index and a parameter snapshot taken at the
    failure point so the state can be dumped for inspection.
    """

    def __init__(self, message: str, iteration: int, snapshot: dict[str, np.ndarray]):
        super().__init__(message)
        self.iteration = iteration
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for the update loop.

    ``rollouts_per_iter`` is the episode batch size per iteration.  The
    ``reward_mode`` selects how a step is scored: the team robustness of
    the trace so far ("prefix"), its one-step change ("increment"), or the
    one-step change of the per-agent mean of the trace robustness
    ("progress").  The last is the densest signal: the team increment only
    moves when the lagging agent improves on the worst score seen so far,
    while the per-agent mean pays every agent's own improvement at the
    step it happens.
    """

    iterations: int = 100
    rollouts_per_iter: int = 8
    learning_rate: float = 0.01
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    ppo_epochs: int = 4
    seed: int = 0
    optimizer: str = "momentum"
    momentum: float = 0.9
    normalize_advantages: bool = True
    reward_mode: str = "prefix"
    reward_floor: float = -10.0
    workers: int = 4

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.rollouts_per_iter < 1:
            raise ValueError("rollouts_per_iter must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if self.ppo_epochs < 1:
            raise ValueError("ppo_epochs must be >= 1")
        if self.optimizer not in _OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {_OPTIMIZERS}, got {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.reward_mode not in _REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {_REWARD_MODES}, got {self.reward_mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------


@dataclass
class RolloutBuffer:
    """Episode batch plus everything the updates reuse.

    ``old_log_probs`` and ``values`` are teacher-forced re-reads of the
    stored episodes under the collection-time parameters; ``values`` has one
    extra row holding the value read of the complete trace.  In increment
    and progress modes ``team_rewards`` holds per-step score changes while
    the records keep the raw prefix scores.
    """

    episodes: list[EpisodeRecord]
    observations: np.ndarray  # (episodes, horizon + 1, n_agents, obs_dim)
    actions: np.ndarray  # (episodes, horizon, n_agents)
    team_rewards: np.ndarray  # (episodes, horizon)
    old_log_probs: np.ndarray  # (episodes, horizon, n_agents)
    values: np.ndarray  # (episodes, horizon + 1, n_agents)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def n_agents(self) -> int:
        return self.actions.shape[2]


def encode_episode(policy: TransformerPolicy, observations: np.ndarray):
    """Encoder memory for a full stored episode, detached from the graph.

    Returns (memory array, time ids).  The time-causal mask makes row t a
    function of observations up to t only, so one pass over the whole trace
    serves every decision step.
    """
    with T.no_grad():
        batch = encode_tokens(policy, observations)
        memory = encoder_forward(policy, batch)
    return memory.data.copy(), batch.time_ids


def evaluate_episode(policy: TransformerPolicy, observations: np.ndarray,
                     actions: np.ndarray):
    """Teacher-forced read of a stored episode.

    Returns (log_probs (T, n), values (T + 1, n)) under the current
    parameters, computed exactly the way the decoder loss recomputes them
    so that the first update epoch sees probability ratios of exactly one.
    """
    horizon = actions.shape[0]
    memory_data, time_ids = encode_episode(policy, observations)
    with T.no_grad():
        memory = Tensor(memory_data)
        values = np.stack([
            value_forward(policy, memory, time_ids, t).data.copy()
            for t in range(horizon + 1)
        ])
        log_probs = np.stack([
            action_log_probs(policy, memory, time_ids, t, actions[t]).data.copy()
            for t in range(horizon)
        ])
    return log_probs, values


def collect_rollouts(
    game: GameConfig,
    specs: list[Formula],
    policy: TransformerPolicy,
    n_episodes: int,
    seed: int | Sequence[int],
    workers: int = 4,
    reward_mode: str = "prefix",
    reward_floor: float = -10.0,
) -> RolloutBuffer:
    """Roll ``n_episodes`` seeded episodes and package them for updates.

    Episode k draws its randomness from entropy ``[*seed, k]``, so the
    batch content does not depend on ``workers`` or thread scheduling.
    """
    if reward_mode not in _REWARD_MODES:
        raise ValueError(f"reward_mode must be one of {_REWARD_MODES}, got {reward_mode!r}")
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]

    def act(obs_history, rng):
        joint, _, _ = sample_joint_action(policy, obs_history, rng)
        return joint

    def one(k: int):
        record = run_episode(game, specs, act, base + [k], reward_floor=reward_floor)
        log_probs, values = evaluate_episode(policy, record.observations, record.actions)
        return record, log_probs, values

    if workers > 1 and n_episodes > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n_episodes)))
    else:
        results = [one(k) for k in range(n_episodes)]

    records = [r[0] for r in results]
    team = np.stack([r.team_rewards for r in records])
    if reward_mode == "increment":
        # Step 0 is scored against the robustness of the bare initial state.
        shifted = np.empty_like(team)
        for d, record in enumerate(records):
            _, first = rewards_for_prefix(record.trajectory.prefix(0), specs, floor=reward_floor)
            previous = np.concatenate([[first], record.team_rewards[:-1]])
            shifted[d] = record.team_rewards - previous
        team = shifted
    elif reward_mode == "progress":
        # Dense shaping: the change in the per-agent mean of the prefix
        # robustness, so each agent that improves on its own best pays the
        # team without waiting for the lagging agent to catch up.
        shifted = np.empty_like(team)
        for d, record in enumerate(records):
            scores = np.array([
                np.mean([prefix_robustness(f, record.trajectory.prefix(t), floor=reward_floor)
                         for f in specs])
                for t in range(record.trajectory.last_index + 1)
            ])
            shifted[d] = scores[1:] - scores[:-1]
        team = shifted
    return RolloutBuffer(
        episodes=records,
        observations=np.stack([r.observations for r in records]),
        actions=np.stack([r.actions for r in records]),
        team_rewards=team,
        old_log_probs=np.stack([r[1] for r in results]),
        values=np.stack([r[2] for r in results]),
    )


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------


def compute_gae(team_rewards: np.ndarray, values: np.ndarray,
                gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates from a reward and value sequence.

    ``values`` must have one entry more than ``team_rewards``; its last
    entry is the bootstrap value for the state after the final step.  The
    estimates follow the usual backward recursion
    A_t = delta_t + gamma * lam * A_{t+1} with
    delta_t = r_t + gamma * V_{t+1} - V_t.
    """
    rewards = np.asarray(team_rewards, dtype=float)
    vals = np.asarray(values, dtype=float)
    if rewards.ndim != 1 or vals.ndim != 1:
        raise ValueError("compute_gae expects 1-d reward and value sequences")
    if vals.shape[0] != rewards.shape[0] + 1:
        raise ValueError(
            f"need {rewards.shape[0] + 1} values for {rewards.shape[0]} rewards, got {vals.shape[0]}"
        )
    deltas = rewards + gamma * vals[1:] - vals[:-1]
    advantages = np.empty_like(deltas)
    acc = 0.0
    for t in range(deltas.shape[0] - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        advantages[t] = acc
    return advantages


def batch_advantages(buffer: RolloutBuffer, gamma: float, lam: float,
                     normalize: bool = True) -> np.ndarray:
    """Shared team advantages for a whole batch, one row per episode.

    The value sequence is the per-agent mean of the buffered value reads
    with a zero bootstrap at the horizon; normalization standardizes over
    the entire batch.
    """
    out = np.empty_like(buffer.team_rewards)
    for d in range(buffer.n_episodes):
        vhat = buffer.values[d].mean(axis=1)
        seq = np.concatenate([vhat[:-1], [0.0]])
        out[d] = compute_gae(buffer.team_rewards[d], seq, gamma, lam)
    if normalize:
        out = (out - out.mean()) / (out.std() + 1e-8)
    return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def predicted_values(policy: TransformerPolicy, observations: np.ndarray) -> np.ndarray:
    """(T + 1, n_agents) value reads of one episode, detached."""
    memory_data, time_ids = encode_episode(policy, observations)
    with T.no_grad():
        memory = Tensor(memory_data)
        return np.stack([
            value_forward(policy, memory, time_ids, t).data.copy()
            for t in range(observations.shape[0])
        ])


def loss_encoder_value(policy: TransformerPolicy, buffer: RolloutBuffer,
                       gamma: float, target_values: np.ndarray | None = None) -> Tensor:
    """Temporal-difference regression for the encoder and value decoder.

    For each agent and step the value read of the history through t chases
    the constant target r_t + gamma * V(history through t + 1); at the last
    step the target uses the value read of the complete trace.  The sum of
    squared residuals is divided by the agent count and averaged over
    episodes.  ``target_values`` (episodes, T + 1, n_agents) freezes the
    targets; by default they are recomputed from the current parameters,
    detached.
    """
    if target_values is None:
        target_values = np.stack([
            predicted_values(policy, buffer.observations[d])
            for d in range(buffer.n_episodes)
        ])
    expected = (buffer.n_episodes, buffer.horizon + 1, buffer.n_agents)
    if target_values.shape != expected:
        raise ValueError(f"target_values shape {target_values.shape} != {expected}")
    episode_terms = []
    for d in range(buffer.n_episodes):
        batch = encode_tokens(policy, buffer.observations[d])
        memory = encoder_forward(policy, batch)
        squares = []
        for t in range(buffer.horizon):
            value_t = value_forward(policy, memory, batch.time_ids, t)
            target = buffer.team_rewards[d, t] + gamma * target_values[d, t + 1]
            residual = T.add(Tensor(target), T.mul(value_t, -1.0))
            squares.append(T.mul(residual, residual))
        episode_terms.append(T.mul(T.tsum(T.concat(squares)), 1.0 / buffer.n_agents))
    total = episode_terms[0]
    for term in episode_terms[1:]:
        total = T.add(total, term)
    return T.mul(total, 1.0 / buffer.n_episodes)


def loss_decoder(policy: TransformerPolicy, buffer: RolloutBuffer,
                 advantages: np.ndarray, clip_epsilon: float,
                 memories: list[tuple[np.ndarray, np.ndarray]] | None = None) -> Tensor:
    """Clipped-surrogate objective for the action decoder, negated.

    Probability ratios compare teacher-forced log-probabilities under the
    current decoder with the buffered ones; the advantage of a step is
    shared by all agents.  The encoder memory enters as a constant, so this
    loss sends no gradient into the encoder or value parameters.
    """
    if advantages.shape != buffer.team_rewards.shape:
        raise ValueError(f"advantages shape {advantages.shape} != {buffer.team_rewards.shape}")
    if memories is None:
        memories = [
            encode_episode(policy, buffer.observations[d])
            for d in range(buffer.n_episodes)
        ]
    lo, hi = 1.0 - clip_epsilon, 1.0 + clip_epsilon
    episode_terms = []
    for d in range(buffer.n_episodes):
        memory = Tensor(memories[d][0])
        time_ids = memories[d][1]
        step_terms = []
        for t in range(buffer.horizon):
            new_lp = action_log_probs(policy, memory, time_ids, t, buffer.actions[d, t])
            ratio = T.exp(T.add(new_lp, Tensor(-buffer.old_log_probs[d, t])))
            adv = float(advantages[d, t])
            surrogate = T.minimum(T.mul(ratio, adv), T.mul(T.clip(ratio, lo, hi), adv))
            step_terms.append(surrogate)
        episode_terms.append(T.mul(T.tsum(T.concat(step_terms)), 1.0 / buffer.n_agents))
    total = episode_terms[0]
    for term in episode_terms[1:]:
        total = T.add(total, term)
    return T.mul(total, -1.0 / buffer.n_episodes)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class MomentumSGD:
    """Gradient descent with classical momentum on a named subset."""

    def __init__(self, params: Parameters, names: Sequence[str],
                 learning_rate: float, momentum: float = 0.9):
        self.params = params
        self.names = list(names)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(params[name].data) for name in self.names}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name in self.names:
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name]
            self.params[name].data -= self.learning_rate * v


class Adam:
    """Adam with bias correction on a named subset."""

    def __init__(self, params: Parameters, names: Sequence[str], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.names = list(names)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m = {name: np.zeros_like(params[name].data) for name in self.names}
        self.v = {name: np.zeros_like(params[name].data) for name in self.names}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.steps += 1
        correct1 = 1.0 - self.beta1 ** self.steps
        correct2 = 1.0 - self.beta2 ** self.steps
        for name in self.names:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correct1
            v_hat = self.v[name] / correct2
            self.params[name].data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig, params: Parameters, names: Sequence[str]):
    if config.optimizer == "adam":
        return Adam(params, names, config.learning_rate)
    return MomentumSGD(params, names, config.learning_rate, config.momentum)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    policy: TransformerPolicy
    metrics: list[dict] = field(default_factory=list)


METRIC_COLUMNS = (
    "iteration",
    "env_steps",
    "mean_robustness",
    "satisfaction_rate",
    "loss_enc_v",
    "loss_dec",
)


def _snapshot(params: Parameters) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in params.state_dict().items()}


def train(
    game: GameConfig,
    specs: list[Formula],
    model_config: ModelConfig,
    config: TrainConfig,
    policy: TransformerPolicy | None = None,
    on_iteration: Callable[[int, dict, TransformerPolicy], None] | None = None,
) -> TrainResult:
    """Run the full update loop and return the policy with metric rows.

    Each iteration: collect rollouts, estimate shared advantages from the
    buffered values, run ``ppo_epochs`` descent steps on the encoder and
    value parameters, then ``ppo_epochs`` steps on the action decoder
    against the refreshed, detached encoder memory.  The reported losses
    are the first-epoch values, read at the collection-time parameters.
    ``on_iteration`` is called after each iteration with (iteration number,
    metrics row, policy).  Non-finite losses or parameters abort with
    ``TrainingDiverged``.
    """
    if len(specs) != game.n_agents:
        raise ValueError(f"need one spec per agent ({game.n_agents}), got {len(specs)}")
    if policy is None:
        policy = TransformerPolicy.init(model_config, config.seed)
    phi = policy.phi_names()
    theta = policy.theta_names()
    opt_phi = make_optimizer(config, policy.params, phi)
    opt_theta = make_optimizer(config, policy.params, theta)
    metrics: list[dict] = []
    env_steps = 0

    # Divergence surfaces as the explicit abort below, not as warnings from
    # the transiently overflowing arithmetic that precedes it.
    for iteration in range(1, config.iterations + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            buffer = collect_rollouts(
                game, specs, policy, config.rollouts_per_iter,
                seed=[config.seed, iteration],
                workers=config.workers,
                reward_mode=config.reward_mode,
                reward_floor=config.reward_floor,
            )
            env_steps += buffer.n_episodes * buffer.horizon
            advantages = batch_advantages(
                buffer, config.gamma, config.gae_lambda,
                normalize=config.normalize_advantages,
            )

            first_enc_v = None
            for _ in range(config.ppo_epochs):
                loss = loss_encoder_value(policy, buffer, config.gamma)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(
                        f"non-finite encoder/value loss at iteration {iteration}",
                        iteration, _snapshot(policy.params))
                if first_enc_v is None:
                    first_enc_v = float(loss.data)
                grads = T.backward(loss, policy.params)
                opt_phi.step(grads)

            memories = [
                encode_episode(policy, buffer.observations[d])
                for d in range(buffer.n_episodes)
            ]
            first_dec = None
            for _ in range(config.ppo_epochs):
                loss = loss_decoder(policy, buffer, advantages,
                                    config.clip_epsilon, memories)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(
                        f"non-finite decoder loss at iteration {iteration}",
                        iteration, _snapshot(policy.params))
                if first_dec is None:
                    first_dec = float(loss.data)
                grads = T.backward(loss, policy.params)
                opt_theta.step(grads)

        try:
            policy.params.check_finite()
        except T.NonFiniteError as exc:
            raise TrainingDiverged(
                f"non-finite parameter after iteration {iteration}: {exc}",
                iteration, _snapshot(policy.params)) from exc

        final_team = np.array([r.team_rewards[-1] for r in buffer.episodes])
        row = {
            "iteration": iteration,
            "env_steps": env_steps,
            "mean_robustness": float(final_team.mean()),
            "satisfaction_rate": float((final_team > 0.0).mean()),
            "loss_enc_v": first_enc_v,
            "loss_dec": first_dec,
        }
        metrics.append(row)
        if on_iteration is not None:
            on_iteration(iteration, row, policy)

    return TrainResult(policy=policy, metrics=metrics)
