"""Time-causal transformer policy for cooperative multi-agent control.

Three pieces share one token stream:

* an encoder over the joint observation history, one token per
  (agent, time) pair, masked so a token only attends to its own time or
  earlier (full attention across agents within a timestep);
* a value decoder that reads the current timestep's agent tokens,
  cross-attends to the whole history representation, and emits one scalar
  value per agent;
* an action decoder that emits each agent's categorical action
  distribution autoregressively in a fixed ascending agent order, so agent
  i is conditioned on the actions of agents 0..i-1 but never on its own or
  later agents' actions.

Tokens are laid out time-major (index = t * n_agents + agent), and carry
parameter-free sinusoidal position terms: the first half of the embedding
encodes the time index, the second half the agent index.

Parameter names are prefixed ``enc.``/``val.`` (the encoder-and-value
group) and ``dec.`` (the action-decoder group); the trainer updates the
two groups with separate losses and relies on this partition.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameters, Tensor
from .world import GameConfig, N_ACTIONS


@dataclass(frozen=True)
class ModelConfig:
    n_agents: int
    horizon: int
    obs_dim: int
    embed_dim: int = 64
    n_heads: int = 4
    n_encoder_blocks: int = 2
    n_value_blocks: int = 1
    n_decoder_blocks: int = 2
    n_actions: int = N_ACTIONS
    ff_mult: int = 4

    def __post_init__(self):
        if min(self.n_agents, self.horizon, self.obs_dim, self.n_heads, self.ff_mult) < 1:
            raise ValueError("all model dimensions must be positive")
        if min(self.n_encoder_blocks, self.n_value_blocks, self.n_decoder_blocks) < 1:
            raise ValueError("need at least one block per component")
        if self.n_actions < 2:
            raise ValueError("need at least two actions")
        # the embedding must split into a time half and an agent half, and
        # each half of a head's slice must be addressable, hence 2 * heads
        if self.embed_dim % (2 * self.n_heads) != 0:
            raise ValueError("embed_dim must be divisible by 2 * n_heads")

    @classmethod
    def for_game(cls, game: GameConfig, **overrides) -> "ModelConfig":
        return cls(
            n_agents=game.n_agents,
            horizon=game.horizon,
            obs_dim=game.obs_dim,
            n_actions=game.n_actions,
            **overrides,
        )


@dataclass
class TokenBatch:
    tokens: Tensor  # (n_tokens, embed_dim)
    time_ids: np.ndarray  # (n_tokens,)
    agent_ids: np.ndarray  # (n_tokens,)


# ---------------------------------------------------------------------------
# Positional terms
# ---------------------------------------------------------------------------


def _sinusoid(positions: np.ndarray, width: int) -> np.ndarray:
    """Classic sin/cos interleave: pair j of ``width`` dims has wavelength
    10000^(2j/width); even dims take sin, odd dims cos."""
    out = np.zeros((len(positions), width))
    pair = np.arange(width // 2)
    angle = positions[:, None] / np.power(10000.0, 2.0 * pair / width)[None, :]
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def positional_encoding(time_ids, agent_ids, embed_dim: int) -> np.ndarray:
    """Two-axis position term: time in the first half, agent in the second."""
    time_ids = np.asarray(time_ids, dtype=np.float64)
    agent_ids = np.asarray(agent_ids, dtype=np.float64)
    half = embed_dim // 2
    return np.concatenate([_sinusoid(time_ids, half), _sinusoid(agent_ids, half)], axis=1)


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------

_INIT_STD = 0.02


def _init_linear(params, prefix, n_in, n_out, rng):
    params.add(f"{prefix}.w", rng.normal(0.0, _INIT_STD, size=(n_in, n_out)))
    params.add(f"{prefix}.b", np.zeros(n_out))


def _init_ln(params, prefix, dim):
    params.add(f"{prefix}.g", np.ones(dim))
    params.add(f"{prefix}.b", np.zeros(dim))


def _init_attn(params, prefix, dim, rng):
    for part in ("wq", "wk", "wv", "wo"):
        params.add(f"{prefix}.{part}", rng.normal(0.0, _INIT_STD, size=(dim, dim)))
    for part in ("bq", "bk", "bv", "bo"):
        params.add(f"{prefix}.{part}", np.zeros(dim))


def _init_block(params, prefix, cfg, rng, cross: bool):
    _init_attn(params, f"{prefix}.self", cfg.embed_dim, rng)
    _init_ln(params, f"{prefix}.ln1", cfg.embed_dim)
    if cross:
        _init_attn(params, f"{prefix}.cross", cfg.embed_dim, rng)
        _init_ln(params, f"{prefix}.ln2", cfg.embed_dim)
    _init_linear(params, f"{prefix}.ff.in", cfg.embed_dim, cfg.ff_mult * cfg.embed_dim, rng)
    _init_linear(params, f"{prefix}.ff.out", cfg.ff_mult * cfg.embed_dim, cfg.embed_dim, rng)
    _init_ln(params, f"{prefix}.ln3", cfg.embed_dim)


class TransformerPolicy:
    """Parameter container plus configuration; forward passes live below.

    ``phi_names``/``theta_names`` partition every parameter: the encoder
    and value components form one update group, the action decoder the
    other.
    """

    PHI_PREFIXES = ("enc.", "val.")
    THETA_PREFIX = "dec."

    def __init__(self, config: ModelConfig, params: Parameters):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "TransformerPolicy":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        params = Parameters()
        _init_linear(params, "enc.embed", config.obs_dim, config.embed_dim, rng)
        for k in range(config.n_encoder_blocks):
            _init_block(params, f"enc.b{k}", config, rng, cross=False)
        for k in range(config.n_value_blocks):
            _init_block(params, f"val.b{k}", config, rng, cross=True)
        _init_linear(params, "val.head", config.embed_dim, 1, rng)
        params.add(
            "dec.embed",
            rng.normal(0.0, _INIT_STD, size=(config.n_actions + 1, config.embed_dim)),
        )
        for k in range(config.n_decoder_blocks):
            _init_block(params, f"dec.b{k}", config, rng, cross=True)
        _init_linear(params, "dec.head", config.embed_dim, config.n_actions, rng)
        return cls(config, params)

    @property
    def start_token(self) -> int:
        return self.config.n_actions

    def phi_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith(self.PHI_PREFIXES)]

    def theta_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith(self.THETA_PREFIX)]


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _linear(params, prefix, x) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _ln(params, prefix, x) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def multi_head_attention(params, prefix, x_q, x_kv, mask, n_heads: int) -> Tensor:
    """softmax(QK^T / sqrt(d_head)) V per head, concatenated and projected.

    ``mask[q, k] = True`` allows query q to attend to key k; ``None``
    allows everything.
    """
    d = x_q.shape[1]
    d_head = d // n_heads
    q = T.add(T.matmul(x_q, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = T.add(T.matmul(x_kv, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = T.add(T.matmul(x_kv, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    scale = 1.0 / np.sqrt(d_head)
    heads = []
    for h in range(n_heads):
        cols = np.arange(h * d_head, (h + 1) * d_head)
        qh, kh, vh = T.take_cols(q, cols), T.take_cols(k, cols), T.take_cols(v, cols)
        scores = T.mul(T.matmul(qh, T.transpose(kh)), scale)
        weights = T.masked_softmax(scores, mask)
        heads.append(T.matmul(weights, vh))
    merged = heads[0] if n_heads == 1 else T.concat(heads, axis=1)
    return T.add(T.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _feed_forward(params, prefix, x) -> Tensor:
    return _linear(params, f"{prefix}.out", T.gelu(_linear(params, f"{prefix}.in", x)))


def _block(params, prefix, x, self_mask, n_heads, memory=None, memory_mask=None) -> Tensor:
    """Post-norm residual block: self-attention, optional cross-attention
    against ``memory``, then feed-forward."""
    x = _ln(params, f"{prefix}.ln1",
            T.add(x, multi_head_attention(params, f"{prefix}.self", x, x, self_mask, n_heads)))
    if memory is not None:
        x = _ln(params, f"{prefix}.ln2",
                T.add(x, multi_head_attention(params, f"{prefix}.cross", x, memory, memory_mask, n_heads)))
    return _ln(params, f"{prefix}.ln3", T.add(x, _feed_forward(params, f"{prefix}.ff", x)))


def encode_tokens(policy: TransformerPolicy, observations: np.ndarray) -> TokenBatch:
    """Embed an observation history of shape (n_steps, n_agents, obs_dim)
    into one token per (agent, time) pair, time-major, with position terms."""
    cfg = policy.config
    observations = np.asarray(observations, dtype=np.float64)
    if observations.ndim != 3 or observations.shape[1:] != (cfg.n_agents, cfg.obs_dim):
        raise ValueError(
            f"expected observations (n_steps, {cfg.n_agents}, {cfg.obs_dim}), "
            f"got {observations.shape}"
        )
    n_steps = observations.shape[0]
    time_ids = np.repeat(np.arange(n_steps), cfg.n_agents)
    agent_ids = np.tile(np.arange(cfg.n_agents), n_steps)
    flat = Tensor(observations.reshape(n_steps * cfg.n_agents, cfg.obs_dim))
    x = _linear(policy.params, "enc.embed", flat)
    x = T.add(x, Tensor(positional_encoding(time_ids, agent_ids, cfg.embed_dim)))
    return TokenBatch(tokens=x, time_ids=time_ids, agent_ids=agent_ids)


def encoder_forward(policy: TransformerPolicy, batch: TokenBatch) -> Tensor:
    """Run the encoder blocks under the time-causal mask; output keeps the
    input's token count and layout."""
    cfg = policy.config
    mask = batch.time_ids[None, :] <= batch.time_ids[:, None]
    x = batch.tokens
    for k in range(cfg.n_encoder_blocks):
        x = _block(policy.params, f"enc.b{k}", x, mask, cfg.n_heads)
    return x


def value_forward(policy: TransformerPolicy, memory: Tensor, time_ids: np.ndarray, t: int) -> Tensor:
    """Per-agent values for time ``t``: the agent tokens of that timestep
    self-attend, cross-attend to the history up to ``t``, and feed a scalar
    head.  Returns a tensor of exactly n_agents values."""
    params, cfg = policy.params, policy.config
    rows = np.flatnonzero(time_ids == t)
    if rows.size != cfg.n_agents:
        raise ValueError(f"memory holds {rows.size} tokens at time {t}, expected {cfg.n_agents}")
    x = T.take_rows(memory, rows)
    memory_mask = (time_ids <= t)[None, :]
    for k in range(cfg.n_value_blocks):
        x = _block(params, f"val.b{k}", x, None, cfg.n_heads,
                   memory=memory, memory_mask=memory_mask)
    return T.reshape(_linear(params, "val.head", x), (cfg.n_agents,))


def decoder_logits(policy: TransformerPolicy, memory: Tensor, time_ids: np.ndarray,
                   t: int, prev_actions) -> Tensor:
    """Action logits, one row per decoding slot.

    The token sequence is [start, a_0, ..., a_{k-1}] for the ``k`` already
    chosen actions; row i of the result is agent i's logits conditioned on
    actions 0..i-1 (agent-causal mask), the encoder memory up to time
    ``t``, and nothing else.
    """
    params, cfg = policy.params, policy.config
    prev = np.asarray(prev_actions, dtype=np.int64).reshape(-1)
    if prev.size >= cfg.n_agents:
        raise ValueError(f"at most {cfg.n_agents - 1} previous actions, got {prev.size}")
    if prev.size and (prev.min() < 0 or prev.max() >= cfg.n_actions):
        raise ValueError("previous action id out of range")
    ids = np.concatenate([[policy.start_token], prev])
    x = T.embedding_lookup(params["dec.embed"], ids)
    # same two-axis position term as the encoder: current time, slot index
    x = T.add(x, Tensor(positional_encoding(np.full(ids.size, t), np.arange(ids.size),
                                            cfg.embed_dim)))
    causal = np.tril(np.ones((ids.size, ids.size), dtype=bool))
    memory_mask = (time_ids <= t)[None, :]
    for k in range(cfg.n_decoder_blocks):
        x = _block(params, f"dec.b{k}", x, causal, cfg.n_heads,
                   memory=memory, memory_mask=memory_mask)
    return _linear(params, "dec.head", x)


def action_log_probs(policy: TransformerPolicy, memory: Tensor, time_ids: np.ndarray,
                     t: int, joint_action) -> Tensor:
    """log pi(a_i | history, a_{<i}) for every agent, teacher-forced on the
    recorded joint action."""
    joint = np.asarray(joint_action, dtype=np.int64).reshape(-1)
    if joint.size != policy.config.n_agents:
        raise ValueError(f"need {policy.config.n_agents} actions, got {joint.size}")
    logits = decoder_logits(policy, memory, time_ids, t, joint[:-1])
    return T.take_per_row(T.log_softmax(logits), joint)


def sample_joint_action(policy: TransformerPolicy, obs_history: np.ndarray, rng,
                        greedy: bool = False):
    """One decision step: encode the history, read values, decode actions
    agent by agent (sampled or argmax).

    Returns (joint action ids, per-agent log-probabilities of the chosen
    actions, per-agent values), all numpy.  The log-probabilities come from
    the same teacher-forced pass the trainer uses, so buffered values are
    reproducible bit for bit.
    """
    cfg = policy.config
    with T.no_grad():
        batch = encode_tokens(policy, obs_history)
        memory = encoder_forward(policy, batch)
        t = int(batch.time_ids[-1])
        values = value_forward(policy, memory, batch.time_ids, t).data.copy()
        chosen: list[int] = []
        for i in range(cfg.n_agents):
            logits = decoder_logits(policy, memory, batch.time_ids, t, chosen)
            probs = T.masked_softmax(logits).data[i]
            if greedy:
                chosen.append(int(np.argmax(probs)))
            else:
                chosen.append(int(rng.choice(cfg.n_actions, p=probs)))
        joint = np.asarray(chosen, dtype=np.int64)
        log_probs = action_log_probs(policy, memory, batch.time_ids, t, joint).data.copy()
    return joint, log_probs, values


def policy_act_fn(policy: TransformerPolicy, greedy: bool = False):
    """Adapter for ``world.run_episode``."""

    def act(obs_history, rng):
        joint, _, _ = sample_joint_action(policy, obs_history, rng, greedy=greedy)
        return joint

    return act


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_policy(policy: TransformerPolicy, path, extra_meta: dict | None = None) -> None:
    meta = {"model": asdict(policy.config)}
    if extra_meta:
        overlap = set(extra_meta) & set(meta)
        if overlap:
            raise ValueError(f"extra_meta may not override {sorted(overlap)}")
        meta.update(extra_meta)
    T.save_checkpoint(path, policy.params, meta)


def load_policy(path) -> tuple[TransformerPolicy, dict]:
    arrays, meta = T.load_checkpoint(path)
    if "model" not in meta:
        raise T.CheckpointError(f"{path}: checkpoint meta lacks a model description")
    try:
        config = ModelConfig(**meta["model"])
    except (TypeError, ValueError) as exc:
        raise T.CheckpointError(f"{path}: bad model description ({exc})") from exc
    policy = TransformerPolicy.init(config, seed=0)
    try:
        policy.params.load_state_dict(arrays)
    except ValueError as exc:
        raise T.CheckpointError(f"{path}: stored arrays do not fit the model ({exc})") from exc
    return policy, meta
