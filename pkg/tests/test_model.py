"""Transformer policy: positional terms, attention arithmetic, causality.

The causality tests are strict: outputs must be byte-identical under
perturbations the masks are supposed to hide, not merely close.
"""

from __future__ import annotations

import numpy as np
import pytest

from stlmarl import tensor as T
from stlmarl.model import (
    ModelConfig,
    TransformerPolicy,
    action_log_probs,
    decoder_logits,
    encode_tokens,
    encoder_forward,
    load_policy,
    multi_head_attention,
    policy_act_fn,
    positional_encoding,
    sample_joint_action,
    save_policy,
    value_forward,
)
from stlmarl.world import GameConfig


def small_config(**overrides):
    base = dict(
        n_agents=2,
        horizon=6,
        obs_dim=7,
        embed_dim=16,
        n_heads=2,
        n_encoder_blocks=1,
        n_value_blocks=1,
        n_decoder_blocks=1,
    )
    base.update(overrides)
    return ModelConfig(**base)


def small_policy(seed=0, **overrides):
    return TransformerPolicy.init(small_config(**overrides), seed=seed)


def random_history(cfg, n_steps, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n_steps, cfg.n_agents, cfg.obs_dim))


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------


def test_position_zero_is_the_standard_origin_pattern():
    pe = positional_encoding([0], [0], 8)
    # sin(0), cos(0) interleaved on both halves
    np.testing.assert_array_equal(pe[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])


def test_positional_closed_form_matches_definition():
    pe = positional_encoding([3], [5], 12)
    half = 6
    for j in range(half // 2):
        wavelength = 10000.0 ** (2.0 * j / half)
        assert pe[0, 2 * j] == pytest.approx(np.sin(3 / wavelength), abs=1e-15)
        assert pe[0, 2 * j + 1] == pytest.approx(np.cos(3 / wavelength), abs=1e-15)
        assert pe[0, half + 2 * j] == pytest.approx(np.sin(5 / wavelength), abs=1e-15)
        assert pe[0, half + 2 * j + 1] == pytest.approx(np.cos(5 / wavelength), abs=1e-15)


def test_time_and_agent_axes_occupy_disjoint_halves():
    same_agent = positional_encoding([1, 4], [2, 2], 16)
    assert np.array_equal(same_agent[0, 8:], same_agent[1, 8:])
    assert not np.array_equal(same_agent[0, :8], same_agent[1, :8])

    same_time = positional_encoding([3, 3], [0, 1], 16)
    assert np.array_equal(same_time[0, :8], same_time[1, :8])
    assert not np.array_equal(same_time[0, 8:], same_time[1, 8:])


def test_token_difference_lives_in_the_expected_half():
    policy = small_policy()
    cfg = policy.config
    obs = np.zeros((2, 2, cfg.obs_dim))  # identical observations everywhere
    batch = encode_tokens(policy, obs)
    half = cfg.embed_dim // 2
    tok = batch.tokens.data
    # tokens 0 and 2: same agent, different times
    assert np.array_equal(tok[0, half:], tok[2, half:])
    assert not np.array_equal(tok[0, :half], tok[2, :half])
    # tokens 0 and 1: same time, different agents
    assert np.array_equal(tok[0, :half], tok[1, :half])
    assert not np.array_equal(tok[0, half:], tok[1, half:])


# ---------------------------------------------------------------------------
# Attention arithmetic
# ---------------------------------------------------------------------------


def identity_attention_params():
    params = T.Parameters()
    eye = np.eye(2)
    for part in ("wq", "wk", "wv", "wo"):
        params.add(f"a.{part}", eye)
    for part in ("bq", "bk", "bv", "bo"):
        params.add(f"a.{part}", np.zeros(2))
    return params


def test_two_token_single_head_matches_hand_formula():
    params = identity_attention_params()
    x = T.Tensor(np.array([[1.0, 2.0], [3.0, -1.0]]))
    out = multi_head_attention(params, "a", x, x, None, n_heads=1)

    scores = (x.data @ x.data.T) / np.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out.data, weights @ x.data, atol=1e-12)


def test_single_position_attention_is_value_projection():
    params = identity_attention_params()
    x = T.Tensor(np.array([[4.0, -2.5]]))
    out = multi_head_attention(params, "a", x, x, None, n_heads=1)
    np.testing.assert_allclose(out.data, x.data, atol=1e-15)


def test_uniform_keys_give_uniform_attention():
    params = identity_attention_params()
    x_q = T.Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    x_kv = T.Tensor(np.array([[2.0, 0.0], [2.0, 0.0], [2.0, 0.0]]))
    out = multi_head_attention(params, "a", x_q, x_kv, None, n_heads=1)
    np.testing.assert_allclose(out.data, [[2.0, 0.0], [2.0, 0.0]], atol=1e-12)


def test_attention_mask_restricts_mixture():
    params = identity_attention_params()
    x_q = T.Tensor(np.array([[1.0, 1.0]]))
    x_kv = T.Tensor(np.array([[5.0, 0.0], [7.0, 3.0]]))
    only_first = multi_head_attention(params, "a", x_q, x_kv,
                                      np.array([[True, False]]), n_heads=1)
    np.testing.assert_allclose(only_first.data, [[5.0, 0.0]], atol=1e-15)


# ---------------------------------------------------------------------------
# Shapes and validation
# ---------------------------------------------------------------------------


def test_encoder_output_keeps_token_count():
    policy = small_policy()
    batch = encode_tokens(policy, random_history(policy.config, 4))
    memory = encoder_forward(policy, batch)
    assert memory.shape == batch.tokens.shape
    assert batch.tokens.shape == (8, 16)


def test_value_count_is_agent_count_at_every_time():
    policy = small_policy()
    batch = encode_tokens(policy, random_history(policy.config, 5))
    memory = encoder_forward(policy, batch)
    for t in range(5):
        assert value_forward(policy, memory, batch.time_ids, t).shape == (2,)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(embed_dim=12, n_heads=4)  # 12 % 8 != 0
    with pytest.raises(ValueError):
        small_config(n_encoder_blocks=0)
    with pytest.raises(ValueError):
        small_config(n_actions=1)
    cfg = ModelConfig.for_game(GameConfig(n_agents=2, horizon=10), embed_dim=32, n_heads=2)
    assert (cfg.n_agents, cfg.horizon, cfg.obs_dim, cfg.n_actions) == (2, 10, 18, 5)


def test_encode_tokens_validates_shape():
    policy = small_policy()
    with pytest.raises(ValueError):
        encode_tokens(policy, np.zeros((3, 2, 5)))
    with pytest.raises(ValueError):
        encode_tokens(policy, np.zeros((2, 7)))


def test_decoder_rejects_bad_prefixes():
    policy = small_policy()
    batch = encode_tokens(policy, random_history(policy.config, 2))
    memory = encoder_forward(policy, batch)
    with pytest.raises(ValueError):
        decoder_logits(policy, memory, batch.time_ids, 1, [0, 1])  # as many as agents
    with pytest.raises(ValueError):
        decoder_logits(policy, memory, batch.time_ids, 1, [9])
    with pytest.raises(ValueError):
        action_log_probs(policy, memory, batch.time_ids, 1, [0])


def test_value_forward_needs_tokens_at_time():
    policy = small_policy()
    batch = encode_tokens(policy, random_history(policy.config, 2))
    memory = encoder_forward(policy, batch)
    with pytest.raises(ValueError):
        value_forward(policy, memory, batch.time_ids, 5)


# ---------------------------------------------------------------------------
# Causality, bit for bit
# ---------------------------------------------------------------------------


def test_time_causality_of_encoder_values_and_actions():
    policy = small_policy()
    cfg = policy.config
    rng = np.random.default_rng(17)
    for probe in range(20):
        n_steps = int(rng.integers(2, 7))
        t = int(rng.integers(0, n_steps - 1))
        future = int(rng.integers(t + 1, n_steps))
        obs = rng.normal(size=(n_steps, cfg.n_agents, cfg.obs_dim))
        perturbed = obs.copy()
        perturbed[future] += rng.normal(size=(cfg.n_agents, cfg.obs_dim))

        batch_a = encode_tokens(policy, obs)
        batch_b = encode_tokens(policy, perturbed)
        mem_a = encoder_forward(policy, batch_a)
        mem_b = encoder_forward(policy, batch_b)

        past = batch_a.time_ids <= t
        assert np.array_equal(mem_a.data[past], mem_b.data[past])

        va = value_forward(policy, mem_a, batch_a.time_ids, t)
        vb = value_forward(policy, mem_b, batch_b.time_ids, t)
        assert np.array_equal(va.data, vb.data)

        prev = [int(rng.integers(0, cfg.n_actions))] * (cfg.n_agents - 1)
        la = decoder_logits(policy, mem_a, batch_a.time_ids, t, prev)
        lb = decoder_logits(policy, mem_b, batch_b.time_ids, t, prev)
        assert np.array_equal(la.data, lb.data)


def test_agent_causality_of_decoder():
    policy = small_policy(n_agents=3, obs_dim=9)
    cfg = policy.config
    rng = np.random.default_rng(23)
    batch = encode_tokens(policy, rng.normal(size=(3, 3, 9)))
    memory = encoder_forward(policy, batch)
    for probe in range(20):
        prev = rng.integers(0, cfg.n_actions, size=2)
        for i in range(cfg.n_agents):
            altered = prev.copy()
            # change the actions of agents >= i (token slots after row i)
            altered[i:] = (altered[i:] + 1 + rng.integers(0, cfg.n_actions - 1)) % cfg.n_actions
            a = decoder_logits(policy, memory, batch.time_ids, 2, prev)
            b = decoder_logits(policy, memory, batch.time_ids, 2, altered)
            assert np.array_equal(a.data[: i + 1], b.data[: i + 1])


def test_single_agent_decoder_conditions_on_start_only():
    policy = small_policy(n_agents=1, obs_dim=5)
    batch = encode_tokens(policy, np.random.default_rng(0).normal(size=(2, 1, 5)))
    memory = encoder_forward(policy, batch)
    logits = decoder_logits(policy, memory, batch.time_ids, 1, [])
    assert logits.shape == (1, policy.config.n_actions)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def test_action_distributions_are_probabilities():
    policy = small_policy()
    batch = encode_tokens(policy, random_history(policy.config, 3, seed=2))
    memory = encoder_forward(policy, batch)
    logits = decoder_logits(policy, memory, batch.time_ids, 2, [1])
    probs = T.masked_softmax(logits).data
    assert (probs > 0.0).all()
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_sample_joint_action_contract():
    policy = small_policy()
    cfg = policy.config
    history = random_history(cfg, 4, seed=5)
    joint, log_probs, values = sample_joint_action(policy, history, np.random.default_rng(1))
    assert joint.shape == (2,) and log_probs.shape == (2,) and values.shape == (2,)
    assert ((joint >= 0) & (joint < cfg.n_actions)).all()

    # log-probs must equal the teacher-forced pass at the sampled ids
    batch = encode_tokens(policy, history)
    memory = encoder_forward(policy, batch)
    lp = action_log_probs(policy, memory, batch.time_ids, 3, joint)
    assert np.array_equal(lp.data, log_probs)

    v = value_forward(policy, memory, batch.time_ids, 3)
    assert np.array_equal(v.data, values)


def test_greedy_sampling_deterministic():
    policy = small_policy()
    history = random_history(policy.config, 3, seed=9)
    a1 = sample_joint_action(policy, history, np.random.default_rng(0), greedy=True)
    a2 = sample_joint_action(policy, history, np.random.default_rng(999), greedy=True)
    assert np.array_equal(a1[0], a2[0])
    assert np.array_equal(a1[1], a2[1])


def test_same_rng_state_reproduces_samples():
    policy = small_policy()
    history = random_history(policy.config, 3, seed=9)
    a1 = sample_joint_action(policy, history, np.random.default_rng(7))
    a2 = sample_joint_action(policy, history, np.random.default_rng(7))
    assert np.array_equal(a1[0], a2[0])


def test_act_fn_adapter_returns_actions():
    policy = small_policy(obs_dim=18, n_agents=2)
    act = policy_act_fn(policy)
    out = act(np.zeros((1, 2, 18)), np.random.default_rng(0))
    assert out.shape == (2,)


# ---------------------------------------------------------------------------
# Gradient partition (light check; the trainer tests exercise the losses)
# ---------------------------------------------------------------------------


def test_value_path_gradients_stay_in_phi():
    policy = small_policy()
    batch = encode_tokens(policy, random_history(policy.config, 3, seed=11))
    loss = T.tsum(value_forward(policy, encoder_forward(policy, batch), batch.time_ids, 2))
    grads = T.backward(loss, policy.params)
    for name in policy.theta_names():
        assert not grads[name].any(), f"decoder parameter {name} touched by value path"
    touched = [n for n in policy.phi_names() if grads[n].any()]
    assert len(touched) > len(policy.phi_names()) // 2


def test_decoder_path_gradients_stay_in_theta_given_frozen_memory():
    policy = small_policy()
    batch = encode_tokens(policy, random_history(policy.config, 3, seed=12))
    memory = T.stop_gradient(encoder_forward(policy, batch))
    loss = T.tsum(action_log_probs(policy, memory, batch.time_ids, 2, [1, 3]))
    grads = T.backward(loss, policy.params)
    for name in policy.phi_names():
        assert not grads[name].any(), f"phi parameter {name} touched by decoder path"
    assert any(grads[n].any() for n in policy.theta_names())


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    policy = small_policy(seed=3)
    path = tmp_path / "policy.ckpt"
    save_policy(policy, path, extra_meta={"note": "test"})
    loaded, meta = load_policy(path)
    assert loaded.config == policy.config
    assert meta["note"] == "test"
    for name, t in policy.params.items():
        assert np.array_equal(loaded.params[name].data, t.data)


def test_load_rejects_architecture_mismatch(tmp_path):
    policy = small_policy()
    path = tmp_path / "policy.ckpt"
    save_policy(policy, path)
    arrays, meta = T.load_checkpoint(path)
    # claim a wider model than the stored arrays provide
    meta["model"]["embed_dim"] = 32
    bad = tmp_path / "bad.ckpt"
    T.save_checkpoint(bad, arrays, meta)
    with pytest.raises(T.CheckpointError, match="do not fit"):
        load_policy(bad)


def test_load_requires_model_meta(tmp_path):
    path = tmp_path / "plain.ckpt"
    T.save_checkpoint(path, {"w": np.zeros(3)}, {})
    with pytest.raises(T.CheckpointError, match="model"):
        load_policy(path)


def test_save_policy_rejects_meta_collision(tmp_path):
    policy = small_policy()
    with pytest.raises(ValueError):
        save_policy(policy, tmp_path / "x.ckpt", extra_meta={"model": {}})


def test_parameter_names_partition_into_phi_and_theta():
    policy = small_policy()
    phi, theta = set(policy.phi_names()), set(policy.theta_names())
    assert phi and theta
    assert not (phi & theta)
    assert phi | theta == set(policy.params.names())
