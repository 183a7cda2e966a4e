import numpy as np
import pytest

from stratlab.envs import (
    env_reset,
    env_step,
    generate_dataset,
    load_dataset,
    make_env_spec,
    returns_to_go,
    rollout_episode,
    save_dataset,
    scripted_policy,
)
from stratlab.errors import InvalidInputError


def test_reset_deterministic_and_bounded():
    spec = make_env_spec("pointmass-dense")
    a = env_reset(spec, np.random.default_rng(5))
    b = env_reset(spec, np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert np.max(np.abs(a)) <= 0.05


def test_reset_zero_noise_is_origin():
    spec = make_env_spec("pointmass-dense", reset_noise=0.0)
    assert np.array_equal(env_reset(spec, np.random.default_rng(0)), [0.0, 0.0])


def test_step_formula_and_clipping():
    spec = make_env_spec("pointmass-dense")
    nxt, _, _ = env_step(spec, np.zeros(2), np.array([1.0, 1.0]))
    assert np.allclose(nxt, [0.1, 0.1])
    big, _, _ = env_step(spec, np.zeros(2), np.array([5.0, 5.0]))
    assert np.array_equal(nxt, big)


def test_dense_reward_zero_at_goal():
    spec = make_env_spec("pointmass-dense", goal=(0.1, 0.1))
    _, r, done = env_step(spec, np.zeros(2), np.array([1.0, 1.0]))
    assert r == 0.0
    assert not done


def test_sparse_reward_scale_and_bias():
    spec = make_env_spec("pointmass-sparse")
    assert spec.reward_scale == 10.0 and spec.reward_bias == -5.0
    # step that stays far from the goal
    _, r, done = env_step(spec, np.zeros(2), np.array([0.0, 0.0]))
    assert r == -5.0 and not done
    # step that lands on the goal
    near = np.asarray(spec.goal) - np.array([0.05, 0.0])
    _, r, done = env_step(spec, near, np.array([0.0, 0.0]))
    assert r == 5.0 and done


def test_step_rejects_non_finite():
    spec = make_env_spec("pointmass-dense")
    with pytest.raises(InvalidInputError):
        env_step(spec, np.array([np.nan, 0.0]), np.zeros(2))
    with pytest.raises(InvalidInputError):
        env_step(spec, np.zeros(2), np.array([np.inf, 0.0]))


def test_expert_policy_at_goal_is_zero():
    spec = make_env_spec("pointmass-dense")
    a = scripted_policy(spec, np.asarray(spec.goal, dtype=float), "expert",
                        np.random.default_rng(0))
    assert np.allclose(a, [0.0, 0.0])


def test_expert_policy_saturates():
    spec = make_env_spec("pointmass-dense", goal=(1.0, 1.0))
    a = scripted_policy(spec, np.array([-1.0, -1.0]), "expert", np.random.default_rng(0))
    assert np.array_equal(a, [1.0, 1.0])


def test_random_policy_in_box():
    spec = make_env_spec("pointmass-dense")
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = scripted_policy(spec, np.zeros(2), "random", rng)
        assert np.all(np.abs(a) <= 1.0)


def test_returns_to_go_hand_computed():
    # oracle: hand-computed discounted sums for rewards (1, 1, 1), gamma 0.9
    rtg = returns_to_go(np.array([1.0, 1.0, 1.0]), 0.9)
    assert np.allclose(rtg, [2.71, 1.9, 1.0])


def test_returns_to_go_recursive_oracle():
    rng = np.random.default_rng(2)
    rewards = rng.standard_normal(37)
    gamma = 0.97
    rtg = returns_to_go(rewards, gamma)

    def recursive(i):
        if i == len(rewards) - 1:
            return rewards[i]
        return rewards[i] + gamma * recursive(i + 1)

    for i in range(len(rewards)):
        assert rtg[i] == pytest.approx(recursive(i), rel=1e-12)
    # terminal transition's rtg is its own reward; all-zero episode is all zero
    assert rtg[-1] == rewards[-1]
    assert np.all(returns_to_go(np.zeros(5), 0.9) == 0.0)


def test_dataset_rtg_satisfies_bellman_recursion():
    spec = make_env_spec("pointmass-sparse")
    ds = generate_dataset(spec, "medium", 500, gamma=0.99, seed=3)
    ends = list(ds.episode_starts[1:]) + [len(ds)]
    for start, end in zip(ds.episode_starts, ends):
        for i in range(start, end - 1):
            assert ds.returns_to_go[i] == pytest.approx(
                ds.rewards[i] + 0.99 * ds.returns_to_go[i + 1], abs=1e-12)
        assert ds.returns_to_go[end - 1] == ds.rewards[end - 1]
        assert ds.dones[end - 1]


def test_dataset_episode_boundaries_consistent():
    spec = make_env_spec("pointmass-dense")
    ds = generate_dataset(spec, "random", 300, gamma=0.99, seed=4)
    done_idx = np.flatnonzero(ds.dones)
    starts = np.concatenate([[0], done_idx[:-1] + 1])
    assert np.array_equal(ds.episode_starts, starts)
    assert len(ds) >= 300


def test_expert_beats_medium_on_dense():
    spec = make_env_spec("pointmass-dense")
    returns = {}
    for quality in ("expert", "medium"):
        rng = np.random.default_rng(100)
        totals = []
        for _ in range(100):
            ep = rollout_episode(
                spec, lambda s, r, q=quality: scripted_policy(spec, s, q, r), rng)
            totals.append(ep[2].sum())
        returns[quality] = np.mean(totals)
    assert returns["expert"] >= returns["medium"]


def test_generate_dataset_deterministic():
    spec = make_env_spec("pointmass-dense")
    a = generate_dataset(spec, "medium", 200, 0.99, seed=7)
    b = generate_dataset(spec, "medium", 200, 0.99, seed=7)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.actions, b.actions)


def test_dataset_file_roundtrip_bit_exact(tmp_path):
    spec = make_env_spec("pointmass-sparse")
    ds = generate_dataset(spec, "medium", 250, gamma=0.99, seed=8)
    path = tmp_path / "d.slds"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.env.name == ds.env.name
    assert back.quality == "medium"
    assert back.gamma == ds.gamma
    for field in ("states", "actions", "rewards", "next_states", "returns_to_go"):
        assert np.array_equal(getattr(back, field), getattr(ds, field)), field
    assert np.array_equal(back.dones, ds.dones)
    assert np.array_equal(back.episode_starts, ds.episode_starts)


def test_dataset_requires_min_size():
    spec = make_env_spec("pointmass-dense")
    with pytest.raises(InvalidInputError):
        generate_dataset(spec, "medium", 10, 0.99, seed=0)
