import numpy as np
import pytest

from memweave.adrpo import (
    AdrpoConfig,
    RolloutGroup,
    ToyPolicy,
    advantages,
    attribution_env,
    bandit_env,
    build_group,
    expected_task_reward,
    finite_difference_gradient,
    kl_divergence,
    objective,
    objective_gradient,
    surrogate,
    toy_objective,
    train_toy,
)
from memweave.errors import GroupTooSmall, ShapeMismatch, SupportMismatch

import oracles
from toy_cases import masks_for, random_instance, relative_error

ONES = {"core": 1.0, "episodic": 1.0, "semantic": 1.0, "procedural": 1.0}


def test_advantages_zero_mean_unit_scale():
    a = advantages([0.0, 0.5, 1.0, 0.5])
    assert abs(a.mean()) < 1e-12
    assert np.allclose(a, oracles.group_advantages([0.0, 0.5, 1.0, 0.5]))


def test_uniform_rewards_give_zero_advantages():
    assert np.all(advantages([0.7] * 8) == 0.0)


def test_group_too_small():
    with pytest.raises(GroupTooSmall):
        advantages([1.0])


def _single_token_group(rho, adv_sign, w):
    # two rollouts so the advantages are +-1 (up to eps)
    rewards = [1.0, 0.0] if adv_sign > 0 else [0.0, 1.0]
    logp = np.log([[rho], [1.0]])
    mask = np.ones((2, 1), dtype=bool)
    weights = [{"episodic": w}, {"episodic": 1.0}]
    return RolloutGroup(rewards, logp, np.zeros((2, 1)), {"episodic": mask}, weights)


def test_amplification_inert_when_clip_binds():
    # A > 0, rho = 1, w = 4: min(4A, A) = A
    g = _single_token_group(1.0, +1, 4.0)
    per = surrogate(g, AdrpoConfig()) * 2  # undo mean over 2 rollouts
    a = advantages([1.0, 0.0])
    assert per == pytest.approx(a[0] + a[1])


def test_amplification_active_for_negative_advantage():
    # A < 0: min(w rho A, clip A) picks the amplified (more negative) term
    g = _single_token_group(1.0, -1, 4.0)
    a = advantages([0.0, 1.0])
    assert surrogate(g, AdrpoConfig()) * 2 == pytest.approx(4 * a[0] + a[1])


@pytest.mark.parametrize("rho", [0.5, 0.9, 1.0, 1.1, 1.5, 3.0])
def test_clip_ceiling(rho):
    g = _single_token_group(rho, +1, 4.0)
    a = advantages([1.0, 0.0])[0]
    contribution = surrogate(g, AdrpoConfig()) * 2 - advantages([1.0, 0.0])[1]
    assert contribution <= np.clip(rho, 0.8, 1.2) * a + 1e-12


def test_shape_validation():
    with pytest.raises(ShapeMismatch):
        RolloutGroup([1, 0], np.zeros((2, 3)), np.zeros((2, 2)), {}, [ONES, ONES])
    with pytest.raises(ShapeMismatch):
        RolloutGroup([1, 0], np.zeros((2, 3)), np.zeros((2, 3)), {}, [ONES])
    with pytest.raises(ShapeMismatch):
        RolloutGroup([1, 0], np.zeros((2, 3)), np.zeros((2, 3)), {"core": np.ones((2, 2))}, [ONES, ONES])


def test_empty_span_contributes_nothing():
    g = RolloutGroup([1, 0], np.zeros((2, 2)), np.zeros((2, 2)),
                     {"core": np.array([[1, 1], [1, 1]]), "episodic": np.zeros((2, 2))}, [ONES, ONES])
    assert surrogate(g, AdrpoConfig()) == pytest.approx(0.0, abs=1e-12)


def test_kl_two_symbol_case():
    assert kl_divergence(np.array([0.75, 0.25]), np.array([0.5, 0.5])) == pytest.approx(0.13081, abs=1e-5)


def test_kl_nonnegative_and_zero_on_self():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        assert kl_divergence(p, q) >= 0
        assert kl_divergence(p, q) == pytest.approx(oracles.kl(p, q), abs=1e-12)
        assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-15)


def test_kl_support_mismatch():
    with pytest.raises(SupportMismatch):
        kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    with pytest.raises(SupportMismatch):
        kl_divergence(np.ones(3) / 3, np.ones(2) / 2)


def test_objective_subtracts_kl():
    policy, reference, tokens, rewards, masks, weights = random_instance(3)
    g = build_group(policy, reference, tokens, rewards, masks, weights)
    cfg = AdrpoConfig(kl_beta=0.5)
    assert objective(g, cfg) == pytest.approx(surrogate(g, cfg) - 0.5 * kl_divergence(policy, reference))


@pytest.mark.parametrize("seed", range(10))
def test_unit_weights_match_plain_grpo(seed):
    policy, reference, tokens, rewards, masks, _ = random_instance(seed)
    g = build_group(policy, reference, tokens, rewards, masks, [ONES] * len(rewards))
    expected = oracles.grpo_objective(g.logp.tolist(), g.ref_logp.tolist(),
                                      [m.tolist() for m in masks.values()], list(rewards))
    assert abs(surrogate(g, AdrpoConfig()) - expected) < 1e-12


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("beta", [0.0, 0.3])
def test_gradient_matches_finite_differences(seed, beta):
    policy, reference, tokens, rewards, masks, weights = random_instance(seed)
    cfg = AdrpoConfig(kl_beta=beta)
    group = build_group(policy, reference, tokens, rewards, masks, weights)
    analytic = objective_gradient(policy, group, cfg, reference)
    numeric = finite_difference_gradient(
        lambda lg: toy_objective(ToyPolicy(lg), reference, tokens, rewards, masks, weights, cfg), policy.logits, 1e-6
    )
    assert relative_error(analytic, numeric) < 1e-5


def test_gradient_with_old_baseline():
    policy, reference, tokens, rewards, masks, weights = random_instance(5)
    old = ToyPolicy(policy.logits + 0.2)
    old.logits[2, 1] -= 0.4
    cfg = AdrpoConfig(ratio_baseline="old")
    group = build_group(policy, reference, tokens, rewards, masks, weights, old=old)
    analytic = objective_gradient(policy, group, cfg)
    numeric = finite_difference_gradient(
        lambda lg: toy_objective(ToyPolicy(lg), reference, tokens, rewards, masks, weights, cfg, old=old),
        policy.logits,
        1e-6,
    )
    assert relative_error(analytic, numeric) < 1e-5


def test_gradient_requires_reference_for_kl():
    policy, reference, tokens, rewards, masks, weights = random_instance(1)
    group = build_group(policy, reference, tokens, rewards, masks, weights)
    with pytest.raises(ValueError):
        objective_gradient(policy, group, AdrpoConfig(kl_beta=0.1))


def test_config_validation():
    for bad in ({"clip_eps": 0}, {"clip_eps": 1}, {"kl_beta": -1}, {"adv_eps": 0}, {"ratio_baseline": "x"}):
        with pytest.raises(ValueError):
            AdrpoConfig(**bad)


def test_sampling_matches_probabilities():
    policy = ToyPolicy(np.log([[0.7, 0.2, 0.1]]))
    draws = policy.sample(np.random.default_rng(0), 20000)[:, 0]
    assert np.allclose(np.bincount(draws, minlength=3) / 20000, [0.7, 0.2, 0.1], atol=0.015)


def test_toy_env_scoring():
    env = bandit_env(seed=0)
    best = [env.targets[p] for p in range(env.length)]
    out = env.evaluate(best)
    assert out.valid and out.r_task == 1.0
    assert all(v == 0.0 for v in out.penalties.values())
    bad = list(best)
    bad[3] = env.invalid_token
    assert not env.evaluate(bad).valid
    verbose = list(best)
    verbose[0] = env.verbose_token
    assert env.evaluate(verbose).penalties["core"] == 1.0


def test_train_toy_improves_and_is_seeded(tmp_path):
    env = bandit_env(seed=1)
    a = train_toy(env, epochs=15, seed=3)
    b = train_toy(env, epochs=15, seed=3)
    assert a.rows == b.rows
    assert a.final() > a.rows[0]["mean_reward"]
    assert expected_task_reward(a.policy, env) > 1 / env.vocab
    a.to_csv(tmp_path / "c.csv")
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == "epoch,mean_reward,task_reward,mean_length"


def test_train_toy_rejects_bad_density():
    with pytest.raises(ValueError):
        train_toy(attribution_env(), epochs=1, reward_density=0)


def test_masks_helper_matches_env():
    env = bandit_env()
    for m, mask in env.masks(3).items():
        assert np.array_equal(mask, masks_for(3)[m])
