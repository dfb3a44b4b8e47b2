import copy
import math

import numpy as np
import pytest

from decnas.policy import (
    ControllerConfig,
    PolicyError,
    PpoConfig,
    Trajectory,
    clipped_objective,
    config_for_space,
    init_policy,
    log_prob,
    objective_and_grad,
    ppo_update,
    sample,
    sample_batch,
    sample_tokens,
    state_from_dict,
    state_to_dict,
    token_distributions,
)
from decnas.search_space import FpnSpace, HeadSpace, Stage


def zero_output_layers(state) -> None:
    for p in range(state.config.seq_len):
        state.params[f"out_w{p}"][:] = 0.0
        state.params[f"out_b{p}"][:] = 0.0


def tiny_state(seed=0, vocab=(3, 4, 2), hidden=5, emb=4):
    cfg = ControllerConfig(vocab=vocab, hidden_size=hidden, embedding_size=emb,
                           init_scale=0.3)
    return init_policy(cfg, seed=seed)


class TestSampling:
    def test_uniform_entropy_with_zero_logits(self):
        space = FpnSpace()
        state = init_policy(config_for_space(space), seed=1, stage=Stage.FPN)
        zero_output_layers(state)
        traj = sample(state, np.random.default_rng(0))
        for p in range(space.seq_len):
            assert traj.entropies[p] == pytest.approx(
                math.log(space.action_space_at(p)), abs=1e-12)
        # op slots specifically: ln 5
        assert traj.entropies[2] == pytest.approx(math.log(5), abs=1e-12)

    def test_same_seed_same_trajectory(self):
        space = HeadSpace()
        state = init_policy(config_for_space(space), seed=3, stage=Stage.HEAD)
        t1 = sample(state, np.random.default_rng(42))
        t2 = sample(state, np.random.default_rng(42))
        assert np.array_equal(t1.tokens, t2.tokens)
        assert np.array_equal(t1.log_probs, t2.log_probs)

    def test_uniform_token_frequencies(self):
        space = FpnSpace()
        # the controller size is irrelevant once logits are zeroed
        state = init_policy(config_for_space(space, hidden_size=8,
                                             embedding_size=4),
                            seed=5, stage=Stage.FPN)
        zero_output_layers(state)
        n = 100_000
        tokens, _, _ = sample_tokens(state, n, np.random.default_rng(7))
        for p in range(space.seq_len):
            v = space.action_space_at(p)
            counts = np.bincount(tokens[:, p], minlength=9)
            expected = n / v
            sigma = math.sqrt(n * (1 / v) * (1 - 1 / v))
            for tok in range(v):
                assert abs(counts[tok] - expected) <= 3 * sigma

    def test_log_prob_matches_sampled(self):
        space = HeadSpace()
        state = init_policy(config_for_space(space), seed=11, stage=Stage.HEAD)
        traj = sample(state, np.random.default_rng(1))
        recomputed = log_prob(state, traj.tokens)
        np.testing.assert_allclose(recomputed, traj.log_probs, atol=1e-12)
        assert np.all(recomputed <= 0.0)

    def test_probabilities_sum_to_one_over_reduced_space(self):
        from decnas.search_space import enumerate_space, encode_fpn
        space = FpnSpace(1, 2, 1)
        state = init_policy(config_for_space(space, hidden_size=16,
                                             embedding_size=8), seed=13)
        total = 0.0
        count = 0
        for g in enumerate_space(1, 2, 1):
            seq = encode_fpn(g, space)
            total += math.exp(float(log_prob(state, np.array(seq.tokens)).sum()))
            count += 1
        assert count == 36
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_one_hot_logits_give_zero_log_prob(self):
        state = tiny_state()
        zero_output_layers(state)
        target = [1, 3, 0]
        for p, tok in enumerate(target):
            state.params[f"out_b{p}"][tok] = 25.0
        lp = log_prob(state, np.array(target))
        assert np.all(lp > -1e-9)

    def test_distributions_normalized(self):
        state = tiny_state(seed=2)
        dists = token_distributions(state, np.array([0, 0, 0]))
        for d in dists:
            assert d.sum() == pytest.approx(1.0, abs=1e-9)

    def test_invalid_token_rejected(self):
        state = tiny_state()
        with pytest.raises(PolicyError, match="out of range"):
            log_prob(state, np.array([0, 9, 0]))


class TestClippedObjective:
    def test_hand_values(self):
        eps = 0.2
        # inside the clip band the ratio passes through
        assert clipped_objective(np.log(1.1), 0.0, np.array(1.0), eps) \
            == pytest.approx(1.1)
        # positive advantage, ratio above band: clipped
        assert clipped_objective(np.log(1.5), 0.0, np.array(1.0), eps) \
            == pytest.approx(1.2)
        # negative advantage, ratio above band: pessimistic unclipped
        assert clipped_objective(np.log(1.5), 0.0, np.array(-1.0), eps) \
            == pytest.approx(-1.5)
        # negative advantage, ratio below band: pessimistic clipped bound
        assert clipped_objective(np.log(0.5), 0.0, np.array(-1.0), eps) \
            == pytest.approx(-0.8)

    def test_effective_ratio_stays_in_band_for_clipped_branch(self):
        eps = 0.2
        ratios = np.exp(np.linspace(-1.0, 1.0, 101))
        vals = clipped_objective(np.log(ratios), 0.0, np.array(1.0), eps)
        assert np.all(vals <= 1.0 + eps + 1e-12)


class TestGradients:
    @staticmethod
    def _fd_setup(seed=0):
        state = tiny_state(seed=seed)
        rng = np.random.default_rng(seed + 100)
        batch = sample_batch(state, 3, rng)
        tokens = np.stack([t.tokens for t in batch])
        logp = np.stack([t.log_probs for t in batch])
        # offsets put some ratios inside the clip band and some outside,
        # while staying clear of the kink at 1 +- eps
        delta = np.array([[0.02, -0.5, 0.03],
                          [-0.04, 0.5, -0.02],
                          [0.6, 0.01, -0.6]])
        old_logp = logp - delta
        adv = np.array([1.0, -2.0, 1.5])
        cfg = PpoConfig(clip_epsilon=0.2, entropy_coeff=0.01)
        ratios = np.exp(delta)
        assert np.all(np.abs(ratios - 1.2) > 1e-3)
        assert np.all(np.abs(ratios - 0.8) > 1e-3)
        return state, tokens, old_logp, adv, cfg

    def test_analytic_matches_central_differences(self):
        state, tokens, old_logp, adv, cfg = self._fd_setup()
        _, grads, _ = objective_and_grad(state, tokens, old_logp, adv, cfg)
        h = 1e-6
        worst = 0.0
        for name, tensor in state.params.items():
            it = np.nditer(tensor, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = tensor[idx]
                tensor[idx] = orig + h
                up, _, _ = objective_and_grad(state, tokens, old_logp, adv, cfg)
                tensor[idx] = orig - h
                dn, _, _ = objective_and_grad(state, tokens, old_logp, adv, cfg)
                tensor[idx] = orig
                fd = (up - dn) / (2 * h)
                scale = max(abs(fd), abs(grads[name][idx]), 1e-6)
                rel = abs(fd - grads[name][idx]) / scale
                worst = max(worst, rel)
                assert rel < 1e-4, f"{name}{idx}: analytic {grads[name][idx]} fd {fd}"
        assert worst < 1e-4

    def test_zero_advantage_is_bitwise_noop(self):
        state = tiny_state(seed=4)
        before = {k: v.copy() for k, v in state.params.items()}
        rng = np.random.default_rng(9)
        batch = sample_batch(state, 4, rng)
        for t in batch:
            t.reward = 0.7  # constant; baseline inits to it -> advantage 0
        stats = ppo_update(state, batch, PpoConfig())
        assert stats.steps_taken == 0
        for k, v in state.params.items():
            assert np.array_equal(v, before[k])
        for k, v in state.opt_m.items():
            assert not v.any()
        assert state.opt_t == 0

    def test_first_epoch_ratio_is_one(self):
        state = tiny_state(seed=6)
        rng = np.random.default_rng(2)
        batch = sample_batch(state, 5, rng)
        for k, t in enumerate(batch):
            t.reward = float(k)
        stats = ppo_update(state, batch, PpoConfig(update_epochs=1))
        assert stats.mean_ratio_first_epoch == pytest.approx(1.0, abs=1e-12)
        assert stats.clip_fraction == 0.0

    def test_first_step_independent_of_epsilon(self):
        # with ratios at 1, the clip range cannot matter on epoch one
        s1 = tiny_state(seed=8)
        s2 = tiny_state(seed=8)
        rng1, rng2 = np.random.default_rng(3), np.random.default_rng(3)
        b1 = sample_batch(s1, 4, rng1)
        b2 = sample_batch(s2, 4, rng2)
        for k in range(4):
            b1[k].reward = b2[k].reward = float(k % 2)
        ppo_update(s1, b1, PpoConfig(update_epochs=1, clip_epsilon=0.2))
        ppo_update(s2, b2, PpoConfig(update_epochs=1, clip_epsilon=0.9))
        for k in s1.params:
            np.testing.assert_array_equal(s1.params[k], s2.params[k])

    def test_invalid_rewards_rejected(self):
        state = tiny_state()
        batch = sample_batch(state, 2, np.random.default_rng(0))
        batch[0].reward = float("nan")
        batch[1].reward = 1.0
        with pytest.raises(PolicyError, match="invalid reward"):
            ppo_update(state, batch, PpoConfig())
        with pytest.raises(PolicyError, match="invalid reward"):
            ppo_update(state, sample_batch(state, 1, np.random.default_rng(0)),
                       PpoConfig())


class TestBandit:
    def test_single_token_bandit_converges(self):
        state = init_policy(ControllerConfig(vocab=(5,), hidden_size=8,
                                             embedding_size=4), seed=0)
        cfg = PpoConfig(learning_rate=0.05, update_epochs=2, batch_size=8,
                        entropy_coeff=0.0)
        rng = np.random.default_rng(12)
        winning = 3
        for update in range(500):
            batch = sample_batch(state, 8, rng)
            for t in batch:
                t.reward = 1.0 if int(t.tokens[0]) == winning else 0.0
            ppo_update(state, batch, cfg)
            p = token_distributions(state, np.array([winning]))[0][winning]
            if p > 0.95:
                break
        assert p > 0.95, f"bandit did not converge, p={p}"


class TestBaseline:
    def test_baseline_initializes_to_first_reward_then_tracks_mean(self):
        state = tiny_state(seed=10)
        batch = sample_batch(state, 3, np.random.default_rng(4))
        rewards = [2.0, 4.0, 6.0]
        for t, r in zip(batch, rewards):
            t.reward = r
        cfg = PpoConfig(baseline_decay=0.9)
        ppo_update(state, batch, cfg)
        expected = 0.9 * 2.0 + 0.1 * np.mean(rewards)
        assert state.baseline == pytest.approx(expected)


class TestCheckpoint:
    def test_roundtrip_preserves_behavior(self, tmp_path):
        space = HeadSpace()
        state = init_policy(config_for_space(space, hidden_size=12,
                                             embedding_size=6), seed=21,
                            stage=Stage.HEAD)
        batch = sample_batch(state, 4, np.random.default_rng(5))
        for k, t in enumerate(batch):
            t.reward = float(k)
        ppo_update(state, batch, PpoConfig())
        restored = state_from_dict(state_to_dict(state))
        t1 = sample(state, np.random.default_rng(77))
        t2 = sample(restored, np.random.default_rng(77))
        assert np.array_equal(t1.tokens, t2.tokens)
        np.testing.assert_array_equal(t1.log_probs, t2.log_probs)
        assert restored.baseline == state.baseline
        assert restored.opt_t == state.opt_t
        assert restored.stage is Stage.HEAD
