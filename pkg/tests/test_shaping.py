"""Tests for reward shaping and branched model rollouts."""

import numpy as np
import pytest

from src.datasets import BufferSet, ReplayBuffer, relabel
from src.dynamics import EnsembleDynamics, Normalizer
from src.envs import collect_riskworld_dataset
from src.numkit import MlpNetwork
from src.policies import ConstantPolicy
from src.shaping import RewardShaper, RolloutConfig, generate_rollouts, shape_reward


class DriftModel:
    """Moves every state by the action; constant reward and uncertainty."""

    def __init__(self, u: float = 0.5, leave_after: int | None = None):
        self.u = u
        self.leave_after = leave_after
        self.calls = 0

    def step(self, states, actions, rng, heuristic='ensemble_std', use_mean_model=False, reward_fn=None):
        n = len(states)
        return states + actions, np.ones(n), np.full(n, self.u)

    def out_of_box(self, states, box):
        self.calls += 1
        leaving = self.leave_after is not None and self.calls > self.leave_after
        return np.full(len(states), leaving)


def _buffers(n: int = 200) -> BufferSet:
    return BufferSet.from_dataset(collect_riskworld_dataset(n, np.random.default_rng(0)))


class TestRewardShaper:

    def test_pessimistic_cancellation(self):
        shaper = RewardShaper(lambda_p=2.0, lambda_o=0.0)
        assert shaper.shape(np.array([1.0]), np.array([0.5]), 'pessimistic')[0] == pytest.approx(0.0)

    def test_optimistic_bonus(self):
        shaper = RewardShaper(lambda_p=0.0, lambda_o=0.015)
        assert shaper.shape(np.array([1.0]), np.array([1.0]), 'optimistic')[0] == pytest.approx(1.015)

    def test_zero_lambdas_are_identity(self):
        shaper = RewardShaper(0.0, 0.0)
        r = np.array([0.3, -2.0, 5.0])
        u = np.array([0.1, 1.0, 4.0])
        for mode in ('pessimistic', 'optimistic'):
            np.testing.assert_array_equal(shape_reward(r, u, mode, shaper), r)

    def test_negative_optimism_allowed(self):
        shaper = RewardShaper(lambda_p=100.0, lambda_o=-50.0)
        assert shaper.shape(np.array([1.0]), np.array([0.1]), 'optimistic')[0] == pytest.approx(-4.0)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            RewardShaper(lambda_p=-1.0, lambda_o=1.0)
        with pytest.raises(ValueError):
            RewardShaper(1.0, 1.0, heuristic='bald')
        shaper = RewardShaper(1.0, 1.0)
        with pytest.raises(ValueError):
            shaper.shape(np.ones(1), np.array([-0.1]), 'pessimistic')
        with pytest.raises(ValueError):
            shaper.shape(np.ones(1), np.ones(1), 'neutral')


class TestGenerateRollouts:

    def test_optimistic_dual_append(self):
        buffers = _buffers()
        shaper = RewardShaper(lambda_p=2.0, lambda_o=1.0, model=DriftModel())
        stats = generate_rollouts(ConstantPolicy(np.zeros(2)), shaper,
                                  RolloutConfig(batch_size=100, horizon_optimistic=5),
                                  buffers, np.random.default_rng(1))
        assert stats.appended['opt_raw'] == stats.appended['opt_relabel'] == 500
        assert len(buffers.opt_raw) == len(buffers.opt_relabel) == 500
        assert len(buffers.pess) == 0
        np.testing.assert_allclose(buffers.opt_raw.view().rewards, 1.5)
        np.testing.assert_allclose(buffers.opt_relabel.view().rewards, 0.0)
        np.testing.assert_allclose(buffers.opt_relabel.view().raw_rewards, 1.0)
        assert stats.truncated_fraction == 0.0
        assert stats.mean_uncertainty == pytest.approx(0.5)

    def test_relabel_shaper_sets_the_relabeled_rewards(self):
        buffers = _buffers()
        shaper = RewardShaper(lambda_p=2.0, lambda_o=1.0, model=DriftModel())
        relabel_shaper = RewardShaper(lambda_p=0.0, lambda_o=1.0, model=DriftModel())
        generate_rollouts(ConstantPolicy(np.zeros(2)), shaper, RolloutConfig(batch_size=40, horizon_optimistic=2),
                          buffers, np.random.default_rng(1), relabel_shaper=relabel_shaper)
        np.testing.assert_allclose(buffers.opt_relabel.view().rewards, 1.0)
        # same rewards as relabeling the whole optimistic buffer afterwards
        np.testing.assert_array_equal(buffers.opt_relabel.view().rewards,
                                      relabel(buffers.opt_raw, relabel_shaper).view().rewards)
        np.testing.assert_allclose(buffers.opt_raw.view().rewards, 1.5)

    def test_pessimistic_mode(self):
        buffers = _buffers()
        shaper = RewardShaper(lambda_p=2.0, lambda_o=1.0, model=DriftModel())
        generate_rollouts(ConstantPolicy(np.zeros(2)), shaper,
                          RolloutConfig(batch_size=50, horizon_pessimistic=3),
                          buffers, np.random.default_rng(1), mode='pessimistic')
        assert len(buffers.pess) == 150
        assert len(buffers.opt_raw) == 0

    def test_zero_lambdas_give_identical_optimistic_buffers(self):
        buffers = _buffers()
        shaper = RewardShaper(0.0, 0.0, model=DriftModel())
        generate_rollouts(ConstantPolicy(np.array([0.1, 0.0])), shaper, RolloutConfig(batch_size=20),
                          buffers, np.random.default_rng(2))
        np.testing.assert_array_equal(buffers.opt_raw.view().rewards, buffers.opt_relabel.view().rewards)

    def test_truncation_drops_the_rest_of_a_rollout(self):
        buffers = _buffers()
        # every rollout leaves the box on its second step
        shaper = RewardShaper(1.0, 1.0, model=DriftModel(leave_after=1))
        stats = generate_rollouts(ConstantPolicy(np.zeros(2)), shaper,
                                  RolloutConfig(batch_size=30, horizon_optimistic=5),
                                  buffers, np.random.default_rng(3))
        assert stats.appended['opt_raw'] == 30
        assert stats.truncated_fraction == pytest.approx(1.0)

    def test_empty_env_buffer(self):
        buffers = _buffers()
        buffers.env = ReplayBuffer(2, 2, tag='env')
        shaper = RewardShaper(1.0, 1.0, model=DriftModel())
        with pytest.raises(ValueError):
            generate_rollouts(ConstantPolicy(np.zeros(2)), shaper, RolloutConfig(), buffers,
                              np.random.default_rng(0))

    def test_deterministic_mean_model_rollouts_repeat(self):
        rng = np.random.default_rng(0)
        model = EnsembleDynamics(
            [MlpNetwork((4, 16, 6), rng) for _ in range(3)],
            Normalizer(np.zeros(4), np.ones(4)),
            Normalizer(np.zeros(3), np.full(3, 0.1)),
            state_dim=2,
            action_dim=2,
        )
        cfg = RolloutConfig(batch_size=25, use_mean_model=True, deterministic_policy=True)
        views = []
        for _ in range(2):
            buffers = _buffers()
            generate_rollouts(ConstantPolicy(np.array([0.5, 0.5])), RewardShaper(1.0, 1.0, model=model),
                              cfg, buffers, np.random.default_rng(7))
            views.append(buffers.opt_raw.view())
        np.testing.assert_array_equal(views[0].next_states, views[1].next_states)
        np.testing.assert_array_equal(views[0].rewards, views[1].rewards)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RolloutConfig(horizon_optimistic=0).validate()
        with pytest.raises(ValueError):
            RolloutConfig(truncation_box=0.0).validate()
