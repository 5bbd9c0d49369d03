"""Tests for evaluation, action distances, model diagnostics and the statistical checks."""

import numpy as np
import pytest

from src.envs import EPISODE_LENGTH, TransitionBatch, collect_riskworld_dataset, make_linear_mdp
from src.evaluate import (
    LowerBoundResult,
    action_distance,
    action_distance_histogram,
    avg_model_uncertainty,
    evaluate_in_model,
    evaluate_policy,
    model_error_estimate,
    normalized_score,
    policy_trajectories,
    sign_test,
    spearman_distance_uncertainty,
    tabular_lower_bound_check,
    tabular_sampler,
    uncertainty_field,
)
from src.policies import ConstantPolicy, RandomPolicy
from src.shaping import RewardShaper, RolloutConfig


class LineDistanceModel:
    """u = scale·|x + y|; states stay put, reward 1 per step."""

    def __init__(self, scale: float = 1.0):
        self.scale = scale

    def uncertainty(self, states, actions, heuristic):
        return self.scale * np.abs(states[:, 0] + states[:, 1])

    def step(self, states, actions, rng, heuristic='ensemble_std', use_mean_model=False, reward_fn=None):
        n = len(states)
        return states.copy(), np.ones(n), self.uncertainty(states, actions, heuristic)


class LookupPolicy:
    def __init__(self, dataset):
        self.dataset = dataset

    def act(self, states, deterministic=True, rng=None):
        return self.dataset.actions.copy()


class TestEvaluatePolicy:

    def test_zero_action_policy_earns_about_nothing(self):
        report = evaluate_policy(ConstantPolicy(np.zeros(2)), episodes=200, rng=np.random.default_rng(0))
        assert abs(report.mean_return) <= 2.5
        assert report.episodes == 200 and len(report.returns) == 200

    def test_upper_right_policy(self):
        report = evaluate_policy(ConstantPolicy(np.ones(2)), episodes=200, rng=np.random.default_rng(1))
        # about 36 on average; starts near the square corners take longer to climb
        assert 34.0 <= report.mean_return <= 42.5

    def test_single_episode_has_zero_std(self):
        report = evaluate_policy(ConstantPolicy(np.ones(2)), episodes=1, rng=np.random.default_rng(2))
        assert report.std_return == 0.0

    def test_discounting(self):
        plain = evaluate_policy(ConstantPolicy(np.ones(2)), episodes=5, rng=np.random.default_rng(3))
        disc = evaluate_policy(ConstantPolicy(np.ones(2)), episodes=5, rng=np.random.default_rng(3),
                               discounting='gamma', gamma=0.9)
        assert disc.mean_return < plain.mean_return
        assert disc.gamma == 0.9 and plain.gamma is None
        with pytest.raises(ValueError):
            evaluate_policy(ConstantPolicy(np.ones(2)), episodes=5, discounting='average')

    def test_trajectories(self):
        paths = policy_trajectories(ConstantPolicy(np.ones(2)), np.array([[0.0, 0.0], [-2.0, 2.0]]))
        assert paths.shape == (2, EPISODE_LENGTH + 1, 2)
        np.testing.assert_allclose(paths[:, -1], [[3.0, 3.0], [3.0, 3.0]])


class TestNormalizedScore:

    def test_reference_points(self):
        assert normalized_score(12135.0, 'halfcheetah') == pytest.approx(100.0)
        assert normalized_score(-280.18, 'halfcheetah') == pytest.approx(0.0)
        assert normalized_score((12135.0 - 280.18) / 2, 'halfcheetah') == pytest.approx(50.0)

    def test_unknown_environment(self):
        with pytest.raises(KeyError):
            normalized_score(1.0, 'ant-maze')


class TestActionDistance:

    def test_lookup_policy_is_zero(self):
        data = collect_riskworld_dataset(100, np.random.default_rng(0))
        assert action_distance(LookupPolicy(data), data) == 0.0

    def test_uniform_policy_against_zero_actions(self):
        n = 20000
        data = TransitionBatch(np.zeros((n, 2)), np.zeros((n, 2)), np.zeros(n), np.zeros((n, 2)),
                               np.zeros(n, dtype=bool))
        policy = RandomPolicy(np.array([-1.0, -1.0]), np.array([1.0, 1.0]), np.random.default_rng(1))
        assert action_distance(policy, data) == pytest.approx(0.765, abs=0.01)

    def test_histogram(self):
        edges, counts = action_distance_histogram(np.array([0.0, 0.1, 2.0, 2.8]), bins=4)
        assert len(edges) == 5 and counts.sum() == 4
        assert edges[-1] == pytest.approx(2 * np.sqrt(2))


class TestModelQuantities:

    def test_zero_uncertainty_model(self):
        shaper = RewardShaper(1.0, 1.0, model=LineDistanceModel(scale=0.0))
        starts = np.random.default_rng(0).normal(size=(50, 2))
        assert avg_model_uncertainty(ConstantPolicy(np.zeros(2)), shaper, RolloutConfig(), starts,
                                     20, np.random.default_rng(1)) == 0.0

    def test_scales_linearly(self):
        starts = np.random.default_rng(0).normal(size=(50, 2))
        values = [
            avg_model_uncertainty(ConstantPolicy(np.zeros(2)), RewardShaper(1.0, 1.0, model=LineDistanceModel(k)),
                                  RolloutConfig(), starts, 20, np.random.default_rng(1))
            for k in (1.0, 3.0)
        ]
        assert values[1] == pytest.approx(3 * values[0])

    def test_in_band_policy_below_grid_median(self):
        model = LineDistanceModel()
        grid, u = uncertainty_field(model, n=61)
        starts = collect_riskworld_dataset(500, np.random.default_rng(2)).states
        eps_u = avg_model_uncertainty(ConstantPolicy(np.zeros(2)), RewardShaper(1.0, 1.0, model=model),
                                      RolloutConfig(), starts, 200, np.random.default_rng(3))
        assert eps_u < np.median(u)

    def test_model_return(self):
        value = evaluate_in_model(ConstantPolicy(np.zeros(2)), LineDistanceModel(), np.zeros((4, 2)),
                                  horizon=5, rng=np.random.default_rng(0))
        assert value == pytest.approx(5.0)

    def test_uncertainty_field_ranks_with_distance(self):
        grid, u = uncertainty_field(LineDistanceModel(), n=21)
        assert grid.shape == (441, 2) and u.shape == (441,)
        # averaging over sampled actions can break exact ties in the field
        assert spearman_distance_uncertainty(grid, u) >= 0.999


class TestModelError:

    def _tables(self, delta: float):
        P = np.zeros((3, 1, 3))
        P[:, 0, 1] = 1.0
        P_hat = P.copy()
        P_hat[0, 0] = [0.0, 1.0 - delta, delta]
        return P, P_hat

    def test_perfect_model(self):
        P, _ = self._tables(0.0)
        V = np.array([0.0, 1.0, 5.0])
        g, se = model_error_estimate(tabular_sampler(P), tabular_sampler(P), lambda s: V[s],
                                     np.zeros(1, dtype=int), np.zeros(1, dtype=int), 1000,
                                     np.random.default_rng(0))
        assert abs(g[0]) <= 3 * se[0] + 1e-12

    def test_known_perturbation(self):
        P, P_hat = self._tables(0.2)
        V = np.array([0.0, 1.0, 5.0])
        g, se = model_error_estimate(tabular_sampler(P_hat), tabular_sampler(P), lambda s: V[s],
                                     np.zeros(1, dtype=int), np.zeros(1, dtype=int), 20000,
                                     np.random.default_rng(1))
        assert abs(g[0] - 0.8) <= 3 * se[0]

    def test_exact_model_matches_true_return(self):
        mdp = make_linear_mdp('tabular', np.random.default_rng(0), 4, 2, 1)
        policies = np.random.default_rng(1).dirichlet(np.ones(2), size=(3, 4))
        results = tabular_lower_bound_check(mdp.transitions, mdp.transitions, mdp.rewards, list(policies),
                                            gamma=0.9, rng=np.random.default_rng(2), episodes=500)
        assert len(results) == 3
        for r in results:
            assert abs(r.penalized_model_return - r.true_return) <= 4 * r.standard_error

    def test_holds_allows_two_standard_errors(self):
        assert LowerBoundResult(1.0, 0.5, 0.1).holds
        assert LowerBoundResult(1.0, 1.15, 0.1).holds
        assert not LowerBoundResult(1.0, 1.5, 0.1).holds


class TestSignTest:

    def test_all_positive(self):
        assert sign_test(np.ones(10)) == pytest.approx(1 / 1024)

    def test_zeros_dropped(self):
        assert sign_test([0.0, 0.0]) == 1.0
        assert sign_test([0.0, 1.0, 1.0]) == pytest.approx(0.25)

    def test_mostly_negative(self):
        assert sign_test([-1.0] * 8 + [1.0] * 2) > 0.9
