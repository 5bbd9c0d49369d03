"""Tests for optimistic LSVI, exact DP and regret bookkeeping."""

import numpy as np
import pytest

from src.envs import LinearMdpSpec, make_linear_mdp, one_hot_features
from src.lsvi import (
    LsviState,
    admissibility_frequency,
    greedy_baseline_values,
    default_bonus_scale,
    lsvi_seed_sweep,
    optimal_values,
    policy_evaluation,
    posterior_variance,
    regret_series,
    run_lsvi_orpo,
)


def _bandit() -> LinearMdpSpec:
    return make_linear_mdp('tabular', np.random.default_rng(0), 2, 2, 1, rewards=[0.2, 0.8])


def _chain() -> LinearMdpSpec:
    """0 --a0--> 1, 0 --a1--> 2; only the second step pays (0.3 in state 1, 0.9 in state 2)."""
    P = np.zeros((3, 2, 3))
    P[0, 0, 1] = P[0, 1, 2] = 1.0
    P[1, :, 1] = P[2, :, 2] = 1.0
    R = np.zeros((3, 2))
    R[1], R[2] = 0.3, 0.9
    return LinearMdpSpec(
        kind='tabular', num_states=3, num_actions=2, horizon=2,
        features=one_hot_features(3, 2),
        transition_weights=P.reshape(6, 3),
        reward_weights=R.reshape(6),
    )


class TestPosteriorVariance:

    def test_identity(self):
        assert posterior_variance(np.eye(4), np.eye(4)[0]) == pytest.approx(1.0)

    def test_repeated_feature(self):
        e1 = np.eye(4)[0]
        Lambda = np.eye(4) + 3 * np.outer(e1, e1)
        assert posterior_variance(Lambda, e1) == pytest.approx(0.25)

    @pytest.mark.parametrize('m,beta', [(1, 1.0), (7, 1.0), (20, 0.5)])
    def test_closed_form(self, m, beta):
        e1 = np.eye(3)[0]
        Lambda = beta * np.eye(3) + m * np.outer(e1, e1)
        assert posterior_variance(Lambda, e1) == pytest.approx(1.0 / (m + beta))

    def test_never_increases(self):
        rng = np.random.default_rng(42)
        Lambda = np.eye(5)
        phi = rng.normal(size=5)
        last = posterior_variance(Lambda, phi)
        for _ in range(50):
            x = rng.normal(size=5)
            Lambda += np.outer(x, x)
            now = posterior_variance(Lambda, phi)
            assert now <= last + 1e-12
            last = now

    def test_not_positive_definite(self):
        with pytest.raises(ValueError):
            posterior_variance(np.diag([1.0, -1.0]), np.ones(2))


class TestBonusScale:

    def test_formula(self):
        expected = 0.01 * 4 * 3 * np.sqrt(np.log(2 * 4 * 30 / 0.1))
        assert default_bonus_scale(4, 3, 30, p=0.1, c=0.01) == pytest.approx(expected)

    def test_probability_range(self):
        with pytest.raises(ValueError):
            default_bonus_scale(4, 3, 30, p=1.0)

    def test_no_data_state(self):
        state = LsviState.initial(d=4, horizon=2, beta=2.0, lambda_bonus=0.5)
        np.testing.assert_allclose(state.Lambdas[1], 2.0 * np.eye(4))
        np.testing.assert_allclose(state.bonus(0, np.eye(4)), 0.5 / np.sqrt(2.0))


class TestExactValues:

    def test_bandit(self):
        V, pi = optimal_values(_bandit())
        assert V[0, 0] == pytest.approx(0.8)
        assert pi[0, 0] == 1

    def test_chain(self):
        V, pi = optimal_values(_chain())
        assert V[0, 0] == pytest.approx(0.9)
        assert pi[0, 0] == 1

    def test_policy_evaluation_matches_optimum(self):
        mdp = make_linear_mdp('tabular', np.random.default_rng(3), 5, 3, 5)
        V, pi = optimal_values(mdp)
        np.testing.assert_allclose(policy_evaluation(mdp, pi), V, atol=1e-12)
        worse = policy_evaluation(mdp, (pi + 1) % 3)
        assert np.all(worse[0] <= V[0] + 1e-12)

    def test_needle_beats_myopic(self):
        mdp = make_linear_mdp('needle', np.random.default_rng(0), 6, 2, 5)
        V, _ = optimal_values(mdp)
        myopic = greedy_baseline_values(mdp, 1)[0]
        assert V[0, mdp.initial_state] == pytest.approx(2.0)
        assert myopic == pytest.approx(0.1)


class TestRegret:

    def test_optimal_every_episode(self):
        series = regret_series(np.full(10, 0.8), 0.8)
        np.testing.assert_array_equal(series.instant, np.zeros(10))

    def test_constant_gap(self):
        series = regret_series(np.full(100, 0.5), 0.8)
        assert series.total == pytest.approx(30.0)
        assert series.cumulative[49] == pytest.approx(15.0)


class TestRunLsvi:

    def test_bandit_explores_then_exploits(self):
        run = run_lsvi_orpo(_bandit(), K=50, beta=1.0, lambda_bonus=1.0, rng=np.random.default_rng(0))
        pulled = {int(p[0, 0]) for p in run.state.policies[:3]}
        assert pulled == {0, 1}
        assert run.state.policies[-1][0, 0] == 1
        assert run.regret.total <= 1.2

    def test_single_episode(self):
        mdp = make_linear_mdp('tabular', np.random.default_rng(1), 3, 2, 2)
        run = run_lsvi_orpo(mdp, K=1, beta=1.0, lambda_bonus=0.5, rng=np.random.default_rng(0))
        assert len(run.episode_values) == 1
        # no data: every Q ties at min(λ, H), so the lowest action wins
        np.testing.assert_array_equal(run.state.policies[0], 0)

    def test_gram_matrices_count_visits(self):
        mdp = make_linear_mdp('tabular', np.random.default_rng(2), 4, 2, 3)
        run = run_lsvi_orpo(mdp, K=30, beta=1.0, rng=np.random.default_rng(1))
        for h in range(3):
            assert np.trace(run.state.Lambdas[h]) == pytest.approx(mdp.dim + 30)
            np.testing.assert_allclose(run.state.Lambda_invs[h] @ run.state.Lambdas[h], np.eye(mdp.dim), atol=1e-8)

    def test_pessimistic_targets_run(self):
        mdp = make_linear_mdp('tabular', np.random.default_rng(2), 4, 2, 3)
        run = run_lsvi_orpo(mdp, K=20, lambda_p=0.5, rng=np.random.default_rng(1))
        assert np.all(np.isfinite(run.regret.instant))
        assert np.all(run.regret.instant >= -1e-12)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            run_lsvi_orpo(_bandit(), K=0)
        with pytest.raises(ValueError):
            run_lsvi_orpo(_bandit(), K=5, beta=0.0)

    def test_bonus_finds_the_needle(self):
        mdp = make_linear_mdp('needle', np.random.default_rng(7), 6, 2, 5)
        run = run_lsvi_orpo(mdp, K=400, rng=np.random.default_rng(0))
        assert run.episode_values[-1] == pytest.approx(run.optimal_value)
        # nothing is lost once the chain is learned
        assert run.regret.cumulative[-1] == pytest.approx(run.regret.cumulative[299])

    def test_greedy_sticks_with_the_decoy(self):
        mdp = make_linear_mdp('needle', np.random.default_rng(0), 6, 2, 5)
        run = run_lsvi_orpo(mdp, K=50, lambda_bonus=0.0, rng=np.random.default_rng(0))
        # without a bonus the lowest-index path is repeated forever
        assert len({p.tobytes() for p in run.state.policies[1:]}) == 1

    @pytest.mark.slow
    def test_bonus_beats_greedy_on_needle(self):
        sweep = lsvi_seed_sweep('needle', 6, 2, 5, K=2000, seeds=range(50))
        median_curve = np.median([r.regret.cumulative for r in sweep.bonus_runs], axis=0)
        early = median_curve[99] / 100
        late = median_curve[-1] / 2000
        assert early > 0
        assert late < 0.5 * early
        assert np.median(sweep.greedy_totals) >= 2.0 * np.median(sweep.bonus_totals)


class TestAdmissibility:

    def test_huge_bonus_always_covers(self):
        mdp = make_linear_mdp('tabular', np.random.default_rng(0), 3, 2, 2)
        assert admissibility_frequency(mdp, 10, 20, 100.0, np.random.default_rng(1)) == 0.0

    def test_zero_bonus_never_covers(self):
        mdp = make_linear_mdp('tabular', np.random.default_rng(0), 3, 2, 2)
        assert admissibility_frequency(mdp, 10, 20, 0.0, np.random.default_rng(1)) == 1.0
