"""Tests for the ensemble dynamics model, its heuristics and training."""

import numpy as np
import pytest

from src.dynamics import (
    DynamicsConfig,
    EnsembleDynamics,
    GaussianPrediction,
    Normalizer,
    load_dynamics,
    save_dynamics,
    train_ensemble,
    uncertainty_from_prediction,
)
from src.envs import TransitionBatch, collect_riskworld_dataset
from src.numkit import MlpNetwork, RngStreams
from src.storage import SchemaError, save_networks

IDENTITY_1D = Normalizer(np.zeros(1), np.ones(1))


def _prediction(means, stds) -> GaussianPrediction:
    return GaussianPrediction(np.asarray(means, float), np.asarray(stds, float), IDENTITY_1D)


def _toy_ensemble(size: int = 3, seed: int = 0) -> EnsembleDynamics:
    rng = np.random.default_rng(seed)
    members = [MlpNetwork((4, 16, 6), rng) for _ in range(size)]
    return EnsembleDynamics(
        members,
        Normalizer(np.zeros(4), np.ones(4)),
        Normalizer(np.zeros(3), np.ones(3)),
        state_dim=2,
        action_dim=2,
    )


def _linear_data(n: int, seed: int) -> TransitionBatch:
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, size=(n, 2))
    a = rng.uniform(-1, 1, size=(n, 2))
    return TransitionBatch(s, a, np.zeros(n), s + a, np.zeros(n, dtype=bool))


class TestHeuristics:

    def test_two_member_spread(self):
        pred = _prediction([[[0.0]], [[2.0]]], [[[0.0]], [[0.0]]])
        assert uncertainty_from_prediction(pred, 'ensemble_var')[0] == pytest.approx(1.0)
        assert uncertainty_from_prediction(pred, 'ensemble_std')[0] == pytest.approx(1.0)

    def test_max_aleatoric(self):
        # Frobenius norms of diag(σ²) are 0.1 and 0.3
        stds = np.sqrt(np.array([[[0.1, 0.0]], [[0.0, 0.3]]]))
        pred = GaussianPrediction(np.zeros((2, 1, 2)), stds, Normalizer(np.zeros(2), np.ones(2)))
        assert uncertainty_from_prediction(pred, 'max_aleatoric')[0] == pytest.approx(0.3)

    def test_max_aleatoric_uses_the_covariance(self):
        stds = np.full((3, 2, 4), 0.3)
        stds[1, 1] = 0.5
        pred = GaussianPrediction(np.zeros((3, 2, 4)), stds, Normalizer(np.zeros(4), np.ones(4)))
        np.testing.assert_allclose(uncertainty_from_prediction(pred, 'max_aleatoric'), [0.18, 0.5])

    def test_identical_members_are_purely_aleatoric(self):
        means = np.tile(np.array([[[0.4, -1.0]]]), (3, 1, 1))
        stds = np.tile(np.array([[[0.3, 0.4]]]), (3, 1, 1))
        pred = GaussianPrediction(means, stds, Normalizer(np.zeros(2), np.ones(2)))
        assert uncertainty_from_prediction(pred, 'ensemble_std')[0] == pytest.approx(0.5)
        pred.stds = np.zeros_like(stds)
        assert uncertainty_from_prediction(pred, 'ensemble_std')[0] == pytest.approx(0.0, abs=1e-7)

    def test_unknown_heuristic(self):
        with pytest.raises(ValueError):
            uncertainty_from_prediction(_prediction([[[0.0]]], [[[1.0]]]), 'bald')

    def test_never_negative(self):
        model = _toy_ensemble(7)
        rng = np.random.default_rng(3)
        s, a = rng.normal(size=(500, 2)), rng.uniform(-1, 1, size=(500, 2))
        for h in ('max_aleatoric', 'ensemble_var', 'ensemble_std'):
            assert np.all(model.uncertainty(s, a, h) >= 0)


class TestEnsembleStep:

    def test_copied_members_agree(self):
        model = _toy_ensemble(1)
        model.members = [model.members[0].copy() for _ in range(4)]
        pred = model.predict(np.ones((3, 2)), np.zeros((3, 2)))
        for m in range(4):
            np.testing.assert_allclose(pred.means[m], pred.ensemble_mean)

    def test_sampling_is_reproducible(self):
        model = _toy_ensemble()
        s, a = np.zeros((10, 2)), np.ones((10, 2))
        first = model.step(s, a, np.random.default_rng(5))
        second = model.step(s, a, np.random.default_rng(5))
        for x, y in zip(first, second):
            np.testing.assert_array_equal(x, y)

    def test_mean_model_ignores_rng(self):
        model = _toy_ensemble()
        s, a = np.zeros((4, 2)), np.ones((4, 2))
        s1, r1, _ = model.step(s, a, np.random.default_rng(1), use_mean_model=True)
        s2, r2, _ = model.step(s, a, np.random.default_rng(2), use_mean_model=True)
        np.testing.assert_array_equal(s1, s2)
        np.testing.assert_array_equal(r1, r2)

    def test_reward_fn_replaces_learned_reward(self):
        model = _toy_ensemble()
        _, r, _ = model.step(np.zeros((3, 2)), np.ones((3, 2)), np.random.default_rng(0),
                             reward_fn=lambda s, a, s2: np.full(len(s), 7.0))
        np.testing.assert_array_equal(r, 7.0)

    def test_untrained_model_refuses(self):
        model = _toy_ensemble()
        model.trained = False
        with pytest.raises(RuntimeError):
            model.predict(np.zeros((1, 2)), np.zeros((1, 2)))

    def test_out_of_box(self):
        model = _toy_ensemble()
        flags = model.out_of_box(np.array([[0.0, 9.0], [0.0, 11.0]]), box=10.0)
        np.testing.assert_array_equal(flags, [False, True])


class TestTraining:

    def test_too_small_dataset(self):
        data = _linear_data(50, 0)
        with pytest.raises(ValueError):
            train_ensemble(data, DynamicsConfig(ensemble_size=2), RngStreams(0))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            DynamicsConfig(ensemble_size=1).validate()
        with pytest.raises(ValueError):
            DynamicsConfig(holdout_fraction=1.0).validate()

    def test_members_are_distinct(self):
        cfg = DynamicsConfig(ensemble_size=7, hidden_sizes=(16, 16), max_epochs=2)
        model, report = train_ensemble(_linear_data(200, 1), cfg, RngStreams(0))
        assert model.size == 7 and len(report.members) == 7
        flats = [m.get_flat() for m in model.members]
        for i in range(7):
            for j in range(i + 1, 7):
                assert np.linalg.norm(flats[i] - flats[j]) > 0
        assert report.holdout_size == 20 and report.train_size == 180

    def test_worker_count_does_not_change_result(self):
        data = _linear_data(200, 2)
        a, _ = train_ensemble(data, DynamicsConfig(ensemble_size=3, hidden_sizes=(8,), max_epochs=3),
                              RngStreams(4))
        b, _ = train_ensemble(data, DynamicsConfig(ensemble_size=3, hidden_sizes=(8,), max_epochs=3,
                                                   workers=3), RngStreams(4))
        for x, y in zip(a.members, b.members):
            np.testing.assert_array_equal(x.get_flat(), y.get_flat())

    @pytest.mark.slow
    def test_learns_deterministic_linear_dynamics(self):
        cfg = DynamicsConfig(ensemble_size=2, hidden_sizes=(64, 64), max_epochs=150, patience=20)
        model, _ = train_ensemble(_linear_data(2000, 3), cfg, RngStreams(0))
        test = _linear_data(500, 4)
        pred = model.predict(test.states, test.actions)
        delta = pred.target_normalizer.denormalize(pred.ensemble_mean)[:, :2]
        assert np.mean((delta - test.actions) ** 2) < 1e-2

    @pytest.mark.slow
    def test_learns_riskworld_dataset(self):
        data = collect_riskworld_dataset(3000, np.random.default_rng(0))
        cfg = DynamicsConfig(ensemble_size=3, hidden_sizes=(64, 64), max_epochs=40)
        model, report = train_ensemble(data, cfg, RngStreams(1))
        for m in report.members:
            assert m.best_holdout_nll in m.holdout_history
            assert m.best_holdout_nll <= m.holdout_history[0]
        u = model.uncertainty(data.states[:200], data.actions[:200], 'ensemble_std')
        far = model.uncertainty(np.full((200, 2), 2.5), np.ones((200, 2)), 'ensemble_std')
        assert np.median(far) > np.median(u)


class TestPersistence:

    def test_round_trip(self, tmp_path):
        model = _toy_ensemble()
        model.input_normalizer = Normalizer(np.array([0.1, 0.2, 0.3, 0.4]), np.array([1.0, 2.0, 3.0, 4.0]))
        save_dynamics(model, tmp_path / 'dyn.ckpt')
        loaded = load_dynamics(tmp_path / 'dyn.ckpt')
        s, a = np.random.default_rng(0).normal(size=(5, 2)), np.zeros((5, 2))
        np.testing.assert_array_equal(loaded.predict(s, a).means, model.predict(s, a).means)
        assert loaded.size == 3

    def test_missing_metadata(self, tmp_path):
        save_networks(tmp_path / 'dyn.ckpt', 'dynamics', {'member0': MlpNetwork((4, 6), np.random.default_rng(0))})
        with pytest.raises(SchemaError):
            load_dynamics(tmp_path / 'dyn.ckpt')
