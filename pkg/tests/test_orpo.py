"""End-to-end tests of the training loop on tiny RiskWorld runs."""

import pickle

import pytest

from src.config import ConfigError, ExperimentConfig, apply_overrides, apply_preset
from src.orpo import METRIC_FIELDS, StageError, run_experiment, run_seeds
from src.storage import load_buffer, load_json, read_csv

TINY = [
    'env.dataset_size=200',
    'dynamics.ensemble_size=2',
    'dynamics.hidden_sizes=[8]',
    'dynamics.max_epochs=2',
    'dynamics.batch_size=64',
    'rollout.batch_size=10',
    'rollout.horizon_optimistic=2',
    'rollout.horizon_pessimistic=2',
    'sac.hidden_sizes=[8, 8]',
    'sac.batch_size=16',
    'td3bc.hidden_sizes=[8, 8]',
    'td3bc.batch_size=16',
    'training.epochs=2',
    'training.gradient_steps=4',
    'training.rollout_interval=2',
    'evaluation.episodes=3',
    'evaluation.eps_u_samples=5',
    'evaluation.model_horizon=3',
]


def _tiny(preset: str = 'orpo') -> ExperimentConfig:
    return apply_overrides(apply_preset(ExperimentConfig(), preset), TINY)


class TestRunExperiment:

    def test_writes_every_artifact(self, tmp_path):
        result = run_experiment(_tiny(), 0, tmp_path)
        for name in ('config.toml', 'd_env.rbuf', 'dynamics.ckpt', 'dynamics_report.json', 'metrics.csv',
                     'rollout_policy.ckpt', 'output_policy.ckpt', 'rollout_action_distance.csv',
                     'output_action_distance.csv', 'eval_report.json'):
            assert (tmp_path / name).exists(), name
        assert len(load_buffer(tmp_path / 'd_env.rbuf')) == 200
        assert load_json(tmp_path / 'eval_report.json')['episodes'] == 3
        assert result.final_report.eps_u >= 0

    def test_one_metrics_row_per_epoch(self, tmp_path):
        run_experiment(_tiny(), 0, tmp_path)
        rows = read_csv(tmp_path / 'metrics.csv')
        assert [int(r['epoch']) for r in rows] == [1, 2]
        assert [int(r['grad_steps']) for r in rows] == [4, 8]
        assert set(rows[0]) == set(METRIC_FIELDS)
        assert int(rows[-1]['n_env']) == 200
        assert int(rows[-1]['n_pess']) > 0 and int(rows[-1]['n_opt_raw']) > 0
        assert rows[-1]['n_opt_raw'] == rows[-1]['n_opt_relabel']

    def test_same_seed_same_metrics(self, tmp_path):
        a = run_experiment(_tiny(), 3, tmp_path / 'a')
        b = run_experiment(_tiny(), 3, tmp_path / 'b')
        assert a.metrics == b.metrics

    def test_mopo_has_no_rollout_policy(self, tmp_path):
        run_experiment(_tiny('mopo'), 0, tmp_path)
        assert not (tmp_path / 'rollout_policy.ckpt').exists()
        assert (tmp_path / 'output_policy.ckpt').exists()
        row = read_csv(tmp_path / 'metrics.csv')[-1]
        assert int(row['n_opt_raw']) == 0
        assert row['sac_critic_loss'] == ''

    def test_oroo_reports_the_rollout_policy(self, tmp_path):
        result = run_experiment(_tiny('oroo'), 0, tmp_path)
        assert not (tmp_path / 'output_policy.ckpt').exists()
        assert result.metrics[-1]['rollout_mean_return'] == result.metrics[-1]['mean_return']

    def test_random_rollout_policy(self, tmp_path):
        run_experiment(_tiny('orpo-random'), 0, tmp_path)
        assert not (tmp_path / 'rollout_policy.ckpt').exists()
        assert read_csv(tmp_path / 'metrics.csv')[-1]['rollout_mean_return'] != ''

    def test_invalid_config_writes_nothing(self, tmp_path):
        cfg = apply_overrides(_tiny(), ['env.dataset_size=0'])
        with pytest.raises(ConfigError):
            run_experiment(cfg, 0, tmp_path / 'run')
        assert not (tmp_path / 'run').exists()

    def test_failing_stage_is_named(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise FloatingPointError('diverged')

        monkeypatch.setattr('src.orpo.generate_rollouts', boom)
        with pytest.raises(StageError) as info:
            run_experiment(_tiny(), 0, tmp_path)
        assert info.value.stage == 'rollout-optimistic'
        assert isinstance(info.value.cause, FloatingPointError)
        assert (tmp_path / 'dynamics.ckpt').exists()


class TestStageError:

    def test_survives_pickling(self):
        err = StageError('dynamics', ValueError('too small'))
        back = pickle.loads(pickle.dumps(err))
        assert back.stage == 'dynamics'
        assert isinstance(back.cause, ValueError)
        assert str(back) == str(err)


class TestRunSeeds:

    def test_summary(self, tmp_path):
        results = run_seeds(_tiny(), [0, 1], tmp_path)
        assert [r.seed for r in results] == [0, 1]
        assert (tmp_path / 'seed_0' / 'metrics.csv').exists()
        summary = load_json(tmp_path / 'summary.json')
        assert summary['seeds'] == [0, 1]
        assert len(summary['final_mean_returns']) == 2

    @pytest.mark.slow
    def test_process_pool_matches_serial(self, tmp_path):
        serial = run_seeds(_tiny(), [0, 1], tmp_path / 'serial')
        pooled = run_seeds(_tiny(), [0, 1], tmp_path / 'pooled', workers=2)
        assert [r.metrics for r in serial] == [r.metrics for r in pooled]
