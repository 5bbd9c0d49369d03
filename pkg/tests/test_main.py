"""Tests for the command-line entry point and its exit codes."""

import pytest

from src.config import ConfigError, load_config
from src.main import EXIT_CONFIG, EXIT_FAILURE, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, exit_code_for, main
from src.numkit import NumericalError
from src.orpo import StageError
from src.storage import load_buffer, load_json, read_csv

TINY_DYNAMICS = ['dynamics.ensemble_size=2', 'dynamics.hidden_sizes=[8]', 'dynamics.max_epochs=2']


def _overrides(items):
    args = []
    for item in items:
        args += ['--override', item]
    return args


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / 'data.rbuf'
    assert main(['collect-data', '--n', '200', '--out', str(path)]) == EXIT_OK
    return path


@pytest.fixture
def dynamics(tmp_path, dataset):
    path = tmp_path / 'dynamics.ckpt'
    code = main(['train-dynamics', '--data', str(dataset), '--out', str(path)] + _overrides(TINY_DYNAMICS))
    assert code == EXIT_OK
    return path


class TestCollectAndTrain:

    def test_collect_with_jsonl(self, tmp_path):
        out = tmp_path / 'd.rbuf'
        assert main(['collect-data', '--n', '50', '--seed', '3', '--out', str(out), '--jsonl']) == EXIT_OK
        assert len(load_buffer(out)) == 50
        assert out.with_suffix('.jsonl').exists()

    def test_zero_transitions(self, tmp_path):
        assert main(['collect-data', '--n', '0', '--out', str(tmp_path / 'd.rbuf')]) == EXIT_CONFIG

    def test_train_writes_report(self, dynamics):
        report = load_json(dynamics.with_suffix('.json'))
        assert len(report['members']) == 2

    def test_missing_dataset(self, tmp_path):
        code = main(['train-dynamics', '--data', str(tmp_path / 'missing.rbuf'),
                     '--out', str(tmp_path / 'm.ckpt')])
        assert code == EXIT_IO

    def test_bad_override(self, dataset, tmp_path):
        code = main(['train-dynamics', '--data', str(dataset), '--out', str(tmp_path / 'm.ckpt'),
                     '--override', 'dynamics.members=3'])
        assert code == EXIT_CONFIG


class TestExportAndEval:

    def test_export_grid(self, dynamics, tmp_path):
        out = tmp_path / 'grid.csv'
        assert main(['export-grid', '--dynamics', str(dynamics), '--n', '5', '--out', str(out)]) == EXIT_OK
        assert len(read_csv(out)) == 25

    def test_export_grid_rejects_empty_grid(self, dynamics, tmp_path):
        out = tmp_path / 'grid.csv'
        assert main(['export-grid', '--dynamics', str(dynamics), '--n', '0', '--out', str(out)]) == EXIT_CONFIG
        assert not out.exists()

    def test_normalized_score(self, capsys):
        assert main(['eval', '--score', '12135', '--env-name', 'halfcheetah']) == EXIT_OK
        assert 'Normalized score: 100.00' in capsys.readouterr().out

    def test_score_needs_environment(self):
        assert main(['eval', '--score', '1.0']) == EXIT_CONFIG

    def test_nothing_to_evaluate(self):
        assert main(['eval']) == EXIT_CONFIG

    def test_dynamics_checkpoint_is_not_a_policy(self, dynamics):
        assert main(['eval', '--policy', str(dynamics), '--episodes', '2']) == EXIT_IO


class TestRunAndLsvi:

    def test_tiny_run(self, tmp_path):
        out = tmp_path / 'run'
        code = main(['run', '--preset', 'mopo', '--seed', '0', '--out', str(out)] + _overrides(
            TINY_DYNAMICS + [
                'env.dataset_size=200',
                'rollout.batch_size=10',
                'td3bc.hidden_sizes=[8, 8]',
                'td3bc.batch_size=16',
                'training.epochs=1',
                'training.gradient_steps=2',
                'evaluation.episodes=2',
                'evaluation.eps_u_samples=5',
            ]))
        assert code == EXIT_OK
        assert load_json(out / 'summary.json')['preset'] == 'mopo'
        assert (out / 'run.log').exists()
        policy = out / 'seed_0' / 'output_policy.ckpt'
        report = tmp_path / 'eval.json'
        assert main(['eval', '--policy', str(policy), '--episodes', '2', '--out', str(report)]) == EXIT_OK
        assert load_json(report)['episodes'] == 2

    def test_invalid_config_exits_before_running(self, tmp_path):
        code = main(['run', '--out', str(tmp_path / 'run'), '--override', 'env.dataset_size=0'])
        assert code == EXIT_CONFIG
        assert not (tmp_path / 'run' / 'summary.json').exists()

    def test_lsvi_sweep(self, tmp_path):
        code = main(['lsvi', '--instance', 'tabular', '--states', '3', '--actions', '2', '--horizon', '2',
                     '--episodes', '20', '--seeds', '2', '--out', str(tmp_path)])
        assert code == EXIT_OK
        summary = load_json(tmp_path / 'summary.json')
        assert len(summary['lsvi_total_regret']) == 2
        assert len(read_csv(tmp_path / 'lsvi_seed1.csv')) == 20

    @pytest.mark.parametrize('flags', [['--bonus', 'big'], ['--seeds', '0'], ['--episodes', '0']])
    def test_lsvi_rejects(self, tmp_path, flags):
        assert main(['lsvi', '--out', str(tmp_path)] + flags) == EXIT_CONFIG


class TestInitConfig:

    def test_template_loads(self, tmp_path):
        out = tmp_path / 'nested' / 'config.toml'
        assert main(['init-config', '--out', str(out)]) == EXIT_OK
        assert load_config(out).preset == 'orpo'


class TestExitCodes:

    def test_mapping(self):
        assert exit_code_for(ConfigError('x')) == EXIT_CONFIG
        assert exit_code_for(NumericalError('x')) == EXIT_NUMERICAL
        assert exit_code_for(FileNotFoundError('x')) == EXIT_IO
        assert exit_code_for(RuntimeError('x')) == EXIT_FAILURE

    def test_stage_errors_use_their_cause(self):
        assert exit_code_for(StageError('dynamics', NumericalError('nan loss'))) == EXIT_NUMERICAL
        assert exit_code_for(StageError('collect', PermissionError('denied'))) == EXIT_IO

    def test_plain_value_errors_are_usage_errors(self):
        assert exit_code_for(ValueError('n must be positive')) == EXIT_CONFIG
        assert exit_code_for(StageError('rollout-optimistic', ValueError('empty buffer'))) == EXIT_FAILURE
