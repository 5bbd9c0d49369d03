"""Acceptance runs of the experiment scripts (slow; run with `pytest -m slow`)."""

import numpy as np
import pytest

from experiment.run_lower_bound_experiment import run_lower_bound_experiment
from experiment.run_lsvi_experiment import RANDOM_SEED, admissibility_experiment, posterior_experiment
from experiment.run_toy_experiment import MOPO_MAX_RETURN, ORPO_MIN_RETURN, SEEDS, make_config
from experiment.run_uncertainty_field import MIN_SPEARMAN, run_uncertainty_field
from src.orpo import run_seeds

pytestmark = pytest.mark.slow


class TestRiskWorldHeadline:

    def test_orpo_beats_mopo(self, tmp_path):
        returns = {}
        for preset in ('mopo', 'orpo'):
            results = run_seeds(make_config(preset), SEEDS, tmp_path / preset, workers=len(SEEDS))
            returns[preset] = float(np.mean([r.final_report.mean_return for r in results]))
        assert returns['mopo'] <= MOPO_MAX_RETURN
        assert returns['orpo'] >= ORPO_MIN_RETURN


class TestUncertaintyField:

    def test_ensemble_std_tracks_distance(self, tmp_path):
        result = run_uncertainty_field(tmp_path)
        assert result['heuristics']['ensemble_std']['spearman_vs_distance'] >= MIN_SPEARMAN
        assert (tmp_path / 'uncertainty_grid_ensemble_std.csv').exists()


class TestBonusAdmissibility:

    def test_scaled_bonus_covers_the_regression_error(self):
        # same stream order as the experiment script
        rng = np.random.default_rng(RANDOM_SEED)
        posterior_experiment(rng)
        result = admissibility_experiment(rng)
        assert result['violation_frequency'] <= 0.05
        # the learning default is far smaller and is not expected to cover every pair
        assert result['learning_lambda_bonus'] < result['lambda_bonus']


class TestLowerBound:

    def test_bound_holds_for_every_policy(self):
        result = run_lower_bound_experiment()
        assert result['parameters']['policies'] == 20
        for instance in result['instances']:
            assert instance['violations'] == 0
