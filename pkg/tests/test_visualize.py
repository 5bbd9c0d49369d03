"""Smoke tests for the figure writers."""

import numpy as np
import pytest

from src.storage import save_histogram_csv, write_csv
from src.visualize import (
    plot_regret_curves,
    plot_trajectories,
    plot_uncertainty_field,
    render_run,
)


def test_uncertainty_field(tmp_path):
    xs = np.linspace(-3, 3, 4)
    grid = np.array([(x, y) for y in xs for x in xs])
    out = plot_uncertainty_field(grid, np.abs(grid.sum(axis=1)), tmp_path / 'u.png')
    assert out.exists() and out.stat().st_size > 0


def test_trajectories_and_regret(tmp_path):
    paths = {'constant': np.cumsum(np.full((2, 9, 2), 0.5), axis=1)}
    assert plot_trajectories(paths, tmp_path / 't.png').exists()
    curves = {'bonus': np.cumsum(np.ones((3, 20)), axis=1), 'greedy': np.cumsum(np.full((3, 20), 2.0), axis=1)}
    assert plot_regret_curves(curves, tmp_path / 'r.png', log_y=True).exists()


def test_render_run(tmp_path):
    seed_dir = tmp_path / 'seed_0'
    seed_dir.mkdir()
    write_csv(seed_dir / 'metrics.csv', ('grad_steps', 'mean_return'), [
        {'grad_steps': 10, 'mean_return': 1.0},
        {'grad_steps': 20, 'mean_return': ''},
    ])
    save_histogram_csv(seed_dir / 'output_action_distance.csv', np.linspace(0, 1, 4), np.array([3, 1, 0]))
    written = render_run(tmp_path)
    assert [p.name for p in written] == ['learning_curve.png', 'action_distance.png']


def test_render_run_needs_metrics(tmp_path):
    with pytest.raises(FileNotFoundError):
        render_run(tmp_path)
