"""
Figures for the RiskWorld experiments: learning curves, trajectories,
action-distance distributions and the uncertainty field.

Reads the outputs of run_toy_experiment.py and run_uncertainty_field.py.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

# Allow running from project root or from experiment folder
ROOT = Path(__file__).resolve().parent.parent
sys_path = list(__import__('sys').path)
if str(ROOT) not in sys_path:
    __import__('sys').path.insert(0, str(ROOT))

from src.envs import sample_band_states
from src.evaluate import policy_trajectories
from src.policies import load_policy
from src.storage import read_csv
from src.visualize import (
    plot_action_distance_histograms,
    plot_learning_curves,
    plot_trajectories,
    plot_uncertainty_field,
)

EXP_DIR = ROOT / 'experiment_results'
RUNS_DIR = EXP_DIR / 'toy_runs'
PRESETS = ('mopo', 'orpo')
N_TRAJECTORIES = 6
RANDOM_SEED = 42


def _seed_dirs(preset: str) -> list[Path]:
    return sorted((RUNS_DIR / preset).glob('seed_*'))


def _read_histogram(path: Path) -> tuple[np.ndarray, np.ndarray]:
    rows = read_csv(path)
    edges = np.array([float(r['bin_left']) for r in rows] + [float(rows[-1]['bin_right'])])
    return edges, np.array([int(r['count']) for r in rows])


def fig_learning_curves() -> None:
    runs = {p.upper(): [read_csv(d / 'metrics.csv') for d in _seed_dirs(p)] for p in PRESETS}
    plot_learning_curves(runs, EXP_DIR / 'toy_learning_curves.png')


def fig_trajectories() -> None:
    starts = sample_band_states(N_TRAJECTORIES, np.random.default_rng(RANDOM_SEED))
    paths = {}
    for preset in PRESETS:
        ckpt = _seed_dirs(preset)[0] / 'output_policy.ckpt'
        paths[preset.upper()] = policy_trajectories(load_policy(ckpt), starts)
    plot_trajectories(paths, EXP_DIR / 'toy_trajectories.png')


def fig_action_distances() -> None:
    seed_dir = _seed_dirs('orpo')[0]
    plot_action_distance_histograms({
        'rollout policy (optimistic)': _read_histogram(seed_dir / 'rollout_action_distance.csv'),
        'output policy (pessimistic)': _read_histogram(seed_dir / 'output_action_distance.csv'),
    }, EXP_DIR / 'toy_action_distance.png')


def fig_uncertainty_field() -> None:
    rows = read_csv(EXP_DIR / 'uncertainty_grid_ensemble_std.csv')
    grid = np.array([[float(r['x']), float(r['y'])] for r in rows])
    values = np.array([float(r['u']) for r in rows])
    plot_uncertainty_field(grid, values, EXP_DIR / 'uncertainty_field.png',
                           title='Ensemble std of the learned dynamics')


def main() -> None:
    print("Generating RiskWorld figures...")
    fig_learning_curves()
    fig_trajectories()
    fig_action_distances()
    fig_uncertainty_field()
    print("Done.")


if __name__ == '__main__':
    main()
