"""Figures for RiskWorld runs and LSVI sweeps (PNG, Agg backend)."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.envs import BAND_HALF_WIDTH, RISKWORLD_BOUND, SQRT2  # noqa: E402
from src.storage import read_csv  # noqa: E402

COLORS = ['#2e86ab', '#a23b72', '#f18f01', '#3b1f2b', '#44af69', '#c73e1d']


def _save(fig: plt.Figure, out_path: Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150, bbox_inches='tight')
    plt.close(fig)
    print(f"Saved: {out_path}")
    return out_path


def _draw_band(ax: plt.Axes) -> None:
    xs = np.linspace(-RISKWORLD_BOUND, RISKWORLD_BOUND, 2)
    offset = BAND_HALF_WIDTH * SQRT2
    ax.plot(xs, -xs, color='#333', linewidth=1.0, linestyle='--')
    ax.fill_between(xs, -xs - offset, -xs + offset, color='#999', alpha=0.25, label='data band')
    ax.set_xlim(-RISKWORLD_BOUND, RISKWORLD_BOUND)
    ax.set_ylim(-RISKWORLD_BOUND, RISKWORLD_BOUND)
    ax.set_aspect('equal')


def plot_uncertainty_field(
    grid: np.ndarray,
    values: np.ndarray,
    out_path: Path,
    title: str = 'Model uncertainty u(s)',
) -> Path:
    """Heatmap of u over the square grid produced by uncertainty_field."""
    n = int(round(np.sqrt(len(grid))))
    # x varies fastest, so rows of the reshaped field are y
    image = np.asarray(values).reshape(n, n)
    xs, ys = grid[:n, 0], grid[::n, 1]
    fig, ax = plt.subplots(figsize=(6, 5))
    mesh = ax.pcolormesh(xs, ys, image, shading='nearest', cmap='viridis')
    fig.colorbar(mesh, ax=ax, label='u')
    _draw_band(ax)
    ax.set_xlabel('x')
    ax.set_ylabel('y')
    ax.set_title(title, fontsize=12)
    return _save(fig, out_path)


def plot_trajectories(paths: Mapping[str, np.ndarray], out_path: Path) -> Path:
    """Overlay deterministic RiskWorld paths per method, (n, T+1, 2) each."""
    fig, ax = plt.subplots(figsize=(6, 6))
    _draw_band(ax)
    for (label, trajs), color in zip(paths.items(), COLORS):
        for i, traj in enumerate(trajs):
            ax.plot(traj[:, 0], traj[:, 1], '-o', color=color, markersize=2.5, alpha=0.7,
                    linewidth=1.2, label=label if i == 0 else None)
    ax.set_xlabel('x')
    ax.set_ylabel('y')
    ax.set_title('Policy trajectories in RiskWorld', fontsize=12)
    ax.legend(fontsize=9, loc='lower left')
    return _save(fig, out_path)


def plot_action_distance_histograms(
    histograms: Mapping[str, tuple[np.ndarray, np.ndarray]],
    out_path: Path,
) -> Path:
    """Step histograms of ‖π(s) − a‖₂ over the dataset, one per policy."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (label, (edges, counts)), color in zip(histograms.items(), COLORS):
        total = max(int(np.sum(counts)), 1)
        ax.stairs(np.asarray(counts) / total, edges, color=color, linewidth=2, label=label)
    ax.set_xlabel('Action distance to dataset action')
    ax.set_ylabel('Fraction of transitions')
    ax.set_title('Action distance distributions', fontsize=12)
    ax.grid(axis='y', alpha=0.3)
    ax.legend(fontsize=9)
    return _save(fig, out_path)


def plot_regret_curves(curves: Mapping[str, np.ndarray], out_path: Path, log_y: bool = False) -> Path:
    """
    Median cumulative regret with an interquartile band.

    Args:
        curves: label -> (seeds, K) cumulative regret
        out_path: PNG path
        log_y: Logarithmic y axis
    """
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (label, cum), color in zip(curves.items(), COLORS):
        cum = np.atleast_2d(cum)
        episodes = np.arange(1, cum.shape[1] + 1)
        lo, med, hi = np.percentile(cum, [25, 50, 75], axis=0)
        ax.plot(episodes, med, color=color, linewidth=2, label=label)
        ax.fill_between(episodes, lo, hi, color=color, alpha=0.2)
    if log_y:
        ax.set_yscale('symlog')
    ax.set_xlabel('Episode')
    ax.set_ylabel('Cumulative regret')
    ax.set_title('LSVI regret (median, IQR)', fontsize=12)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=9)
    return _save(fig, out_path)


def plot_learning_curves(
    runs: Mapping[str, Sequence[Sequence[dict]]],
    out_path: Path,
    field: str = 'mean_return',
) -> Path:
    """
    Mean ± std over seeds of one metrics.csv column against gradient steps.

    Args:
        runs: label -> list of per-seed metric rows (as read from metrics.csv)
        out_path: PNG path
        field: Column to plot
    """
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (label, seeds), color in zip(runs.items(), COLORS):
        length = min(len(rows) for rows in seeds)
        if length == 0:
            continue
        steps = np.array([float(r['grad_steps']) for r in seeds[0][:length]])
        values = np.array([[_as_float(r.get(field)) for r in rows[:length]] for rows in seeds])
        mean, std = np.nanmean(values, axis=0), np.nanstd(values, axis=0)
        ax.plot(steps, mean, '-o', color=color, linewidth=2, markersize=4, label=label)
        ax.fill_between(steps, mean - std, mean + std, color=color, alpha=0.2)
    ax.set_xlabel('Gradient steps')
    ax.set_ylabel(field.replace('_', ' '))
    ax.set_title('Learning curves (mean ± std over seeds)', fontsize=12)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=9)
    return _save(fig, out_path)


def _as_float(value: object) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        return float('nan')


# ── Run directories ──────────────────────────────────────────────────────────

def render_run(run_dir: Path) -> list[Path]:
    """
    Draw the learning curve and action-distance histograms of a `run` output
    directory (seed_<n>/ subdirectories) into run_dir/figures.
    """
    run_dir = Path(run_dir)
    seed_dirs = sorted(p for p in run_dir.glob('seed_*') if (p / 'metrics.csv').exists())
    if not seed_dirs:
        raise FileNotFoundError(f"no seed_*/metrics.csv under {run_dir}")
    figures = run_dir / 'figures'
    written = [plot_learning_curves(
        {run_dir.name: [read_csv(p / 'metrics.csv') for p in seed_dirs]},
        figures / 'learning_curve.png',
    )]
    histograms = {}
    for name in ('rollout', 'output'):
        path = seed_dirs[0] / f'{name}_action_distance.csv'
        if path.exists():
            rows = read_csv(path)
            edges = np.array([float(r['bin_left']) for r in rows] + [float(rows[-1]['bin_right'])])
            histograms[f'{name} policy'] = (edges, np.array([int(r['count']) for r in rows]))
    if histograms:
        written.append(plot_action_distance_histograms(histograms, figures / 'action_distance.png'))
    return written


def main(argv: list = None) -> None:
    parser = argparse.ArgumentParser(description='Render figures for a run output directory')
    parser.add_argument('run_dir', type=str, help='Directory written by `python -m src.main run`')
    args = parser.parse_args(argv)
    try:
        render_run(Path(args.run_dir))
    except FileNotFoundError as exc:
        print(f"Error: {exc}")
        sys.exit(1)


if __name__ == '__main__':
    main()
