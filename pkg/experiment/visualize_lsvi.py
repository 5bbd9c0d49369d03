"""
Regret curves and posterior-variance trace for the LSVI experiment.

Reads the regret CSVs and lsvi_results.json written by run_lsvi_experiment.py.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Allow running from project root or from experiment folder
ROOT = Path(__file__).resolve().parent.parent
sys_path = list(__import__('sys').path)
if str(ROOT) not in sys_path:
    __import__('sys').path.insert(0, str(ROOT))

from src.storage import read_csv  # noqa: E402
from src.visualize import plot_regret_curves  # noqa: E402

EXP_DIR = ROOT / 'experiment_results'
REGRET_DIR = EXP_DIR / 'lsvi_regret'
RESULTS_PATH = EXP_DIR / 'lsvi_results.json'


def _cumulative(prefix: str) -> np.ndarray:
    files = sorted(REGRET_DIR.glob(f'{prefix}_seed*.csv'))
    return np.array([[float(r['cumulative_regret']) for r in read_csv(f)] for f in files])


def fig_regret() -> None:
    plot_regret_curves({
        'LSVI with bonus': _cumulative('lsvi'),
        'greedy (no bonus)': _cumulative('greedy'),
    }, EXP_DIR / 'lsvi_regret.png')


def fig_posterior_trace() -> None:
    with open(RESULTS_PATH, encoding='utf-8') as f:
        trace = json.load(f)['posterior']['variance_trace']
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(range(len(trace)), trace, 'o-', color='#2e86ab', markersize=3, linewidth=1.5)
    ax.set_yscale('log')
    ax.set_xlabel('Rank-one updates')
    ax.set_ylabel('φᵀΛ⁻¹φ')
    ax.set_title('Posterior variance of a fixed query', fontsize=12)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(EXP_DIR / 'lsvi_posterior_trace.png', dpi=150, bbox_inches='tight')
    plt.close()
    print(f"Saved: {EXP_DIR / 'lsvi_posterior_trace.png'}")


def main() -> None:
    print("Generating LSVI figures...")
    fig_regret()
    fig_posterior_trace()
    print("Done.")


if __name__ == '__main__':
    main()
