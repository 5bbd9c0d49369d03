"""
Uncertainty field of the learned RiskWorld dynamics.

Trains the ensemble on the band dataset and evaluates each uncertainty
heuristic on a 61 x 61 grid over the state square. The claim checked: the
estimated uncertainty grows with distance from the data line y = -x
(Spearman correlation >= 0.8 for the ensemble standard deviation).
"""

from __future__ import annotations

import json
import time
from pathlib import Path

# Allow running from project root or from experiment folder
ROOT = Path(__file__).resolve().parent.parent
sys_path = list(__import__('sys').path)
if str(ROOT) not in sys_path:
    __import__('sys').path.insert(0, str(ROOT))

from src.dynamics import HEURISTICS, DynamicsConfig, train_ensemble
from src.envs import collect_riskworld_dataset
from src.evaluate import spearman_distance_uncertainty, uncertainty_field
from src.numkit import RngStreams
from src.storage import save_grid_csv

RANDOM_SEED = 42
DATASET_SIZE = 10_000
GRID_POINTS = 61
MIN_SPEARMAN = 0.8
MAX_EPOCHS = 50
EXP_DIR = ROOT / 'experiment_results'


def run_uncertainty_field(out_dir: Path = EXP_DIR) -> dict:
    started = time.perf_counter()
    streams = RngStreams(RANDOM_SEED)
    dataset = collect_riskworld_dataset(DATASET_SIZE, streams.get('dataset'))
    config = DynamicsConfig(max_epochs=MAX_EPOCHS)
    model, report = train_ensemble(dataset, config, streams)

    per_heuristic = {}
    for heuristic in HEURISTICS:
        grid, values = uncertainty_field(model, heuristic, GRID_POINTS)
        save_grid_csv(out_dir / f'uncertainty_grid_{heuristic}.csv', grid, values)
        per_heuristic[heuristic] = {
            'spearman_vs_distance': spearman_distance_uncertainty(grid, values),
            'min_u': float(values.min()),
            'max_u': float(values.max()),
        }
    seconds = time.perf_counter() - started

    return {
        'experiment': 'riskworld_uncertainty_field',
        'description': 'Rank correlation between distance from y = -x and model uncertainty on a grid.',
        'parameters': {
            'random_seed': RANDOM_SEED,
            'dataset_size': DATASET_SIZE,
            'grid_points_per_axis': GRID_POINTS,
            'ensemble_size': config.ensemble_size,
            'max_epochs': MAX_EPOCHS,
        },
        'holdout_nll': [m.best_holdout_nll for m in report.members],
        'heuristics': per_heuristic,
        'checks': {
            'ensemble_std_spearman_at_least_0.8':
                per_heuristic['ensemble_std']['spearman_vs_distance'] >= MIN_SPEARMAN,
        },
        'seconds': seconds,
    }


def main() -> None:
    EXP_DIR.mkdir(exist_ok=True)
    print("Running uncertainty field experiment...")

    results = run_uncertainty_field()

    out_json = EXP_DIR / 'uncertainty_field_results.json'
    with open(out_json, 'w', encoding='utf-8') as f:
        json.dump(results, f, indent=2, ensure_ascii=False)
    print(f"Results saved to {out_json}")

    print("\n--- Spearman(distance, u) ---")
    for heuristic, stats in results['heuristics'].items():
        print(f"{heuristic:>14}: {stats['spearman_vs_distance']:.3f}  "
              f"(u in [{stats['min_u']:.4f}, {stats['max_u']:.4f}])")
    for name, ok in results['checks'].items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    print(f"Runtime: {results['seconds']:.0f}s")


if __name__ == '__main__':
    main()
