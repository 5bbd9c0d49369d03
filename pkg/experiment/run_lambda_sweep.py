"""
Sensitivity of ORPO to the optimism coefficient lambda_o.

Runs the `orpo` preset with lambda_p fixed and lambda_o swept from negative to
positive values. The rollout policy is optimistic relative to the pessimistic
MDP whenever lambda_o > -lambda_p, so even negative values should keep most of
ORPO's advantage over MOPO; lambda_o = -lambda_p collapses the optimistic
branch onto the pessimistic one.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

# Allow running from project root or from experiment folder
ROOT = Path(__file__).resolve().parent.parent
sys_path = list(__import__('sys').path)
if str(ROOT) not in sys_path:
    __import__('sys').path.insert(0, str(ROOT))

from src.config import ExperimentConfig, apply_overrides, apply_preset
from src.orpo import run_seeds

SEEDS = [0, 1, 2]
LAMBDA_P = 100.0
LAMBDA_O_VALUES = [-100.0, -50.0, -10.0, 0.0, 1.0, 10.0]
EPOCHS = 3
GRADIENT_STEPS = 1500
ROLLOUT_INTERVAL = 250
EVAL_EPISODES = 100
WORKERS = 3
RUNS_DIR = ROOT / 'experiment_results' / 'lambda_sweep_runs'


def make_config(lambda_o: float) -> ExperimentConfig:
    config = apply_preset(ExperimentConfig(), 'orpo')
    return apply_overrides(config, [
        f'shaping.lambda_p={LAMBDA_P}',
        f'shaping.lambda_o={lambda_o}',
        f'training.epochs={EPOCHS}',
        f'training.gradient_steps={GRADIENT_STEPS}',
        f'training.rollout_interval={ROLLOUT_INTERVAL}',
        f'evaluation.episodes={EVAL_EPISODES}',
        f'evaluation.eps_u_samples={EVAL_EPISODES}',
    ])


def run_lambda_sweep(runs_dir: Path = RUNS_DIR) -> dict:
    rows = []
    for lambda_o in LAMBDA_O_VALUES:
        results = run_seeds(make_config(lambda_o), SEEDS, runs_dir / f'lambda_o_{lambda_o:g}', WORKERS)
        returns = [r.final_report.mean_return for r in results]
        distances = [float(r.metrics[-1]['rollout_action_distance']) for r in results]
        rows.append({
            'lambda_o': lambda_o,
            'returns': returns,
            'mean_return': float(np.mean(returns)),
            'std_return': float(np.std(returns)),
            'rollout_action_distance': float(np.mean(distances)),
            'optimistic_wrt_pessimistic': lambda_o > -LAMBDA_P,
        })
    return {
        'experiment': 'lambda_o_sensitivity',
        'description': 'Final ORPO return and rollout-policy action distance as lambda_o varies.',
        'parameters': {
            'seeds': SEEDS,
            'lambda_p': LAMBDA_P,
            'lambda_o_values': LAMBDA_O_VALUES,
            'epochs': EPOCHS,
            'gradient_steps': GRADIENT_STEPS,
        },
        'sweep': rows,
    }


def main() -> None:
    out_dir = ROOT / 'experiment_results'
    out_dir.mkdir(exist_ok=True)
    print("Running lambda_o sensitivity sweep...")

    results = run_lambda_sweep()

    out_json = out_dir / 'lambda_sweep_results.json'
    with open(out_json, 'w', encoding='utf-8') as f:
        json.dump(results, f, indent=2, ensure_ascii=False)
    print(f"Results saved to {out_json}")

    print("\n  lambda_o   return           rollout dist")
    for row in results['sweep']:
        print(f"  {row['lambda_o']:>8g}   {row['mean_return']:6.2f} ± {row['std_return']:5.2f}   "
              f"{row['rollout_action_distance']:.3f}")


if __name__ == '__main__':
    main()
