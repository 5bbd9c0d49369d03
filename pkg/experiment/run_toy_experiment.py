"""
RiskWorld toy experiment: MOPO vs ORPO.

Trains the `mopo` and `orpo` presets over the same seeds and compares final
returns. From the ORPO runs it also pairs, per seed, the action distance of
the optimistic rollout policy with that of the pessimistic output policy and
applies a one-sided sign test. Finally seed 0 of ORPO is rerun and its
metrics.csv compared byte for byte with the first run.

The training budget is reduced from 10 epochs x 10000 gradient steps so the
whole script finishes on a laptop CPU; the MOPO/ORPO gap shows up well before
the full budget.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

# Allow running from project root or from experiment folder
ROOT = Path(__file__).resolve().parent.parent
sys_path = list(__import__('sys').path)
if str(ROOT) not in sys_path:
    __import__('sys').path.insert(0, str(ROOT))

from src.config import ExperimentConfig, apply_overrides, apply_preset
from src.evaluate import sign_test
from src.orpo import run_seeds

SEEDS = [0, 1, 2, 3, 4]
PRESETS = ('mopo', 'orpo')
EPOCHS = 4
GRADIENT_STEPS = 1500
ROLLOUT_INTERVAL = 250
EVAL_EPISODES = 100
WORKERS = 5
MOPO_MAX_RETURN = 15.0
ORPO_MIN_RETURN = 25.0
RUNS_DIR = ROOT / 'experiment_results' / 'toy_runs'


def _budget_overrides() -> list[str]:
    return [
        f'training.epochs={EPOCHS}',
        f'training.gradient_steps={GRADIENT_STEPS}',
        f'training.rollout_interval={ROLLOUT_INTERVAL}',
        f'evaluation.episodes={EVAL_EPISODES}',
        f'evaluation.eps_u_samples={EVAL_EPISODES}',
    ]


def make_config(preset: str) -> ExperimentConfig:
    config = apply_overrides(ExperimentConfig(), _budget_overrides())
    return apply_preset(config, preset)


def run_toy_experiment(runs_dir: Path = RUNS_DIR) -> dict:
    started = time.perf_counter()
    returns: dict[str, list[float]] = {}
    orpo_results = []
    for preset in PRESETS:
        results = run_seeds(make_config(preset), SEEDS, runs_dir / preset, workers=WORKERS)
        returns[preset] = [r.final_report.mean_return for r in results]
        if preset == 'orpo':
            orpo_results = results
    training_seconds = time.perf_counter() - started

    # Rollout (O-MDP) vs output (P-MDP) policy distance from the dataset actions
    rollout_dist = [float(r.metrics[-1]['rollout_action_distance']) for r in orpo_results]
    output_dist = [float(r.metrics[-1]['action_distance']) for r in orpo_results]
    differences = [a - b for a, b in zip(rollout_dist, output_dist)]
    p_value = sign_test(differences)

    # Determinism: rerun seed 0 into a separate directory
    rerun = run_seeds(make_config('orpo'), [SEEDS[0]], runs_dir / 'orpo_rerun', workers=1)[0]
    first = (runs_dir / 'orpo' / f'seed_{SEEDS[0]}' / 'metrics.csv').read_bytes()
    second = (rerun.out_dir / 'metrics.csv').read_bytes()

    mopo_mean = float(np.mean(returns['mopo']))
    orpo_mean = float(np.mean(returns['orpo']))
    return {
        'experiment': 'riskworld_mopo_vs_orpo',
        'description': 'Final RiskWorld return of MOPO and ORPO, rollout vs output action distance, rerun determinism.',
        'parameters': {
            'seeds': SEEDS,
            'epochs': EPOCHS,
            'gradient_steps': GRADIENT_STEPS,
            'rollout_interval': ROLLOUT_INTERVAL,
            'eval_episodes': EVAL_EPISODES,
        },
        'returns': {
            'mopo': returns['mopo'],
            'orpo': returns['orpo'],
            'mopo_mean': mopo_mean,
            'orpo_mean': orpo_mean,
            'mopo_std': float(np.std(returns['mopo'])),
            'orpo_std': float(np.std(returns['orpo'])),
        },
        'checks': {
            'mopo_at_most_15': mopo_mean <= MOPO_MAX_RETURN,
            'orpo_at_least_25': orpo_mean >= ORPO_MIN_RETURN,
            'orpo_at_least_twice_mopo': orpo_mean >= 2.0 * mopo_mean,
            'rollout_distance_exceeds_output': p_value < 0.05,
            'metrics_bit_identical_on_rerun': first == second,
        },
        'action_distance': {
            'rollout_policy': rollout_dist,
            'output_policy': output_dist,
            'sign_test_p_value': p_value,
        },
        'training_seconds': training_seconds,
    }


def main() -> None:
    out_dir = ROOT / 'experiment_results'
    out_dir.mkdir(exist_ok=True)

    print("Running RiskWorld MOPO vs ORPO experiment...")
    print(f"Seeds: {SEEDS}; budget {EPOCHS} x {GRADIENT_STEPS} gradient steps")

    results = run_toy_experiment()

    out_json = out_dir / 'toy_results.json'
    with open(out_json, 'w', encoding='utf-8') as f:
        json.dump(results, f, indent=2, ensure_ascii=False)
    print(f"Results saved to {out_json}")

    r = results['returns']
    print("\n--- Returns ---")
    print(f"MOPO: {r['mopo_mean']:.2f} ± {r['mopo_std']:.2f}")
    print(f"ORPO: {r['orpo_mean']:.2f} ± {r['orpo_std']:.2f}")
    print(f"Sign test (rollout > output distance): p = {results['action_distance']['sign_test_p_value']:.4f}")
    print("\n--- Checks ---")
    for name, ok in results['checks'].items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    print(f"\nTraining time: {results['training_seconds'] / 60:.1f} min")


if __name__ == '__main__':
    main()
