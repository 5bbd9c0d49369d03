"""
LSVI on linear MDPs: regret, bonus correctness and bonus admissibility.

1. Regret: on the needle instance (S=6, A=2, H=5, K=2000) over 50 seeds,
   average regret per episode must shrink (regret(K)/K at K=2000 below half
   of its value at K=100), and the bonus-free greedy learner must accumulate
   at least twice the median regret.
2. Posterior variance: closed forms (identity -> 1, m repeats of e1 with
   ridge beta -> 1/(m + beta)) and monotone non-increase under 100 random
   rank-one updates.
3. Admissibility: on random tabular instances, how often the regression error
   of the one-step Bellman target exceeds the bonus over 1000 resampling trials.
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

from src.envs import make_linear_mdp
from src.lsvi import admissibility_frequency, default_bonus_scale, lsvi_seed_sweep, posterior_variance
from src.storage import save_regret_csv

RANDOM_SEED = 42
N_SEEDS = 50
NEEDLE_STATES = 6
NEEDLE_ACTIONS = 2
HORIZON = 5
EPISODES = 2000
EARLY_EPISODES = 100
POSTERIOR_DIM = 8
POSTERIOR_UPDATES = 100
POSTERIOR_REPEATS = 7
RIDGE_BETA = 1.0
ADMISSIBILITY_STATES = 5
ADMISSIBILITY_ACTIONS = 2
ADMISSIBILITY_SAMPLES = 20
ADMISSIBILITY_TRIALS = 1000
# Looser than the learning default: the admissibility check needs a bonus that
# covers the sampling error of every pair at once.
ADMISSIBILITY_BONUS_CONSTANT = 0.05
EXP_DIR = ROOT / 'experiment_results'


def regret_experiment(out_dir: Path) -> dict:
    seeds = list(range(N_SEEDS))
    sweep = lsvi_seed_sweep('needle', NEEDLE_STATES, NEEDLE_ACTIONS, HORIZON, EPISODES, seeds)
    for seed, run, greedy in zip(seeds, sweep.bonus_runs, sweep.greedy_runs):
        save_regret_csv(out_dir / 'lsvi_regret' / f'lsvi_seed{seed}.csv', run.regret.instant)
        save_regret_csv(out_dir / 'lsvi_regret' / f'greedy_seed{seed}.csv', greedy.regret.instant)

    cumulative = np.array([r.regret.cumulative for r in sweep.bonus_runs])
    median_curve = np.median(cumulative, axis=0)
    early = float(median_curve[EARLY_EPISODES - 1] / EARLY_EPISODES)
    late = float(median_curve[-1] / EPISODES)
    lsvi_median = float(np.median(sweep.bonus_totals))
    greedy_median = float(np.median(sweep.greedy_totals))
    return {
        'lambda_bonus': sweep.bonus_runs[0].state.lambda_bonus,
        'regret_per_episode_at_100': early,
        'regret_per_episode_at_2000': late,
        'lsvi_median_total_regret': lsvi_median,
        'greedy_median_total_regret': greedy_median,
        'checks': {
            'regret_rate_halves': late < 0.5 * early,
            'greedy_at_least_twice_lsvi': greedy_median >= 2.0 * lsvi_median,
        },
    }


def posterior_experiment(rng: np.random.Generator) -> dict:
    d = POSTERIOR_DIM
    e1 = np.zeros(d)
    e1[0] = 1.0
    identity_value = posterior_variance(np.eye(d), e1)
    Lambda = RIDGE_BETA * np.eye(d) + POSTERIOR_REPEATS * np.outer(e1, e1)
    repeat_value = posterior_variance(Lambda, e1)
    expected_repeat = 1.0 / (POSTERIOR_REPEATS + RIDGE_BETA)

    query = rng.normal(size=d)
    Lambda = RIDGE_BETA * np.eye(d)
    trace = [posterior_variance(Lambda, query)]
    for _ in range(POSTERIOR_UPDATES):
        phi = rng.normal(size=d)
        Lambda += np.outer(phi, phi)
        trace.append(posterior_variance(Lambda, query))
    increases = int(np.sum(np.diff(trace) > 1e-12))
    return {
        'identity_case': identity_value,
        'repeat_case': repeat_value,
        'repeat_expected': expected_repeat,
        'variance_trace': trace,
        'checks': {
            'identity_exact': abs(identity_value - 1.0) <= 1e-10,
            'repeat_exact': abs(repeat_value - expected_repeat) <= 1e-10,
            'monotone_non_increasing': increases == 0,
        },
    }


def admissibility_experiment(rng: np.random.Generator) -> dict:
    mdp = make_linear_mdp('tabular', rng, ADMISSIBILITY_STATES, ADMISSIBILITY_ACTIONS, HORIZON)
    T = ADMISSIBILITY_SAMPLES * mdp.num_states * mdp.num_actions * HORIZON
    scaled = default_bonus_scale(mdp.dim, HORIZON, T, c=ADMISSIBILITY_BONUS_CONSTANT)
    learning = default_bonus_scale(mdp.dim, HORIZON, T)
    freq = admissibility_frequency(mdp, ADMISSIBILITY_SAMPLES, ADMISSIBILITY_TRIALS, scaled, rng, RIDGE_BETA)
    freq_learning = admissibility_frequency(mdp, ADMISSIBILITY_SAMPLES, ADMISSIBILITY_TRIALS,
                                            learning, rng, RIDGE_BETA)
    return {
        'lambda_bonus': scaled,
        'violation_frequency': freq,
        'learning_lambda_bonus': learning,
        'learning_violation_frequency': freq_learning,
        'checks': {'violations_at_most_5_percent': freq <= 0.05},
    }


def run_lsvi_experiment(out_dir: Path = EXP_DIR) -> dict:
    started = time.perf_counter()
    rng = np.random.default_rng(RANDOM_SEED)
    regret = regret_experiment(out_dir)
    regret_seconds = time.perf_counter() - started
    return {
        'experiment': 'lsvi_linear_mdp',
        'description': 'Regret of optimistic LSVI vs greedy, posterior variance checks, bonus admissibility.',
        'parameters': {
            'random_seed': RANDOM_SEED,
            'n_seeds': N_SEEDS,
            'needle': {'states': NEEDLE_STATES, 'actions': NEEDLE_ACTIONS, 'horizon': HORIZON,
                       'episodes': EPISODES},
            'admissibility': {'states': ADMISSIBILITY_STATES, 'actions': ADMISSIBILITY_ACTIONS,
                              'samples_per_pair': ADMISSIBILITY_SAMPLES, 'trials': ADMISSIBILITY_TRIALS,
                              'bonus_constant': ADMISSIBILITY_BONUS_CONSTANT},
        },
        'regret': regret,
        'posterior': posterior_experiment(rng),
        'admissibility': admissibility_experiment(rng),
        'regret_seconds': regret_seconds,
    }


def main() -> None:
    EXP_DIR.mkdir(exist_ok=True)
    print("Running LSVI experiments...")

    results = run_lsvi_experiment()

    out_json = EXP_DIR / 'lsvi_results.json'
    with open(out_json, 'w', encoding='utf-8') as f:
        json.dump(results, f, indent=2, ensure_ascii=False)
    print(f"Results saved to {out_json}")

    r = results['regret']
    print("\n--- Regret (needle) ---")
    print(f"λ_bonus = {r['lambda_bonus']:.3f}")
    print(f"Regret/episode: {r['regret_per_episode_at_100']:.4f} at K=100, "
          f"{r['regret_per_episode_at_2000']:.4f} at K=2000")
    print(f"Median total regret: LSVI {r['lsvi_median_total_regret']:.2f}, "
          f"greedy {r['greedy_median_total_regret']:.2f}")
    a = results['admissibility']
    print("\n--- Admissibility ---")
    print(f"λ = {a['lambda_bonus']:.3f}: violations in {a['violation_frequency']:.1%} of trials")
    print(f"λ = {a['learning_lambda_bonus']:.3f}: violations in {a['learning_violation_frequency']:.1%} of trials")
    print("\n--- Checks ---")
    for part in ('regret', 'posterior', 'admissibility'):
        for name, ok in results[part]['checks'].items():
            print(f"{name}: {'PASS' if ok else 'FAIL'}")
    print(f"\nRegret sweep time: {results['regret_seconds']:.0f}s")


if __name__ == '__main__':
    main()
