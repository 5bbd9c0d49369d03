"""
Lower-bound check on tabular MDPs.

Fits an empirical transition model from a few samples per pair, penalizes
rewards with the admissible oracle uncertainty, and estimates the discounted
return of 20 random stochastic policies in both the penalized model and the
true MDP. The penalized return should never exceed the true one by more than
two combined standard errors.
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

from src.envs import estimate_tabular_model, make_linear_mdp
from src.evaluate import tabular_lower_bound_check

RANDOM_SEED = 42
N_INSTANCES = 3
NUM_STATES = 6
NUM_ACTIONS = 3
SAMPLES_PER_PAIR = 10
N_POLICIES = 20
GAMMA = 0.9
EPISODES = 2000
EXP_DIR = ROOT / 'experiment_results'


def run_lower_bound_experiment() -> dict:
    rng = np.random.default_rng(RANDOM_SEED)
    instances = []
    for i in range(N_INSTANCES):
        # the check is discounted, so the horizon is unused
        mdp = make_linear_mdp('tabular', rng, NUM_STATES, NUM_ACTIONS, horizon=1)
        P_model = estimate_tabular_model(mdp, SAMPLES_PER_PAIR, rng)
        policies = [rng.dirichlet(np.ones(NUM_ACTIONS), size=NUM_STATES) for _ in range(N_POLICIES)]
        results = tabular_lower_bound_check(mdp.transitions, P_model, mdp.rewards, policies,
                                            GAMMA, rng, episodes=EPISODES)
        instances.append({
            'instance': i,
            'model_l1_error_mean': float(0.5 * np.abs(P_model - mdp.transitions).sum(axis=-1).mean()),
            'per_policy': [
                {
                    'true_return': r.true_return,
                    'penalized_model_return': r.penalized_model_return,
                    'standard_error': r.standard_error,
                    'holds': r.holds,
                }
                for r in results
            ],
            'violations': sum(not r.holds for r in results),
        })
    return {
        'experiment': 'tabular_lower_bound',
        'description': 'Penalized model return vs true return for random policies under oracle-admissible uncertainty.',
        'parameters': {
            'random_seed': RANDOM_SEED,
            'instances': N_INSTANCES,
            'states': NUM_STATES,
            'actions': NUM_ACTIONS,
            'samples_per_pair': SAMPLES_PER_PAIR,
            'policies': N_POLICIES,
            'gamma': GAMMA,
            'episodes': EPISODES,
        },
        'instances': instances,
        'checks': {'bound_holds_for_all_policies': all(inst['violations'] == 0 for inst in instances)},
    }


def main() -> None:
    EXP_DIR.mkdir(exist_ok=True)
    print("Running tabular lower-bound experiment...")

    results = run_lower_bound_experiment()

    out_json = EXP_DIR / 'lower_bound_results.json'
    with open(out_json, 'w', encoding='utf-8') as f:
        json.dump(results, f, indent=2, ensure_ascii=False)
    print(f"Results saved to {out_json}")

    for inst in results['instances']:
        gaps = [p['true_return'] - p['penalized_model_return'] for p in inst['per_policy']]
        print(f"Instance {inst['instance']}: min gap {min(gaps):.3f}, "
              f"violations {inst['violations']}/{len(gaps)}")
    for name, ok in results['checks'].items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")


if __name__ == '__main__':
    main()
