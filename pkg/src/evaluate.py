"""Policy evaluation, distance and uncertainty metrics, and statistical checks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
from loguru import logger
from scipy.stats import binomtest, spearmanr

from src.envs import EPISODE_LENGTH, RiskWorld, SQRT2, riskworld_transition, uncertainty_grid
from src.numkit import check_finite

DISCOUNTING = ('undiscounted_sum', 'gamma')

# (random score, expert score) used for D4RL-style normalization
REFERENCE_SCORES: dict[str, tuple[float, float]] = {
    'halfcheetah': (-280.18, 12135.0),
    'hopper': (-20.27, 3234.3),
    'walker2d': (1.63, 4592.3),
}


@dataclass
class EvalReport:
    mean_return: float
    std_return: float
    episodes: int
    discounting: str = 'undiscounted_sum'
    gamma: Optional[float] = None
    normalized_score: Optional[float] = None
    eps_u: Optional[float] = None
    action_distance: Optional[float] = None
    model_return: Optional[float] = None
    returns: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_policy(
    policy: Any,
    env: Optional[RiskWorld] = None,
    episodes: int = 500,
    rng: Optional[np.random.Generator] = None,
    discounting: str = 'undiscounted_sum',
    gamma: float = 0.99,
) -> EvalReport:
    """
    Roll out the deterministic policy in the real environment.

    Returns:
        EvalReport with mean and population std of per-episode returns.
    """
    if discounting not in DISCOUNTING:
        raise ValueError(f"unknown discounting '{discounting}' (expected one of {DISCOUNTING})")
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    env = env if env is not None else RiskWorld()
    rng = rng if rng is not None else np.random.default_rng(0)
    returns = np.empty(episodes)
    for ep in range(episodes):
        s = env.reset(rng)
        total, discount, done = 0.0, 1.0, False
        while not done:
            a = policy.act(s[None, :], deterministic=True, rng=rng)[0]
            s, r, done = env.step(a)
            total += discount * r
            if discounting == 'gamma':
                discount *= gamma
        returns[ep] = total
    return EvalReport(
        mean_return=float(returns.mean()),
        std_return=float(returns.std()),
        episodes=episodes,
        discounting=discounting,
        gamma=gamma if discounting == 'gamma' else None,
        returns=returns.tolist(),
    )


def policy_trajectories(policy: Any, start_states: np.ndarray) -> np.ndarray:
    """Deterministic RiskWorld paths from each start; shape (n, EPISODE_LENGTH + 1, 2)."""
    s = np.array(start_states, dtype=np.float64)
    path = [s]
    for _ in range(EPISODE_LENGTH):
        s, _ = riskworld_transition(s, policy.act(s, deterministic=True))
        path.append(s)
    return np.stack(path, axis=1)


def normalized_score(raw: float, env_name: str) -> float:
    """100·(raw − random)/(expert − random)."""
    if env_name not in REFERENCE_SCORES:
        raise KeyError(f"no reference scores for '{env_name}' (known: {sorted(REFERENCE_SCORES)})")
    random, expert = REFERENCE_SCORES[env_name]
    return 100.0 * (raw - random) / (expert - random)


# ── Action distances ─────────────────────────────────────────────────────────

def action_distances(policy: Any, dataset: Any) -> np.ndarray:
    """‖π(s) − a‖₂ for every (s, a) in *dataset* (anything with .states and .actions)."""
    actions = policy.act(dataset.states, deterministic=True)
    return np.linalg.norm(actions - dataset.actions, axis=1)


def action_distance(policy: Any, dataset: Any) -> float:
    return float(action_distances(policy, dataset).mean())


def action_distance_histogram(
    distances: np.ndarray,
    bins: int = 30,
    max_distance: float = 2 * SQRT2,
) -> tuple[np.ndarray, np.ndarray]:
    """Counts over equal-width bins on [0, max_distance]; returns (edges, counts)."""
    counts, edges = np.histogram(distances, bins=bins, range=(0.0, max_distance))
    return edges, counts


# ── Model-based quantities ───────────────────────────────────────────────────

def _model_rollout(
    policy: Any,
    model: Any,
    start_states: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
    heuristic: str,
    use_mean_model: bool,
    reward_fn: Optional[Callable] = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    s = np.array(start_states, dtype=np.float64)
    rewards, uncertainties = [], []
    for _ in range(horizon):
        a = policy.act(s, deterministic=True, rng=rng)
        s, r, u = model.step(s, a, rng, heuristic=heuristic,
                             use_mean_model=use_mean_model, reward_fn=reward_fn)
        rewards.append(r)
        uncertainties.append(u)
    return rewards, uncertainties


def avg_model_uncertainty(
    policy: Any,
    shaper: Any,
    rollout_cfg: Any,
    start_states: np.ndarray,
    samples: int,
    rng: np.random.Generator,
    gamma: float = 0.99,
) -> float:
    """
    ε_u: γ-weighted average of u(s, a) along model rollouts of the deterministic policy.

    *samples* start states are drawn from *start_states*; rollouts run for the
    pessimistic horizon. Non-negative, and scales linearly with u.
    """
    starts = start_states[rng.integers(0, len(start_states), size=samples)]
    _, us = _model_rollout(policy, shaper.model, starts, rollout_cfg.horizon_pessimistic, rng,
                           shaper.heuristic, rollout_cfg.use_mean_model)
    weights = gamma ** np.arange(len(us))
    per_step = np.array([u.mean() for u in us])
    value = float(np.sum(weights * per_step) / weights.sum())
    check_finite("model uncertainty", value)
    return value


def evaluate_in_model(
    policy: Any,
    model: Any,
    start_states: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
    gamma: float = 1.0,
    heuristic: str = 'ensemble_std',
    use_mean_model: bool = False,
    reward_fn: Optional[Callable] = None,
) -> float:
    """Mean (optionally discounted) return of the deterministic policy inside the model."""
    rs, _ = _model_rollout(policy, model, start_states, horizon, rng, heuristic, use_mean_model, reward_fn)
    discounts = gamma ** np.arange(len(rs))
    return float(np.sum([d * r.mean() for d, r in zip(discounts, rs)]))


def uncertainty_field(
    model: Any,
    heuristic: str = 'ensemble_std',
    n: int = 61,
    num_actions: int = 16,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    u over the n×n state grid, averaged over a fixed set of uniform actions.

    Returns:
        (grid points (n², 2), u values (n²,))
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    grid = uncertainty_grid(n)
    actions = rng.uniform(-1.0, 1.0, size=(num_actions, 2))
    total = np.zeros(len(grid))
    for a in actions:
        total += model.uncertainty(grid, np.tile(a, (len(grid), 1)), heuristic)
    return grid, total / num_actions


def spearman_distance_uncertainty(grid: np.ndarray, values: np.ndarray) -> float:
    """Rank correlation between distance to the line y = −x and the uncertainty."""
    distance = np.abs(grid[:, 0] + grid[:, 1]) / SQRT2
    rho, _ = spearmanr(distance, values)
    return float(rho)


# ── Model error and the lower-bound check ────────────────────────────────────

Sampler = Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


def model_error_estimate(
    model_sampler: Sampler,
    env_sampler: Sampler,
    value_fn: Callable[[np.ndarray], np.ndarray],
    states: np.ndarray,
    actions: np.ndarray,
    samples: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Monte-Carlo G(s, a) = E_{s'~T̂}[V(s')] − E_{s'~T}[V(s')] per pair.

    Returns:
        (estimates, standard errors)
    """
    s = np.repeat(states, samples, axis=0)
    a = np.repeat(actions, samples, axis=0)
    vm = value_fn(model_sampler(s, a, rng)).reshape(len(states), samples)
    ve = value_fn(env_sampler(s, a, rng)).reshape(len(states), samples)
    ddof = 1 if samples > 1 else 0
    se = np.sqrt(vm.var(axis=1, ddof=ddof) / samples + ve.var(axis=1, ddof=ddof) / samples)
    return vm.mean(axis=1) - ve.mean(axis=1), se


def tabular_sampler(P: np.ndarray) -> Sampler:
    """Sampler over an (S, A, S) model taking integer state/action arrays."""
    cdf = np.cumsum(P, axis=-1)

    def sample(states: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        rows = cdf[np.asarray(states, dtype=int).ravel(), np.asarray(actions, dtype=int).ravel()]
        u = rng.random(len(rows))[:, None]
        return np.minimum((rows < u).sum(axis=1), P.shape[-1] - 1)

    return sample


def _discounted_mc(
    P: np.ndarray,
    R: np.ndarray,
    policy: np.ndarray,
    s0: int,
    gamma: float,
    episodes: int,
    steps: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    sample = tabular_sampler(P)
    S, A = R.shape
    states = np.full(episodes, s0)
    returns = np.zeros(episodes)
    a_cdf = np.cumsum(policy, axis=1)
    for t in range(steps):
        actions = np.minimum((a_cdf[states] < rng.random(episodes)[:, None]).sum(axis=1), A - 1)
        returns += gamma ** t * R[states, actions]
        states = sample(states, actions, rng)
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(episodes))


@dataclass
class LowerBoundResult:
    true_return: float
    penalized_model_return: float
    standard_error: float

    @property
    def holds(self) -> bool:
        return self.penalized_model_return <= self.true_return + 2.0 * self.standard_error


def tabular_lower_bound_check(
    P_true: np.ndarray,
    P_model: np.ndarray,
    R: np.ndarray,
    policies: Sequence[np.ndarray],
    gamma: float,
    rng: np.random.Generator,
    s0: int = 0,
    episodes: int = 2000,
    steps: Optional[int] = None,
) -> list[LowerBoundResult]:
    """
    Compare η_M(π) with the return in the penalized model.

    The admissible oracle u(s, a) = ½‖T̂(s, a) − T(s, a)‖₁·r_max/(1 − γ) bounds
    |G| for values in [0, r_max/(1 − γ)]; the penalty is γ·u.

    Args:
        P_true, P_model: (S, A, S) transition tables
        R: (S, A) rewards in [0, r_max]
        policies: Stochastic (S, A) action distributions
        gamma: Discount
        rng: Generator for Monte-Carlo episodes
        s0: Start state
        episodes: Monte-Carlo episodes per estimate
        steps: Truncation; defaults to where γ^t drops below 1e-6
    """
    r_max = float(R.max())
    u = 0.5 * np.abs(P_model - P_true).sum(axis=-1) * r_max / (1.0 - gamma)
    R_pess = R - gamma * u
    steps = steps if steps is not None else int(np.ceil(np.log(1e-6) / np.log(gamma)))
    results = []
    for pi in policies:
        eta_true, se_true = _discounted_mc(P_true, R, pi, s0, gamma, episodes, steps, rng)
        eta_pess, se_pess = _discounted_mc(P_model, R_pess, pi, s0, gamma, episodes, steps, rng)
        results.append(LowerBoundResult(eta_true, eta_pess, float(np.hypot(se_true, se_pess))))
    violations = sum(not r.holds for r in results)
    if violations:
        logger.warning(f"Lower bound exceeded for {violations}/{len(results)} policies")
    return results


def sign_test(differences: Sequence[float]) -> float:
    """One-sided sign test p-value that paired differences are positive (zeros dropped)."""
    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0]
    if len(d) == 0:
        return 1.0
    return float(binomtest(int((d > 0).sum()), len(d), 0.5, alternative='greater').pvalue)
