"""Uncertainty-based reward shaping and branched model rollouts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from loguru import logger

from src.datasets import BufferSet
from src.dynamics import HEURISTICS, RewardFn
from src.envs import TransitionBatch

SHAPING_MODES = ('pessimistic', 'optimistic')


@dataclass
class RewardShaper:
    """
    r^p = r − λp·u and r^o = r + λo·u.

    ``model`` is the dynamics model whose uncertainty feeds u; any object with
    ``step`` and ``out_of_box`` in the EnsembleDynamics style will do.
    """

    lambda_p: float
    lambda_o: float
    heuristic: str = 'ensemble_std'
    model: Any = None

    def __post_init__(self) -> None:
        if self.lambda_p < 0:
            raise ValueError(f"lambda_p must be non-negative, got {self.lambda_p}")
        if self.heuristic not in HEURISTICS:
            raise ValueError(f"unknown uncertainty heuristic '{self.heuristic}'")

    def shape(self, rewards: np.ndarray, u: np.ndarray, mode: str) -> np.ndarray:
        rewards = np.asarray(rewards, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        if np.any(u < 0):
            raise ValueError("uncertainty must be non-negative")
        if mode == 'pessimistic':
            return rewards - self.lambda_p * u
        if mode == 'optimistic':
            return rewards + self.lambda_o * u
        raise ValueError(f"unknown shaping mode '{mode}' (expected one of {SHAPING_MODES})")


def shape_reward(rewards: np.ndarray, u: np.ndarray, mode: str, shaper: RewardShaper) -> np.ndarray:
    return shaper.shape(rewards, u, mode)


@dataclass
class RolloutConfig:
    horizon_optimistic: int = 5
    horizon_pessimistic: int = 5
    batch_size: int = 1000
    truncation_box: float = 10.0
    use_mean_model: bool = False
    deterministic_policy: bool = False

    def validate(self) -> None:
        if self.horizon_optimistic < 1 or self.horizon_pessimistic < 1:
            raise ValueError("rollout horizons must be at least 1")
        if self.batch_size < 1:
            raise ValueError(f"rollout batch size must be positive, got {self.batch_size}")
        if self.truncation_box <= 0:
            raise ValueError("truncation box must be positive")


@dataclass
class RolloutStats:
    mode: str
    appended: dict[str, int] = field(default_factory=dict)
    truncated_fraction: float = 0.0
    mean_uncertainty: float = 0.0
    mean_raw_reward: float = 0.0


def generate_rollouts(
    policy: Any,
    shaper: RewardShaper,
    config: RolloutConfig,
    buffers: BufferSet,
    rng: np.random.Generator,
    mode: str = 'optimistic',
    reward_fn: Optional[RewardFn] = None,
    relabel_shaper: Optional[RewardShaper] = None,
) -> RolloutStats:
    """
    Branch config.batch_size rollouts from D_env start states into the model.

    Optimistic mode runs h^o steps and writes each transition twice: with r^o to
    'opt_raw' and with r^p to 'opt_relabel', where r^p comes from *relabel_shaper*
    when given (a different λp for the relabeled copy). Pessimistic mode runs h^p steps and
    writes r^p to 'pess'. Every record carries r_raw and u. A rollout whose next
    state leaves the normalized truncation box is dropped from that step on.
    """
    if mode not in SHAPING_MODES:
        raise ValueError(f"unknown rollout mode '{mode}'")
    if len(buffers.env) == 0:
        raise ValueError("cannot branch rollouts from an empty environment buffer")
    model = shaper.model
    horizon = config.horizon_optimistic if mode == 'optimistic' else config.horizon_pessimistic
    b = config.batch_size

    states = buffers.env.sample(b, rng).states
    alive = np.ones(b, dtype=bool)
    stats = RolloutStats(mode, {tag: 0 for tag in ('opt_raw', 'opt_relabel', 'pess')})
    u_sum, r_sum, n_rec = 0.0, 0.0, 0

    for _ in range(horizon):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        s = states[idx]
        a = policy.act(s, deterministic=config.deterministic_policy, rng=rng)
        s_next, r, u = model.step(s, a, rng, heuristic=shaper.heuristic,
                                  use_mean_model=config.use_mean_model, reward_fn=reward_fn)
        out = model.out_of_box(s_next, config.truncation_box)
        keep = ~out
        if np.any(keep):
            common = dict(
                states=s[keep], actions=a[keep], next_states=s_next[keep],
                terminals=np.zeros(int(keep.sum()), dtype=bool),
                raw_rewards=r[keep], uncertainties=u[keep],
            )
            r_p = shaper.shape(r[keep], u[keep], 'pessimistic')
            if mode == 'optimistic':
                r_o = shaper.shape(r[keep], u[keep], 'optimistic')
                stats.appended['opt_raw'] += buffers.opt_raw.add_batch(TransitionBatch(rewards=r_o, **common))
                r_rel = r_p if relabel_shaper is None else relabel_shaper.shape(r[keep], u[keep], 'pessimistic')
                stats.appended['opt_relabel'] += buffers.opt_relabel.add_batch(TransitionBatch(rewards=r_rel, **common))
            else:
                stats.appended['pess'] += buffers.pess.add_batch(TransitionBatch(rewards=r_p, **common))
            u_sum += float(u[keep].sum())
            r_sum += float(r[keep].sum())
            n_rec += int(keep.sum())
        states[idx] = s_next
        alive[idx[out]] = False

    stats.truncated_fraction = float(1.0 - alive.mean())
    if n_rec:
        stats.mean_uncertainty = u_sum / n_rec
        stats.mean_raw_reward = r_sum / n_rec
    if stats.truncated_fraction > 0.5:
        logger.warning(f"{stats.truncated_fraction:.0%} of {mode} rollouts left the truncation box")
    logger.debug(f"{mode} rollouts: {stats.appended}, mean u {stats.mean_uncertainty:.4f}")
    return stats
