"""RiskWorld toy environment, offline-dataset collection, and synthetic
linear (tabular one-hot) MDP generators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from loguru import logger

# ── RiskWorld constants ──────────────────────────────────────────────────────

RISKWORLD_BOUND = 3.0
EPISODE_LENGTH = 10
BAND_HALF_WIDTH = 0.25
STATE_DIM = 2
ACTION_DIM = 2
ACTION_LOW = -1.0
ACTION_HIGH = 1.0
SQRT2 = np.sqrt(2.0)


# ── Transition records ───────────────────────────────────────────────────────

@dataclass
class Transition:
    """
    One (s, a, r, s', terminal) record.

    ``r_raw`` and ``u`` hold the pre-shaping reward and the model uncertainty;
    they are set only for records produced by model rollouts.
    """

    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool = False
    r_raw: Optional[float] = None
    u: Optional[float] = None


@dataclass
class TransitionBatch:
    """Column-wise batch of transitions; NaN in raw_rewards/uncertainties means absent."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    raw_rewards: np.ndarray = field(default=None)  # type: ignore[assignment]
    uncertainties: np.ndarray = field(default=None)  # type: ignore[assignment]
    sources: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n = len(self.rewards)
        self.states = np.asarray(self.states, dtype=np.float64).reshape(n, -1)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(n, -1)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(n)
        self.next_states = np.asarray(self.next_states, dtype=np.float64).reshape(n, -1)
        self.terminals = np.asarray(self.terminals, dtype=bool).reshape(n)
        if self.raw_rewards is None:
            self.raw_rewards = np.full(n, np.nan)
        if self.uncertainties is None:
            self.uncertainties = np.full(n, np.nan)
        self.raw_rewards = np.asarray(self.raw_rewards, dtype=np.float64).reshape(n)
        self.uncertainties = np.asarray(self.uncertainties, dtype=np.float64).reshape(n)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def has_model_fields(self) -> bool:
        return bool(len(self)) and bool(np.all(np.isfinite(self.uncertainties)))

    def record(self, i: int) -> Transition:
        u = self.uncertainties[i]
        return Transition(
            s=self.states[i].copy(),
            a=self.actions[i].copy(),
            r=float(self.rewards[i]),
            s_next=self.next_states[i].copy(),
            terminal=bool(self.terminals[i]),
            r_raw=None if np.isnan(u) else float(self.raw_rewards[i]),
            u=None if np.isnan(u) else float(u),
        )

    @classmethod
    def from_records(cls, records: Sequence[Transition]) -> TransitionBatch:
        return cls(
            states=np.array([t.s for t in records]),
            actions=np.array([t.a for t in records]),
            rewards=np.array([t.r for t in records]),
            next_states=np.array([t.s_next for t in records]),
            terminals=np.array([t.terminal for t in records]),
            raw_rewards=np.array([np.nan if t.r_raw is None else t.r_raw for t in records]),
            uncertainties=np.array([np.nan if t.u is None else t.u for t in records]),
        )

    @classmethod
    def concatenate(cls, batches: Sequence[TransitionBatch]) -> TransitionBatch:
        sources = None
        if all(b.sources is not None for b in batches):
            sources = np.concatenate([b.sources for b in batches])
        return cls(
            states=np.concatenate([b.states for b in batches]),
            actions=np.concatenate([b.actions for b in batches]),
            rewards=np.concatenate([b.rewards for b in batches]),
            next_states=np.concatenate([b.next_states for b in batches]),
            terminals=np.concatenate([b.terminals for b in batches]),
            raw_rewards=np.concatenate([b.raw_rewards for b in batches]),
            uncertainties=np.concatenate([b.uncertainties for b in batches]),
            sources=sources,
        )


# ── RiskWorld ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RiskWorldState:
    x: float
    y: float
    step: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.step <= EPISODE_LENGTH:
            raise ValueError(f"step index must lie in [0, {EPISODE_LENGTH}], got {self.step}")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


def riskworld_reward(next_states: np.ndarray) -> np.ndarray:
    """Signed distance to the line y = −x: positive above it, negative below."""
    next_states = np.asarray(next_states, dtype=np.float64)
    return (next_states[..., 0] + next_states[..., 1]) / SQRT2


def riskworld_reward_fn(states: np.ndarray, actions: np.ndarray, next_states: np.ndarray) -> np.ndarray:
    """Known-reward override with the (s, a, s') signature the dynamics module expects."""
    return riskworld_reward(next_states)


def riskworld_transition(states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched s' = clip(s + clip(a)) and reward at s'."""
    a = np.clip(np.asarray(actions, dtype=np.float64), ACTION_LOW, ACTION_HIGH)
    nxt = np.clip(np.asarray(states, dtype=np.float64) + a, -RISKWORLD_BOUND, RISKWORLD_BOUND)
    return nxt, riskworld_reward(nxt)


def riskworld_step(
    state: RiskWorldState,
    action: np.ndarray,
) -> tuple[RiskWorldState, float, bool]:
    """
    Advance one step.

    Returns:
        (next_state, reward, terminal); terminal is true when the step index reaches 10.
    """
    if state.step >= EPISODE_LENGTH:
        raise ValueError("episode already terminated")
    nxt, reward = riskworld_transition(state.position[None, :], np.asarray(action)[None, :])
    step = state.step + 1
    return (
        RiskWorldState(float(nxt[0, 0]), float(nxt[0, 1]), step),
        float(reward[0]),
        step == EPISODE_LENGTH,
    )


def sample_band_states(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples from the band |x + y| ≤ 0.25 inside the square."""
    out = np.empty((0, 2))
    while len(out) < n:
        m = 2 * (n - len(out)) + 8
        u = rng.uniform(-BAND_HALF_WIDTH, BAND_HALF_WIDTH, m)   # x + y
        v = rng.uniform(-2 * RISKWORLD_BOUND, 2 * RISKWORLD_BOUND, m)   # x − y
        pts = np.column_stack([(u + v) / 2, (u - v) / 2])
        inside = np.all(np.abs(pts) <= RISKWORLD_BOUND, axis=1)
        out = np.concatenate([out, pts[inside]])
    return out[:n]


class RiskWorld:
    """Episodic simulator: starts in the band, 10 steps per episode."""

    state_dim = STATE_DIM
    action_dim = ACTION_DIM
    action_low = np.full(ACTION_DIM, ACTION_LOW)
    action_high = np.full(ACTION_DIM, ACTION_HIGH)

    def __init__(self) -> None:
        self._state: Optional[RiskWorldState] = None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        x, y = sample_band_states(1, rng)[0]
        self._state = RiskWorldState(float(x), float(y), 0)
        return self._state.position

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        if self._state is None:
            raise RuntimeError("call reset() before step()")
        self._state, reward, done = riskworld_step(self._state, action)
        return self._state.position, reward, done


def collect_riskworld_dataset(n: int, rng: np.random.Generator) -> TransitionBatch:
    """
    Offline dataset by the random-start / random-action / reset protocol.

    Each transition starts uniformly in the band, applies a uniform action
    from [−1, 1]², records one step, and resets.
    """
    if n <= 0:
        raise ValueError(f"dataset size must be positive, got {n}")
    states = sample_band_states(n, rng)
    actions = rng.uniform(ACTION_LOW, ACTION_HIGH, size=(n, ACTION_DIM))
    next_states, rewards = riskworld_transition(states, actions)
    logger.info(f"Collected {n} RiskWorld transitions")
    return TransitionBatch(
        states=states,
        actions=actions,
        rewards=rewards,
        next_states=next_states,
        terminals=np.zeros(n, dtype=bool),
    )


def uncertainty_grid(n: int = 61) -> np.ndarray:
    """n×n evaluation grid over the RiskWorld square, shape (n², 2), x varying fastest."""
    if n < 2:
        raise ValueError(f"grid needs at least 2 points per axis, got {n}")
    axis = np.linspace(-RISKWORLD_BOUND, RISKWORLD_BOUND, n)
    xx, yy = np.meshgrid(axis, axis)
    return np.column_stack([xx.ravel(), yy.ravel()])


# ── Linear MDPs ──────────────────────────────────────────────────────────────

LINEAR_MDP_KINDS = ('tabular', 'needle')

NEEDLE_REWARD = 1.0
DECOY_REWARD = 0.1


@dataclass
class LinearMdpSpec:
    """
    Finite-horizon linear MDP with one-hot features φ(s, a) = e_{s·A + a}.

    P(·|s, a) = φ(s, a)ᵀ transition_weights and r(s, a) = φ(s, a)ᵀ reward_weights.
    Dynamics are time-homogeneous; episodes start in ``initial_state``.
    """

    kind: str
    num_states: int
    num_actions: int
    horizon: int
    features: np.ndarray            # (S, A, d)
    transition_weights: np.ndarray  # (d, S)
    reward_weights: np.ndarray      # (d,)
    initial_state: int = 0

    @property
    def dim(self) -> int:
        return self.features.shape[-1]

    @property
    def transitions(self) -> np.ndarray:
        """(S, A, S) transition probabilities."""
        return self.features @ self.transition_weights

    @property
    def rewards(self) -> np.ndarray:
        """(S, A) expected rewards."""
        return self.features @ self.reward_weights

    def validate(self) -> None:
        P = self.transitions
        if not np.allclose(P.sum(axis=-1), 1.0, atol=1e-12) or np.any(P < 0):
            raise ValueError("transition rows must be probability vectors")
        R = self.rewards
        if np.any(R < 0) or np.any(R > 1):
            raise ValueError("rewards must lie in [0, 1]")
        if np.any(np.linalg.norm(self.features, axis=-1) > 1 + 1e-12):
            raise ValueError("feature norms must not exceed 1")


def one_hot_features(num_states: int, num_actions: int) -> np.ndarray:
    d = num_states * num_actions
    return np.eye(d).reshape(num_states, num_actions, d)


def _needle_dynamics(S: int, A: int, H: int, chain_actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Deterministic needle: a zero-reward chain 0 → 1 → … → L−1 → needle (L = H − 2)
    where chain state s advances under ``chain_actions[s]``. The other action pays
    the decoy reward once and drops into an absorbing zero-reward sink. The needle
    pays 1 per step and is absorbing, so reaching it at step H − 2 earns two
    needle rewards. States past the sink are unreachable zero-reward self-loops.
    """
    L = H - 2
    if A != 2 or L < 1 or S < L + 2:
        raise ValueError(f"needle instance needs A=2, H≥3, S≥H; got S={S}, A={A}, H={H}")
    needle, sink = L, L + 1
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for s in range(S):
        if s < L:
            advance = int(chain_actions[s])
            P[s, advance, s + 1] = 1.0
            P[s, 1 - advance, sink] = 1.0
            R[s, 1 - advance] = DECOY_REWARD
        else:
            P[s, :, s] = 1.0
            if s == needle:
                R[s, :] = NEEDLE_REWARD
    return P, R


def make_linear_mdp(
    kind: str,
    rng: np.random.Generator,
    num_states: int,
    num_actions: int,
    horizon: int,
    rewards: Optional[Sequence[float] | np.ndarray] = None,
    dirichlet_alpha: float = 1.0,
    slip: float = 0.0,
) -> LinearMdpSpec:
    """
    Build a tabular linear MDP with one-hot features (d = S·A).

    Args:
        kind: 'tabular' (Dirichlet rows, uniform rewards) or 'needle'
            (a high-reward state behind a zero-reward chain with a decoy exit at each step)
        rng: Random generator for rows and rewards, or for the needle's chain actions
        num_states, num_actions, horizon: Sizes
        rewards: Optional per-action list (broadcast over states) or (S, A) table
        dirichlet_alpha: Concentration of sampled transition rows
        slip: For 'needle', the mass mixed into each deterministic row from a
            Dirichlet draw; 0 keeps the instance deterministic

    Returns:
        A validated LinearMdpSpec.
    """
    if kind not in LINEAR_MDP_KINDS:
        raise ValueError(f"unknown linear MDP kind '{kind}' (expected one of {LINEAR_MDP_KINDS})")
    S, A, H = int(num_states), int(num_actions), int(horizon)
    if S < 1 or A < 1 or H < 1:
        raise ValueError(f"invalid sizes S={S}, A={A}, H={H}")

    if kind == 'tabular':
        P = rng.dirichlet(np.full(S, dirichlet_alpha), size=(S, A))
        R = rng.uniform(0.0, 1.0, size=(S, A))
    else:
        chain_actions = rng.integers(0, 2, size=max(H - 2, 0))
        P, R = _needle_dynamics(S, A, H, chain_actions)
        if slip:
            noise = rng.dirichlet(np.full(S, dirichlet_alpha), size=(S, A))
            P = (1.0 - slip) * P + slip * noise

    if rewards is not None:
        table = np.asarray(rewards, dtype=np.float64)
        R = np.broadcast_to(table, (S, A)).copy() if table.ndim == 1 else table.reshape(S, A)

    # renormalize against rounding drift in the Dirichlet draws
    P = P / P.sum(axis=-1, keepdims=True)
    spec = LinearMdpSpec(
        kind=kind,
        num_states=S,
        num_actions=A,
        horizon=H,
        features=one_hot_features(S, A),
        transition_weights=P.reshape(S * A, S),
        reward_weights=R.reshape(S * A),
    )
    spec.validate()
    return spec


class LinearMdpSimulator:
    """reset/step interface over a LinearMdpSpec; rewards are deterministic."""

    def __init__(self, spec: LinearMdpSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self._P = spec.transitions
        self._R = spec.rewards
        self.state = spec.initial_state
        self.h = 0

    def reset(self) -> int:
        self.state = self.spec.initial_state
        self.h = 0
        return self.state

    def step(self, action: int) -> tuple[int, float, bool]:
        if self.h >= self.spec.horizon:
            raise RuntimeError("episode already terminated")
        s = self.state
        reward = float(self._R[s, action])
        self.state = int(self.rng.choice(self.spec.num_states, p=self._P[s, action]))
        self.h += 1
        return self.state, reward, self.h == self.spec.horizon


def estimate_tabular_model(
    spec: LinearMdpSpec,
    samples_per_pair: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Empirical (S, A, S) transition model from *samples_per_pair* draws of every (s, a)."""
    if samples_per_pair < 1:
        raise ValueError("need at least one sample per state-action pair")
    P = spec.transitions
    S, A = spec.num_states, spec.num_actions
    counts = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            counts[s, a] = rng.multinomial(samples_per_pair, P[s, a])
    return counts / samples_per_pair
