"""SAC and TD3+BC learners plus scripted baseline policies."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Optional, Protocol

import numpy as np

from src.envs import TransitionBatch
from src.numkit import (
    AdamState,
    MlpNetwork,
    RegressionBatch,
    check_finite,
    mlp_train_step,
    polyak_update,
    soft_clamp,
    soft_clamp_grad,
    squared_error_loss,
)
from src.storage import SchemaError, checkpoint_kind, load_networks, save_networks

LOG_PROB_EPS = 1e-6
HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


class Policy(Protocol):
    def act(self, states: np.ndarray, deterministic: bool = True,
            rng: Optional[np.random.Generator] = None) -> np.ndarray: ...


@dataclass
class SacConfig:
    hidden_sizes: tuple[int, ...] = (64, 64)
    gamma: float = 0.99
    tau: float = 5e-3
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_alpha: float = 1.0
    target_entropy: Optional[float] = None
    batch_size: int = 256


@dataclass
class Td3BcConfig:
    hidden_sizes: tuple[int, ...] = (64, 64)
    gamma: float = 0.99
    tau: float = 5e-3
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_delay: int = 2
    alpha_bc: float = 2.5
    bc_weight: float = 1.0
    exploration_noise: float = 0.1
    batch_size: int = 256


class _ActionSpace:
    """Shared box bounds and state normalization for the learners."""

    def _init_space(
        self,
        state_dim: int,
        action_dim: int,
        action_low: np.ndarray | float,
        action_high: np.ndarray | float,
        state_mean: Optional[np.ndarray],
        state_std: Optional[np.ndarray],
    ) -> None:
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.action_low = np.broadcast_to(np.asarray(action_low, dtype=np.float64), (action_dim,)).copy()
        self.action_high = np.broadcast_to(np.asarray(action_high, dtype=np.float64), (action_dim,)).copy()
        self.action_scale = 0.5 * (self.action_high - self.action_low)
        self.action_offset = 0.5 * (self.action_high + self.action_low)
        self.state_mean = np.zeros(state_dim) if state_mean is None else np.asarray(state_mean, dtype=np.float64)
        self.state_std = np.ones(state_dim) if state_std is None else np.asarray(state_std, dtype=np.float64)

    def normalize_states(self, states: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(np.asarray(states, dtype=np.float64)) - self.state_mean) / self.state_std

    def _space_header(self) -> dict:
        return {
            'state_dim': self.state_dim,
            'action_dim': self.action_dim,
            'action_low': self.action_low.tolist(),
            'action_high': self.action_high.tolist(),
            'state_mean': self.state_mean.tolist(),
            'state_std': self.state_std.tolist(),
        }


def _critic_pair(sizes: list[int], rng: np.random.Generator) -> tuple[MlpNetwork, MlpNetwork]:
    return MlpNetwork(sizes, rng), MlpNetwork(sizes, rng)


def _critic_batch(s_norm: np.ndarray, actions: np.ndarray, targets: np.ndarray) -> RegressionBatch:
    return RegressionBatch(np.column_stack([s_norm, actions]), targets[:, None])


# ── SAC ──────────────────────────────────────────────────────────────────────

class SacPolicy(_ActionSpace):
    """Tanh-squashed Gaussian actor, twin critics with Polyak targets, learned temperature."""

    kind = 'sac'

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        config: SacConfig,
        rng: np.random.Generator,
        action_low: np.ndarray | float = -1.0,
        action_high: np.ndarray | float = 1.0,
        state_mean: Optional[np.ndarray] = None,
        state_std: Optional[np.ndarray] = None,
    ):
        self._init_space(state_dim, action_dim, action_low, action_high, state_mean, state_std)
        self.config = config
        self.rng = rng
        h = list(config.hidden_sizes)
        self.actor = MlpNetwork([state_dim, *h, 2 * action_dim], rng, final_scale=1e-2)
        self.q1, self.q2 = _critic_pair([state_dim + action_dim, *h, 1], rng)
        self.q1_target, self.q2_target = self.q1.copy(), self.q2.copy()
        self.log_alpha = np.array([np.log(config.init_alpha)])
        self.target_entropy = (-float(action_dim) if config.target_entropy is None
                               else float(config.target_entropy))
        self.actor_opt = AdamState.for_params(self.actor.parameters(), lr=config.actor_lr)
        self.q1_opt = AdamState.for_params(self.q1.parameters(), lr=config.critic_lr)
        self.q2_opt = AdamState.for_params(self.q2.parameters(), lr=config.critic_lr)
        self.alpha_opt = AdamState.for_params([self.log_alpha], lr=config.alpha_lr)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def squash(self, outputs: np.ndarray, noise: Optional[np.ndarray]) -> dict[str, np.ndarray]:
        """
        Reparameterized action and log-probability from raw actor outputs.

        With noise=None the pre-squash mean is used and log_prob is still
        computed at ε = 0.
        """
        ad = self.action_dim
        mean, raw = outputs[:, :ad], outputs[:, ad:]
        log_std = soft_clamp(raw)
        std = np.exp(log_std)
        eps = np.zeros_like(mean) if noise is None else noise
        u = mean + std * eps
        t = np.tanh(u)
        one_minus = 1.0 - t ** 2
        log_prob = np.sum(
            -0.5 * eps ** 2 - log_std - HALF_LOG_2PI
            - np.log(one_minus + LOG_PROB_EPS) - np.log(self.action_scale),
            axis=1,
        )
        return {
            'action': self.action_offset + self.action_scale * t,
            'log_prob': log_prob,
            'tanh': t,
            'std': std,
            'eps': eps,
            'raw_log_std': raw,
        }

    def act(self, states: np.ndarray, deterministic: bool = False,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
        out = self.actor(self.normalize_states(states))
        noise = None
        if not deterministic:
            noise = (rng if rng is not None else self.rng).standard_normal((len(out), self.action_dim))
        return self.squash(out, noise)['action']

    def update(self, batch: TransitionBatch) -> dict[str, float]:
        return sac_update(self, batch)


def sac_critic_targets(policy: SacPolicy, batch: TransitionBatch, noise: np.ndarray) -> np.ndarray:
    """y = r + γ(1 − d)(min_j Q̄_j(s', ã') − α log π(ã'|s')), from target critics only."""
    s2 = policy.normalize_states(batch.next_states)
    nxt = policy.squash(policy.actor(s2), noise)
    crit_in = np.column_stack([s2, nxt['action']])
    q_next = np.minimum(policy.q1_target(crit_in), policy.q2_target(crit_in))[:, 0]
    soft = q_next - policy.alpha * nxt['log_prob']
    return batch.rewards + policy.config.gamma * (1.0 - batch.terminals) * soft


class SacActorLoss:
    """
    mean(α log π(a|s) − min_j Q_j(s, a)) with a = squash(μ + σε) for fixed ε.

    ``batch.inputs`` are normalized states. The critic input gradient supplies
    dQ/da; the result is backpropagated through the tanh squash by hand.
    """

    def __init__(self, policy: SacPolicy, noise: np.ndarray, alpha: float):
        self.policy = policy
        self.noise = noise
        self.alpha = alpha
        self.log_prob: Optional[np.ndarray] = None

    def __call__(self, outputs: np.ndarray, batch: RegressionBatch) -> tuple[float, np.ndarray]:
        p = self.policy
        B, ad, sd = len(outputs), p.action_dim, p.state_dim
        sq = p.squash(outputs, self.noise)
        t, std, eps = sq['tanh'], sq['std'], sq['eps']
        crit_in = np.column_stack([batch.inputs, sq['action']])
        q1, c1 = p.q1.forward(crit_in)
        q2, c2 = p.q2.forward(crit_in)
        use1 = (q1[:, 0] <= q2[:, 0])[:, None]
        q = np.minimum(q1, q2)[:, 0]
        loss = float(np.mean(self.alpha * sq['log_prob'] - q))

        g = np.full((B, 1), -1.0 / B)
        _, gin1 = p.q1.backward(c1, g * use1)
        _, gin2 = p.q2.backward(c2, g * ~use1)
        dl_da = gin1[:, sd:] + gin2[:, sd:]

        one_minus = 1.0 - t ** 2
        jac = 2.0 * t * one_minus / (one_minus + LOG_PROB_EPS)
        dl_du = (self.alpha / B) * jac + dl_da * p.action_scale * one_minus
        grad = np.empty_like(outputs)
        grad[:, :ad] = dl_du
        grad[:, ad:] = (-(self.alpha / B) + dl_du * std * eps) * soft_clamp_grad(sq['raw_log_std'])
        self.log_prob = sq['log_prob']
        return loss, grad


def sac_update(policy: SacPolicy, batch: TransitionBatch) -> dict[str, float]:
    """One gradient step on both critics, the actor and the temperature, then Polyak targets."""
    cfg = policy.config
    rng = policy.rng
    B, ad = len(batch), policy.action_dim
    s = policy.normalize_states(batch.states)

    y = sac_critic_targets(policy, batch, rng.standard_normal((B, ad)))
    check_finite("SAC critic targets", y)
    crit = _critic_batch(s, batch.actions, y)
    c1 = mlp_train_step(policy.q1, policy.q1_opt, squared_error_loss, crit, "SAC critic 1")
    c2 = mlp_train_step(policy.q2, policy.q2_opt, squared_error_loss, crit, "SAC critic 2")

    alpha = policy.alpha
    actor_loss = SacActorLoss(policy, rng.standard_normal((B, ad)), alpha)
    a_loss = mlp_train_step(policy.actor, policy.actor_opt, actor_loss,
                            RegressionBatch(s, None), "SAC actor")
    log_prob = actor_loss.log_prob

    gap = float(np.mean(log_prob + policy.target_entropy))
    alpha_loss = -float(policy.log_alpha[0]) * gap
    policy.alpha_opt.apply([policy.log_alpha], [np.array([-gap])])

    polyak_update(policy.q1_target, policy.q1, cfg.tau)
    polyak_update(policy.q2_target, policy.q2, cfg.tau)
    policy.updates += 1
    return {
        'critic1_loss': c1,
        'critic2_loss': c2,
        'actor_loss': a_loss,
        'alpha_loss': alpha_loss,
        'alpha': policy.alpha,
        'entropy': float(-np.mean(log_prob)),
    }


# ── TD3+BC ───────────────────────────────────────────────────────────────────

class Td3BcPolicy(_ActionSpace):
    """Deterministic tanh actor with twin critics, delayed updates and a BC term."""

    kind = 'td3bc'

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        config: Td3BcConfig,
        rng: np.random.Generator,
        action_low: np.ndarray | float = -1.0,
        action_high: np.ndarray | float = 1.0,
        state_mean: Optional[np.ndarray] = None,
        state_std: Optional[np.ndarray] = None,
    ):
        self._init_space(state_dim, action_dim, action_low, action_high, state_mean, state_std)
        self.config = config
        self.rng = rng
        h = list(config.hidden_sizes)
        self.actor = MlpNetwork([state_dim, *h, action_dim], rng, final_scale=1e-2)
        self.actor_target = self.actor.copy()
        self.q1, self.q2 = _critic_pair([state_dim + action_dim, *h, 1], rng)
        self.q1_target, self.q2_target = self.q1.copy(), self.q2.copy()
        self.actor_opt = AdamState.for_params(self.actor.parameters(), lr=config.actor_lr)
        self.q1_opt = AdamState.for_params(self.q1.parameters(), lr=config.critic_lr)
        self.q2_opt = AdamState.for_params(self.q2.parameters(), lr=config.critic_lr)
        self.total_it = 0

    def _squash(self, z: np.ndarray) -> np.ndarray:
        return self.action_offset + self.action_scale * np.tanh(z)

    def act(self, states: np.ndarray, deterministic: bool = True,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
        a = self._squash(self.actor(self.normalize_states(states)))
        if deterministic:
            return a
        rng = rng if rng is not None else self.rng
        a = a + rng.normal(0.0, self.config.exploration_noise, a.shape) * self.action_scale
        return np.clip(a, self.action_low, self.action_high)

    def update(self, batch: TransitionBatch) -> dict[str, float]:
        return td3bc_update(self, batch)


def td3bc_critic_targets(policy: Td3BcPolicy, batch: TransitionBatch, noise: np.ndarray) -> np.ndarray:
    """y = r + γ(1 − d) min_j Q̄_j(s', clip(π̄(s') + clip(noise)))."""
    cfg = policy.config
    s2 = policy.normalize_states(batch.next_states)
    smoothing = np.clip(noise * cfg.policy_noise, -cfg.noise_clip, cfg.noise_clip) * policy.action_scale
    a2 = np.clip(policy._squash(policy.actor_target(s2)) + smoothing, policy.action_low, policy.action_high)
    crit_in = np.column_stack([s2, a2])
    q_next = np.minimum(policy.q1_target(crit_in), policy.q2_target(crit_in))[:, 0]
    return batch.rewards + cfg.gamma * (1.0 - batch.terminals) * q_next


@dataclass
class ActorBatch:
    inputs: np.ndarray   # normalized states
    actions: np.ndarray  # dataset actions for the BC term


class Td3BcActorLoss:
    """
    −λ·mean Q₁(s, π(s)) + w·mean ‖π(s) − a‖², λ = α_bc / mean|Q₁| held constant.

    Passing ``lam`` pins λ instead of recomputing it from the batch.
    """

    def __init__(self, policy: Td3BcPolicy, lam: Optional[float] = None):
        self.policy = policy
        self.fixed_lam = lam
        self.lam = 0.0
        self.q_term = 0.0
        self.bc_term = 0.0

    def __call__(self, outputs: np.ndarray, batch: ActorBatch) -> tuple[float, np.ndarray]:
        p = self.policy
        cfg = p.config
        B, sd = len(outputs), p.state_dim
        t = np.tanh(outputs)
        pi = p.action_offset + p.action_scale * t
        q, cache = p.q1.forward(np.column_stack([batch.inputs, pi]))
        self.lam = (self.fixed_lam if self.fixed_lam is not None
                    else cfg.alpha_bc / max(float(np.mean(np.abs(q))), 1e-8))
        diff = pi - batch.actions
        self.q_term = -self.lam * float(np.mean(q))
        self.bc_term = cfg.bc_weight * float(np.mean(np.sum(diff ** 2, axis=1)))
        _, gin = p.q1.backward(cache, np.full((B, 1), -self.lam / B))
        d_pi = gin[:, sd:] + cfg.bc_weight * 2.0 * diff / B
        return self.q_term + self.bc_term, d_pi * p.action_scale * (1.0 - t ** 2)


def td3bc_update(policy: Td3BcPolicy, batch: TransitionBatch) -> dict[str, float]:
    """
    Critic step every call; actor step and Polyak updates of all three targets
    when total_it is a multiple of the policy delay.
    """
    cfg = policy.config
    policy.total_it += 1
    s = policy.normalize_states(batch.states)
    y = td3bc_critic_targets(policy, batch, policy.rng.standard_normal(batch.actions.shape))
    check_finite("TD3+BC critic targets", y)
    crit = _critic_batch(s, batch.actions, y)
    losses: dict[str, Any] = {
        'critic1_loss': mlp_train_step(policy.q1, policy.q1_opt, squared_error_loss, crit, "TD3+BC critic 1"),
        'critic2_loss': mlp_train_step(policy.q2, policy.q2_opt, squared_error_loss, crit, "TD3+BC critic 2"),
        'actor_updated': False,
    }
    if policy.total_it % cfg.policy_delay == 0:
        actor_loss = Td3BcActorLoss(policy)
        losses['actor_loss'] = mlp_train_step(policy.actor, policy.actor_opt, actor_loss,
                                              ActorBatch(s, batch.actions), "TD3+BC actor")
        losses['actor_q_term'] = actor_loss.q_term
        losses['actor_bc_term'] = actor_loss.bc_term
        losses['lambda_bc'] = actor_loss.lam
        losses['actor_updated'] = True
        polyak_update(policy.actor_target, policy.actor, cfg.tau)
        polyak_update(policy.q1_target, policy.q1, cfg.tau)
        polyak_update(policy.q2_target, policy.q2, cfg.tau)
    return losses


# ── Scripted policies ────────────────────────────────────────────────────────

class RandomPolicy:
    """Uniform actions over the box."""

    kind = 'random'

    def __init__(self, action_low: np.ndarray, action_high: np.ndarray,
                 rng: Optional[np.random.Generator] = None):
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def act(self, states: np.ndarray, deterministic: bool = True,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
        n = len(np.atleast_2d(states))
        return (rng or self.rng).uniform(self.action_low, self.action_high,
                                          size=(n, len(self.action_low)))


class ConstantPolicy:
    kind = 'constant'

    def __init__(self, action: np.ndarray):
        self.action = np.asarray(action, dtype=np.float64)

    def act(self, states: np.ndarray, deterministic: bool = True,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return np.tile(self.action, (len(np.atleast_2d(states)), 1))


# ── Checkpoints ──────────────────────────────────────────────────────────────

def save_policy(policy: SacPolicy | Td3BcPolicy, path: Path) -> None:
    extra = {'config': asdict(policy.config), **policy._space_header()}
    nets = {'actor': policy.actor, 'q1': policy.q1, 'q2': policy.q2,
            'q1_target': policy.q1_target, 'q2_target': policy.q2_target}
    if isinstance(policy, SacPolicy):
        extra['log_alpha'] = float(policy.log_alpha[0])
    else:
        nets['actor_target'] = policy.actor_target
    save_networks(path, policy.kind, nets, extra)


def load_policy(path: Path) -> SacPolicy | Td3BcPolicy:
    """Restore a learner for acting and evaluation; optimizer state starts fresh."""
    kind = checkpoint_kind(path)
    if kind not in ('sac', 'td3bc'):
        raise SchemaError(f"{path}: not a policy checkpoint (kind '{kind}')")
    nets, extra = load_networks(path, kind=kind)
    try:
        cfg_dict = dict(extra['config'])
        cfg_dict['hidden_sizes'] = tuple(cfg_dict['hidden_sizes'])
        cls, cfg_cls = (SacPolicy, SacConfig) if kind == 'sac' else (Td3BcPolicy, Td3BcConfig)
        policy = cls(
            extra['state_dim'], extra['action_dim'], cfg_cls(**cfg_dict), np.random.default_rng(0),
            np.array(extra['action_low']), np.array(extra['action_high']),
            np.array(extra['state_mean']), np.array(extra['state_std']),
        )
        for name, net in nets.items():
            getattr(policy, name).load_from(net)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed policy checkpoint ({exc})") from exc
    if kind == 'sac':
        policy.log_alpha[0] = extra['log_alpha']
    return policy
