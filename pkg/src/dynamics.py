"""Probabilistic ensemble dynamics model and its uncertainty heuristics."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from loguru import logger

from src.envs import TransitionBatch
from src.numkit import (
    AdamState,
    MlpNetwork,
    RegressionBatch,
    RngStreams,
    gaussian_nll_loss,
    mlp_train_step,
    soft_clamp,
)
from src.storage import SchemaError, load_networks, save_networks

HEURISTICS = ('max_aleatoric', 'ensemble_var', 'ensemble_std')
RewardFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class DynamicsConfig:
    ensemble_size: int = 7
    hidden_sizes: tuple[int, ...] = (128, 128)
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 5
    holdout_fraction: float = 0.1
    min_dataset: int = 100
    normalizer_floor: float = 1e-6
    workers: int = 1

    def validate(self) -> None:
        if self.ensemble_size < 2:
            raise ValueError(f"ensemble needs at least 2 members, got {self.ensemble_size}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError(f"holdout fraction must lie in (0, 1), got {self.holdout_fraction}")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be positive")


# ── Normalization ────────────────────────────────────────────────────────────

@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray, floor: float = 1e-6) -> Normalizer:
        return cls(data.mean(axis=0), np.maximum(data.std(axis=0), floor))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


@dataclass
class GaussianPrediction:
    """Per-member Gaussian over the normalized target [Δs, r]; arrays are (N, B, D)."""

    means: np.ndarray
    stds: np.ndarray
    target_normalizer: Normalizer

    @property
    def ensemble_mean(self) -> np.ndarray:
        return self.means.mean(axis=0)

    def raw_means(self) -> np.ndarray:
        return self.target_normalizer.denormalize(self.means)

    def raw_stds(self) -> np.ndarray:
        return self.stds * self.target_normalizer.std


def uncertainty_from_prediction(pred: GaussianPrediction, heuristic: str) -> np.ndarray:
    """
    Per-row uncertainty u ≥ 0 in normalized target space.

    max_aleatoric: max over members of ‖Σ_i‖_F = ‖σ_i²‖₂ for the diagonal covariance Σ_i.
    ensemble_var: total variance of the equal-weight mixture, mean_i(μᵢᵀμᵢ + σᵢᵀσᵢ) − m̄ᵀm̄.
    ensemble_std: its square root.
    """
    if heuristic == 'max_aleatoric':
        return np.linalg.norm(pred.stds ** 2, axis=-1).max(axis=0)
    if heuristic not in HEURISTICS:
        raise ValueError(f"unknown uncertainty heuristic '{heuristic}' (expected one of {HEURISTICS})")
    second = np.mean(np.sum(pred.means ** 2 + pred.stds ** 2, axis=-1), axis=0)
    m = pred.ensemble_mean
    var = np.maximum(second - np.sum(m ** 2, axis=-1), 0.0)
    return var if heuristic == 'ensemble_var' else np.sqrt(var)


# ── Ensemble ─────────────────────────────────────────────────────────────────

class EnsembleDynamics:
    """
    N Gaussian MLPs over normalized (s, a) → normalized [Δs, r].

    Each member outputs [mean | raw log-std]; the log-std is soft-clamped.
    """

    def __init__(
        self,
        members: list[MlpNetwork],
        input_normalizer: Normalizer,
        target_normalizer: Normalizer,
        state_dim: int,
        action_dim: int,
        trained: bool = True,
    ):
        self.members = members
        self.input_normalizer = input_normalizer
        self.target_normalizer = target_normalizer
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.trained = trained

    @property
    def size(self) -> int:
        return len(self.members)

    def _require_trained(self) -> None:
        if not self.trained:
            raise RuntimeError("dynamics model has not been trained")

    def predict(self, states: np.ndarray, actions: np.ndarray) -> GaussianPrediction:
        self._require_trained()
        x = self.input_normalizer.normalize(np.column_stack([states, actions]))
        D = self.state_dim + 1
        outs = np.stack([m(x) for m in self.members])
        return GaussianPrediction(
            means=outs[..., :D],
            stds=np.exp(soft_clamp(outs[..., D:])),
            target_normalizer=self.target_normalizer,
        )

    def uncertainty(self, states: np.ndarray, actions: np.ndarray, heuristic: str) -> np.ndarray:
        return uncertainty_from_prediction(self.predict(states, actions), heuristic)

    def step(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        rng: np.random.Generator,
        heuristic: str = 'ensemble_std',
        use_mean_model: bool = False,
        reward_fn: Optional[RewardFn] = None,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Sample one model transition per row.

        A member is drawn uniformly per row and its Gaussian sampled; in mean-model
        mode the ensemble-mean prediction is used without noise. A supplied
        reward_fn replaces the learned reward.

        Returns:
            (next_states, rewards, uncertainties)
        """
        pred = self.predict(states, actions)
        if use_mean_model:
            sample = pred.ensemble_mean
        else:
            B = len(states)
            member = rng.integers(0, self.size, size=B)
            rows = np.arange(B)
            mu = pred.means[member, rows]
            sd = pred.stds[member, rows]
            sample = mu + sd * rng.standard_normal(mu.shape)
        raw = self.target_normalizer.denormalize(sample)
        next_states = states + raw[:, :self.state_dim]
        rewards = raw[:, self.state_dim]
        if reward_fn is not None:
            rewards = reward_fn(states, actions, next_states)
        return next_states, rewards, uncertainty_from_prediction(pred, heuristic)

    def out_of_box(self, states: np.ndarray, box: float) -> np.ndarray:
        """True for rows whose normalized coordinates leave [−box, box]."""
        mean = self.input_normalizer.mean[:self.state_dim]
        std = self.input_normalizer.std[:self.state_dim]
        return np.any(np.abs((states - mean) / std) > box, axis=1)


def predict(model: EnsembleDynamics, states: np.ndarray, actions: np.ndarray) -> GaussianPrediction:
    return model.predict(states, actions)


def uncertainty(model: EnsembleDynamics, states: np.ndarray, actions: np.ndarray, heuristic: str) -> np.ndarray:
    return model.uncertainty(states, actions, heuristic)


# ── Training ─────────────────────────────────────────────────────────────────

@dataclass
class MemberReport:
    epochs: int
    best_holdout_nll: float
    holdout_history: list[float] = field(default_factory=list)


@dataclass
class TrainingReport:
    members: list[MemberReport]
    train_size: int
    holdout_size: int

    def to_dict(self) -> dict:
        return asdict(self)


def _train_member(
    index: int,
    sizes: list[int],
    train: RegressionBatch,
    holdout: RegressionBatch,
    config: DynamicsConfig,
    rng: np.random.Generator,
) -> tuple[MlpNetwork, MemberReport]:
    net = MlpNetwork(sizes, rng)
    adam = AdamState.for_params(net.parameters(), lr=config.learning_rate)
    n = len(train.inputs)
    best, best_params, stall = np.inf, net.get_flat(), 0
    history: list[float] = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            mlp_train_step(net, adam, gaussian_nll_loss,
                           RegressionBatch(train.inputs[idx], train.targets[idx]),
                           label=f"dynamics member {index}")
        nll = gaussian_nll_loss(net(holdout.inputs), holdout)[0]
        history.append(nll)
        if nll < best - 1e-4:
            best, best_params, stall = nll, net.get_flat(), 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    net.set_flat(best_params)
    logger.debug(f"Member {index}: {epoch} epochs, holdout NLL {best:.4f}")
    return net, MemberReport(epoch, float(best), history)


def train_ensemble(
    dataset: TransitionBatch,
    config: DynamicsConfig,
    streams: RngStreams,
) -> tuple[EnsembleDynamics, TrainingReport]:
    """
    Fit the ensemble by Gaussian NLL with early stopping on a shared holdout split.

    Member i draws its initialization and batch order from stream
    'dynamics/member{i}', so results do not depend on config.workers.
    """
    config.validate()
    n = len(dataset)
    if n < config.min_dataset:
        raise ValueError(f"dynamics training needs at least {config.min_dataset} transitions, got {n}")
    sd, ad = dataset.states.shape[1], dataset.actions.shape[1]
    inputs = np.column_stack([dataset.states, dataset.actions])
    targets = np.column_stack([dataset.next_states - dataset.states, dataset.rewards])
    in_norm = Normalizer.fit(inputs, config.normalizer_floor)
    out_norm = Normalizer.fit(targets, config.normalizer_floor)
    x, y = in_norm.normalize(inputs), out_norm.normalize(targets)

    perm = streams.get('dynamics/split').permutation(n)
    n_hold = max(1, int(round(config.holdout_fraction * n)))
    hold, tr = perm[:n_hold], perm[n_hold:]
    train = RegressionBatch(x[tr], y[tr])
    holdout = RegressionBatch(x[hold], y[hold])
    sizes = [sd + ad, *config.hidden_sizes, 2 * (sd + 1)]

    logger.info(f"Training {config.ensemble_size}-member ensemble on {len(tr)} transitions "
                f"({n_hold} held out, {config.workers} worker(s))")
    jobs = [(i, streams.get(f'dynamics/member{i}')) for i in range(config.ensemble_size)]
    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        results = list(pool.map(
            lambda job: _train_member(job[0], sizes, train, holdout, config, job[1]), jobs
        ))
    model = EnsembleDynamics([r[0] for r in results], in_norm, out_norm, sd, ad)
    report = TrainingReport([r[1] for r in results], len(tr), n_hold)
    logger.info(
        "Ensemble holdout NLL: " + ", ".join(f"{m.best_holdout_nll:.3f}" for m in report.members)
    )
    return model, report


# ── Persistence ──────────────────────────────────────────────────────────────

def save_dynamics(model: EnsembleDynamics, path: Path) -> None:
    save_networks(
        path,
        'dynamics',
        {f'member{i}': m for i, m in enumerate(model.members)},
        extra={
            'state_dim': model.state_dim,
            'action_dim': model.action_dim,
            'input_mean': model.input_normalizer.mean.tolist(),
            'input_std': model.input_normalizer.std.tolist(),
            'target_mean': model.target_normalizer.mean.tolist(),
            'target_std': model.target_normalizer.std.tolist(),
        },
    )


def load_dynamics(path: Path) -> EnsembleDynamics:
    networks, extra = load_networks(path, kind='dynamics')
    try:
        return EnsembleDynamics(
            members=[networks[f'member{i}'] for i in range(len(networks))],
            input_normalizer=Normalizer(np.array(extra['input_mean']), np.array(extra['input_std'])),
            target_normalizer=Normalizer(np.array(extra['target_mean']), np.array(extra['target_std'])),
            state_dim=int(extra['state_dim']),
            action_dim=int(extra['action_dim']),
        )
    except KeyError as exc:
        raise SchemaError(f"{path}: dynamics checkpoint missing {exc}") from exc
