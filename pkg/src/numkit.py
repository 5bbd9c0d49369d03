"""Dense numerics: ridge regression, seeded RNG streams, a small feed-forward
network with manual backpropagation, Adam, and a finite-difference gradient
checker."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from loguru import logger
from scipy.linalg import cho_factor, cho_solve

# Log-std bounds shared by every Gaussian head in the project.
LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0


class NumericalError(ArithmeticError):
    """A computation produced or received non-finite values."""


def check_finite(label: str, *arrays: Any) -> None:
    """Raise NumericalError if any array holds NaN or Inf."""
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values in {label}")


# ── Ridge regression ─────────────────────────────────────────────────────────

def ridge_solve(
    X: np.ndarray,
    Y: np.ndarray,
    beta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Solve the ridge problem min_W ||XW - Y||² + beta·||W||².

    Args:
        X: Design matrix, shape (m, d); m = 0 is allowed
        Y: Targets, shape (m, k) or (m,)
        beta: Regularizer, must be positive

    Returns:
        (W, Lambda) where Lambda = XᵀX + beta·I and W = Lambda⁻¹XᵀY.
        W has shape (d, k), or (d,) when Y is one-dimensional.
    """
    if not beta > 0:
        raise ValueError(f"ridge regularizer must be positive, got {beta}")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    check_finite("ridge_solve inputs", X, Y)

    d = X.shape[1]
    Lambda = X.T @ X + beta * np.eye(d)
    XtY = X.T @ Y
    factor = cho_factor(Lambda, lower=True)
    W = cho_solve(factor, XtY)
    return W, Lambda


# ── Random streams ───────────────────────────────────────────────────────────

def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode('utf-8')).digest()[:8], 'little')


class RngStreams:
    """
    Named, independent random streams derived from one integer seed.

    The same (seed, name) pair always yields the same draw sequence, and
    different names never share a stream, so components (environment,
    each ensemble member, each policy) can be seeded independently.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        """Return the (stateful) generator for *name*, creating it on first use."""
        if name not in self._streams:
            self._streams[name] = self.fresh(name)
        return self._streams[name]

    def fresh(self, name: str) -> np.random.Generator:
        """Return a new generator positioned at the start of *name*'s stream."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(_name_key(name),))
        return np.random.default_rng(seq)


# ── Activations and bounded heads ────────────────────────────────────────────

def soft_clamp(x: np.ndarray, lo: float = LOG_STD_MIN, hi: float = LOG_STD_MAX) -> np.ndarray:
    """Smooth map of the real line onto the open interval (lo, hi), slope 1 at the centre."""
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    return mid + half * np.tanh((x - mid) / half)


def soft_clamp_grad(x: np.ndarray, lo: float = LOG_STD_MIN, hi: float = LOG_STD_MAX) -> np.ndarray:
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    t = np.tanh((x - mid) / half)
    return 1.0 - t * t


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    'relu': (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)),
    'tanh': (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


# ── Feed-forward network ─────────────────────────────────────────────────────

class MlpNetwork:
    """
    Fully connected network with a linear output layer.

    Parameters are kept as float64 weight matrices (fan_in × fan_out) and bias
    vectors. ``forward`` returns a cache that ``backward`` consumes to produce
    parameter gradients and the gradient with respect to the inputs.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = 'relu',
        final_scale: float = 1.0,
    ):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {tuple(sizes)}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            if i == n_layers - 1:
                W *= final_scale
                b *= final_scale
            self.weights.append(W)
            self.biases.append(b)

    @classmethod
    def zeros(cls, sizes: Sequence[int], activation: str = 'relu') -> MlpNetwork:
        """Network with every parameter set to zero."""
        net = cls(sizes, np.random.default_rng(0), activation)
        for p in net.parameters():
            p[...] = 0.0
        return net

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in the order W0, b0, W1, b1, ... (live references)."""
        out: list[np.ndarray] = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {flat.shape}")
        offset = 0
        for p in self.parameters():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def copy(self) -> MlpNetwork:
        return copy.deepcopy(self)

    def load_from(self, other: MlpNetwork) -> None:
        """Copy parameters from a network of identical shape."""
        if other.sizes != self.sizes:
            raise ValueError(f"shape mismatch {other.sizes} vs {self.sizes}")
        for p, q in zip(self.parameters(), other.parameters()):
            p[...] = q

    def forward(self, inputs: np.ndarray) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected inputs of shape (B, {self.in_dim}), got {x.shape}")
        act, _ = _ACTIVATIONS[self.activation]
        cache: list[tuple[np.ndarray, np.ndarray]] = []
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            cache.append((h, z))
            h = z if i == last else act(z)
        return h, cache

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return self.forward(inputs)[0]

    def backward(
        self,
        cache: list[tuple[np.ndarray, np.ndarray]],
        grad_outputs: np.ndarray,
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """
        Backpropagate d(loss)/d(outputs).

        Returns:
            (grads, grad_inputs) with grads aligned to ``parameters()``.
        """
        _, act_grad = _ACTIVATIONS[self.activation]
        g = np.asarray(grad_outputs, dtype=np.float64)
        grads: list[np.ndarray] = [np.empty(0)] * (2 * len(self.weights))
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            h, z = cache[i]
            if i != last:
                g = g * act_grad(z)
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g


def mlp_apply(net: MlpNetwork, inputs: np.ndarray) -> np.ndarray:
    """Batched forward pass; row i of the result depends only on row i of *inputs*."""
    return net(inputs)


def polyak_update(target: MlpNetwork, source: MlpNetwork, tau: float) -> None:
    """target ← (1 − tau)·target + tau·source, in place."""
    for t, s in zip(target.parameters(), source.parameters()):
        t *= 1.0 - tau
        t += tau * s


# ── Adam ─────────────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    """First/second moment accumulators for a fixed list of parameter arrays."""

    shapes: list[tuple[int, ...]]
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.m:
            self.m = [np.zeros(s) for s in self.shapes]
            self.v = [np.zeros(s) for s in self.shapes]

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 3e-4, **kwargs: float) -> AdamState:
        return cls(shapes=[p.shape for p in params], lr=lr, **kwargs)

    def apply(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """One Adam update of *params* in place."""
        if len(params) != len(self.shapes):
            raise ValueError(f"Adam state tracks {len(self.shapes)} arrays, got {len(params)}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != m.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {m.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ── Losses ───────────────────────────────────────────────────────────────────

@dataclass
class RegressionBatch:
    inputs: np.ndarray
    targets: np.ndarray


# (outputs, batch) -> (loss, d loss / d outputs)
LossSpec = Callable[[np.ndarray, Any], tuple[float, np.ndarray]]


def squared_error_loss(outputs: np.ndarray, batch: RegressionBatch) -> tuple[float, np.ndarray]:
    """Mean over the batch of the summed squared error."""
    diff = outputs - batch.targets
    n = outputs.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def gaussian_nll_loss(outputs: np.ndarray, batch: RegressionBatch) -> tuple[float, np.ndarray]:
    """
    Diagonal Gaussian negative log-likelihood (constant dropped).

    The first half of the output columns are means, the second half raw
    log-stds passed through ``soft_clamp``. Per row the loss is
    ½[(t−μ)ᵀΣ⁻¹(t−μ) + log det Σ]; the batch mean is returned.
    """
    D = batch.targets.shape[1]
    if outputs.shape[1] != 2 * D:
        raise ValueError(f"expected {2 * D} output columns, got {outputs.shape[1]}")
    n = outputs.shape[0]
    mean, raw = outputs[:, :D], outputs[:, D:]
    log_std = soft_clamp(raw)
    inv_var = np.exp(-2.0 * log_std)
    diff = batch.targets - mean
    sq = diff * diff * inv_var
    loss = float(np.sum(0.5 * sq + log_std) / n)
    grad = np.empty_like(outputs)
    grad[:, :D] = -diff * inv_var / n
    grad[:, D:] = (1.0 - sq) / n * soft_clamp_grad(raw)
    return loss, grad


def mlp_train_step(
    net: MlpNetwork,
    adam: AdamState,
    loss_spec: LossSpec,
    batch: Any,
    label: str = 'network',
) -> float:
    """
    One analytic-gradient Adam step on *batch* (which must expose ``inputs``).

    Returns:
        The loss before the update.
    """
    if len(batch.inputs) == 0:
        raise ValueError("training batch is empty")
    outputs, cache = net.forward(batch.inputs)
    loss, grad_out = loss_spec(outputs, batch)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} in {label}")
    grads, _ = net.backward(cache, grad_out)
    check_finite(f"{label} gradients", *grads)
    adam.apply(net.parameters(), grads)
    return loss


# ── Gradient check ───────────────────────────────────────────────────────────

def grad_check(
    net: MlpNetwork,
    loss_spec: LossSpec,
    batch: Any,
    epsilon: float = 1e-6,
    rng: np.random.Generator | None = None,
    num_coords: int = 200,
    rel_floor: float = 1e-4,
) -> float:
    """
    Compare backpropagated gradients against central finite differences.

    Coordinates whose perturbation crosses a ReLU kink are detected (step-halving
    and one-sided differences disagree) and replaced by other coordinates. The
    denominator floor is ``rel_floor`` times the loss scale (the larger of |loss|
    and the largest analytic gradient entry), so rescaling the loss leaves the
    result unchanged.

    Returns:
        Max over checked coordinates of |analytic − numeric| / max(|analytic|, |numeric|, floor).

    Raises:
        NumericalError: every visited coordinate sat on a kink, so nothing was checked.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-4], got {epsilon}")
    rng = rng if rng is not None else np.random.default_rng(0)

    outputs, cache = net.forward(batch.inputs)
    f0, grad_out = loss_spec(outputs, batch)
    grads, _ = net.backward(cache, grad_out)
    analytic = np.concatenate([g.ravel() for g in grads])
    floor = rel_floor * max(abs(float(f0)), float(np.abs(analytic).max(initial=0.0)), np.finfo(float).tiny)

    params = net.parameters()
    offsets = np.cumsum([0] + [p.size for p in params])

    def loss_now() -> float:
        return float(loss_spec(net(batch.inputs), batch)[0])

    def perturbed(view: np.ndarray, j: int, h: float) -> tuple[float, float]:
        orig = view[j]
        view[j] = orig + h
        plus = loss_now()
        view[j] = orig - h
        minus = loss_now()
        view[j] = orig
        return plus, minus

    worst = 0.0
    checked = 0
    skipped = 0
    for k in rng.permutation(net.num_params):
        if checked >= num_coords:
            break
        p_idx = int(np.searchsorted(offsets, k, side='right') - 1)
        view = params[p_idx].reshape(-1)
        j = int(k - offsets[p_idx])

        plus, minus = perturbed(view, j, epsilon)
        plus_h, minus_h = perturbed(view, j, 0.5 * epsilon)
        numeric = (plus - minus) / (2 * epsilon)
        numeric_h = (plus_h - minus_h) / epsilon
        second = (plus - 2 * f0 + minus) / epsilon
        second_h = (plus_h - 2 * f0 + minus_h) / (0.5 * epsilon)
        tol = 2e-5 * max(abs(numeric), floor)
        if abs(numeric - numeric_h) > tol or abs(second - 2 * second_h) > tol:
            skipped += 1
            continue

        a = analytic[k]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        checked += 1

    if not checked:
        raise NumericalError(f"grad_check found no smooth coordinate among {skipped} tried")
    if skipped:
        logger.debug(f"grad_check skipped {skipped} coordinate(s) at activation kinks")
    return worst
