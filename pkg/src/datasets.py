"""Replay buffers, mixed-batch sampling, and reward relabeling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from loguru import logger

from src.envs import Transition, TransitionBatch

BUFFER_TAGS = ('env', 'opt_raw', 'opt_relabel', 'pess')
MODEL_BUFFER_CAPACITY = 1_000_000
_MIN_ALLOCATION = 1024


class ReplayBuffer:
    """
    Growable FIFO transition store with an optional capacity.

    Model buffers ('opt_raw', 'opt_relabel', 'pess') require r_raw and u on every
    record; the 'env' buffer rejects them. Once full, the oldest record is
    overwritten first.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        capacity: Optional[int] = None,
        tag: str = 'env',
    ):
        if tag not in BUFFER_TAGS:
            raise ValueError(f"unknown buffer tag '{tag}' (expected one of {BUFFER_TAGS})")
        if capacity is not None and capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.capacity = capacity
        self.tag = tag
        self.insertions = 0
        self._size = 0
        self._cursor = 0
        self._alloc(0)

    @property
    def is_model_buffer(self) -> bool:
        return self.tag != 'env'

    def _alloc(self, n: int) -> None:
        self._states = np.empty((n, self.state_dim))
        self._actions = np.empty((n, self.action_dim))
        self._rewards = np.empty(n)
        self._next_states = np.empty((n, self.state_dim))
        self._terminals = np.empty(n, dtype=bool)
        self._raw_rewards = np.empty(n)
        self._uncertainties = np.empty(n)

    def _columns(self) -> list[np.ndarray]:
        return [self._states, self._actions, self._rewards, self._next_states,
                self._terminals, self._raw_rewards, self._uncertainties]

    def _grow(self, needed: int) -> None:
        allocated = len(self._rewards)
        if needed <= allocated:
            return
        new_size = max(needed, 2 * allocated, _MIN_ALLOCATION)
        if self.capacity is not None:
            new_size = min(new_size, self.capacity)
        old = self._columns()
        self._alloc(new_size)
        for dst, src in zip(self._columns(), old):
            dst[:self._size] = src[:self._size]

    def __len__(self) -> int:
        return self._size

    def _check_fields(self, batch: TransitionBatch) -> None:
        if batch.states.shape[1] != self.state_dim or batch.actions.shape[1] != self.action_dim:
            raise ValueError(
                f"batch dims ({batch.states.shape[1]}, {batch.actions.shape[1]}) do not match "
                f"buffer dims ({self.state_dim}, {self.action_dim})"
            )
        present = np.isfinite(batch.uncertainties)
        if self.is_model_buffer:
            if not np.all(present) or not np.all(np.isfinite(batch.raw_rewards)):
                raise ValueError(f"'{self.tag}' buffer requires r_raw and u on every record")
        elif np.any(present):
            raise ValueError("'env' buffer records must not carry r_raw or u")

    def add_batch(self, batch: TransitionBatch) -> int:
        """Append *batch* in order, evicting the oldest records when full. Returns records added."""
        n = len(batch)
        if n == 0:
            return 0
        self._check_fields(batch)
        cols_in = [batch.states, batch.actions, batch.rewards, batch.next_states,
                   batch.terminals, batch.raw_rewards, batch.uncertainties]

        if self.capacity is None or self._size + n <= self.capacity and self._cursor == self._size:
            self._grow(self._size + n)
            for dst, src in zip(self._columns(), cols_in):
                dst[self._size:self._size + n] = src
            self._size += n
            self._cursor = self._size if self.capacity is None else self._size % self.capacity
        else:
            self._grow(self.capacity)
            if n > self.capacity:
                cols_in = [c[n - self.capacity:] for c in cols_in]
                n = self.capacity
            idx = (self._cursor + np.arange(n)) % self.capacity
            for dst, src in zip(self._columns(), cols_in):
                dst[idx] = src
            self._cursor = int((self._cursor + n) % self.capacity)
            self._size = min(self._size + n, self.capacity)
        self.insertions += len(batch)
        return len(batch)

    def add(self, transition: Transition) -> None:
        self.add_batch(TransitionBatch.from_records([transition]))

    def _order(self) -> np.ndarray:
        """Physical indices from oldest to newest."""
        if self.capacity is not None and self._size == self.capacity:
            return (self._cursor + np.arange(self._size)) % self.capacity
        return np.arange(self._size)

    def _gather(self, idx: np.ndarray) -> TransitionBatch:
        return TransitionBatch(
            states=self._states[idx],
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_states=self._next_states[idx],
            terminals=self._terminals[idx],
            raw_rewards=self._raw_rewards[idx] if self.is_model_buffer else None,
            uncertainties=self._uncertainties[idx] if self.is_model_buffer else None,
        )

    def view(self) -> TransitionBatch:
        """Copy of the contents in insertion order (oldest first)."""
        return self._gather(self._order())

    def sample(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniform sample with replacement."""
        if self._size == 0:
            raise ValueError(f"cannot sample from empty '{self.tag}' buffer")
        return self._gather(rng.integers(0, self._size, size=n))

    @classmethod
    def from_batch(
        cls,
        batch: TransitionBatch,
        tag: str = 'env',
        capacity: Optional[int] = None,
    ) -> ReplayBuffer:
        buffer = cls(batch.states.shape[1], batch.actions.shape[1], capacity, tag)
        buffer.add_batch(batch)
        return buffer


@dataclass
class BufferSet:
    """The four named buffers of one training run."""

    env: ReplayBuffer
    opt_raw: ReplayBuffer
    opt_relabel: ReplayBuffer
    pess: ReplayBuffer

    @classmethod
    def from_dataset(cls, dataset: TransitionBatch, capacity: int = MODEL_BUFFER_CAPACITY) -> BufferSet:
        sd, ad = dataset.states.shape[1], dataset.actions.shape[1]
        return cls(
            env=ReplayBuffer.from_batch(dataset, 'env'),
            opt_raw=ReplayBuffer(sd, ad, capacity, 'opt_raw'),
            opt_relabel=ReplayBuffer(sd, ad, capacity, 'opt_relabel'),
            pess=ReplayBuffer(sd, ad, capacity, 'pess'),
        )

    def sizes(self) -> dict[str, int]:
        return {tag: len(getattr(self, tag)) for tag in BUFFER_TAGS}


# ── Mixed sampling ───────────────────────────────────────────────────────────

def mix_counts(fractions: Sequence[float], batch_size: int) -> list[int]:
    """
    Largest-remainder rounding of fractions·batch_size.

    Ties in the remainder go to the lower index; counts always sum to batch_size.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    raw = fr * batch_size
    counts = np.floor(raw).astype(int)
    remainders = np.round(raw - counts, 12)
    short = batch_size - int(counts.sum())
    order = sorted(range(len(fr)), key=lambda i: (-remainders[i], i))
    for i in order[:short]:
        counts[i] += 1
    return [int(c) for c in counts]


@dataclass
class MixSpec:
    fractions: tuple[float, ...]
    batch_size: int = 256
    counts: list[int] = field(init=False)

    def __post_init__(self) -> None:
        self.fractions = tuple(float(f) for f in self.fractions)
        if any(f < 0 for f in self.fractions):
            raise ValueError(f"mix fractions must be non-negative, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"mix fractions must sum to 1, got {sum(self.fractions)}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        self.counts = mix_counts(self.fractions, self.batch_size)


def sample_mixed_batch(
    buffers: Sequence[ReplayBuffer],
    mix: MixSpec,
    rng: np.random.Generator,
) -> TransitionBatch:
    """
    Draw mix.counts[i] records from buffers[i] (with replacement) and concatenate.

    The returned batch's ``sources`` holds the index of the buffer each row came from.
    Model fields are dropped; only (s, a, r, s', terminal) matter to the learners.
    """
    if len(buffers) != len(mix.fractions):
        raise ValueError(f"{len(buffers)} buffers for {len(mix.fractions)} mix fractions")
    parts: list[TransitionBatch] = []
    for i, (buf, count) in enumerate(zip(buffers, mix.counts)):
        if count == 0:
            continue
        if len(buf) == 0:
            raise ValueError(
                f"buffer '{buf.tag}' is empty but its mix fraction is {mix.fractions[i]}"
            )
        part = buf.sample(count, rng)
        parts.append(TransitionBatch(
            states=part.states,
            actions=part.actions,
            rewards=part.rewards,
            next_states=part.next_states,
            terminals=part.terminals,
            sources=np.full(count, i),
        ))
    return TransitionBatch.concatenate(parts)


# ── Relabeling ───────────────────────────────────────────────────────────────

def relabel(opt_raw: ReplayBuffer, shaper: Any) -> ReplayBuffer:
    """
    Rewrite an optimistic-rollout buffer with pessimistic rewards.

    Every record's reward becomes shaper.shape(r_raw, u, 'pessimistic'); states,
    actions, r_raw and u are kept, as is insertion order and capacity.
    """
    if opt_raw.tag != 'opt_raw':
        raise ValueError(f"relabel expects an 'opt_raw' buffer, got '{opt_raw.tag}'")
    out = ReplayBuffer(opt_raw.state_dim, opt_raw.action_dim, opt_raw.capacity, 'opt_relabel')
    if len(opt_raw) == 0:
        return out
    batch = opt_raw.view()
    if not np.all(np.isfinite(batch.uncertainties)):
        raise ValueError("cannot relabel records without an uncertainty")
    batch.rewards = shaper.shape(batch.raw_rewards, batch.uncertainties, 'pessimistic')
    out.add_batch(batch)
    logger.debug(f"Relabeled {len(out)} optimistic transitions (λp={shaper.lambda_p})")
    return out
