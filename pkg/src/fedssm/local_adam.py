"""Client-side Adam (without bias correction), local SGD, and the centralized
full-gradient Adam sequence used as a reference by the deviation diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from .datasets import Dataset
from .model import Topology, clip_gradient, loss_and_grad
from .numerics import DimensionError, NonFiniteError

RngForEpoch = Callable[[int], np.random.Generator]


@dataclass(frozen=True)
class Hyperparams:
    eta: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    local_epochs: int = 30
    rounds: int = 100
    alpha: Optional[float] = 0.05
    k: Optional[int] = None
    q: int = 32
    clip: float = math.inf
    batch_size: Optional[int] = None

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.local_epochs < 0 or self.rounds < 0:
            raise ValueError("local_epochs and rounds must be non-negative")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if not self.clip > 0:
            raise ValueError("clip bound G must be positive")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.k is None and self.alpha is not None and not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")

    @property
    def clipping(self) -> bool:
        return not math.isinf(self.clip)

    def resolve_k(self, d: int) -> int:
        """Explicit ``k`` wins; otherwise ``max(1, round(alpha * d))``; default dense."""
        if self.k is not None:
            k = self.k
        elif self.alpha is not None:
            k = max(1, int(round(self.alpha * d)))
        else:
            k = d
        if not 1 <= k <= d:
            raise ValueError(f"k={k} outside [1, {d}]")
        return k


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "MomentState":
        return cls(np.zeros(d), np.zeros(d))


class Objective(Protocol):
    def __call__(self, w: np.ndarray, indices: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]: ...


@dataclass
class MLPObjective:
    """Mean cross-entropy of an MLP on rows ``indices`` of ``dataset`` (all rows if None)."""

    topology: Topology
    dataset: Dataset

    def __call__(self, w, indices=None):
        if indices is None:
            return loss_and_grad(w, self.topology, self.dataset.features, self.dataset.labels)
        return loss_and_grad(w, self.topology, self.dataset.features[indices], self.dataset.labels[indices])


@dataclass
class ClientData:
    indices: np.ndarray
    batch_size: int = field(default=0)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size == 0:
            raise ValueError("client holds no samples")
        if self.batch_size == 0:
            self.batch_size = min(32, self.indices.size)
        if not 1 <= self.batch_size <= self.indices.size:
            raise ValueError("batch_size exceeds the client's sample count")

    @property
    def full_batch(self) -> bool:
        return self.batch_size == self.indices.size

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        # The full partition is used in stored order so that full-batch runs
        # reduce in the same order as a centralized pass over the same rows.
        if self.full_batch:
            return self.indices
        return rng.choice(self.indices, size=self.batch_size, replace=False)


def adam_step(w: np.ndarray, state: MomentState, g: np.ndarray, hp: Hyperparams) -> tuple[np.ndarray, MomentState]:
    if not (w.shape == state.m.shape == state.v.shape == g.shape):
        raise DimensionError("adam_step operands differ in length")
    m = hp.beta1 * state.m + (1.0 - hp.beta1) * g
    v = hp.beta2 * state.v + (1.0 - hp.beta2) * (g * g)
    w_new = w - hp.eta * (m / np.sqrt(v + hp.eps))
    if not np.all(np.isfinite(w_new)):
        raise NonFiniteError("adam_step produced non-finite parameters")
    return w_new, MomentState(m, v)


def _clipped_grad(objective: Objective, w, idx, hp: Hyperparams) -> np.ndarray:
    _, g = objective(w, idx)
    return clip_gradient(g, hp.clip)


def local_train(
    W: np.ndarray,
    M: np.ndarray,
    V: np.ndarray,
    objective: Objective,
    client: ClientData,
    hp: Hyperparams,
    rng_for_epoch: RngForEpoch,
    trajectory: Optional[list] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run ``hp.local_epochs`` Adam steps from ``(W, M, V)`` on fresh mini-batches.

    When ``trajectory`` is a list, ``(w, m, v)`` for epochs ``0..L`` is appended.
    """
    w, state = W.copy(), MomentState(M.copy(), V.copy())
    if trajectory is not None:
        trajectory.append((w, state.m, state.v))
    for epoch in range(hp.local_epochs):
        idx = client.draw(rng_for_epoch(epoch))
        g = _clipped_grad(objective, w, idx, hp)
        w, state = adam_step(w, state, g, hp)
        if trajectory is not None:
            trajectory.append((w, state.m, state.v))
    return w, state.m, state.v


def sgd_local_train(
    W: np.ndarray,
    objective: Objective,
    client: ClientData,
    hp: Hyperparams,
    rng_for_epoch: RngForEpoch,
) -> np.ndarray:
    w = W.copy()
    for epoch in range(hp.local_epochs):
        idx = client.draw(rng_for_epoch(epoch))
        w = w - hp.eta * _clipped_grad(objective, w, idx, hp)
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("local SGD diverged")
    return w


def centralized_adam_run(
    W0: np.ndarray,
    M0: np.ndarray,
    V0: np.ndarray,
    objective: Objective,
    hp: Hyperparams,
    steps: int,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Adam driven by the full-data gradient; returns states ``0..steps``."""
    w, state = W0.copy(), MomentState(M0.copy(), V0.copy())
    out = [(w, state.m, state.v)]
    for _ in range(steps):
        g = _clipped_grad(objective, w, None, hp)
        w, state = adam_step(w, state, g, hp)
        out.append((w, state.m, state.v))
    return out
