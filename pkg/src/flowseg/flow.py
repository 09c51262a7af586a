"""Conditional flow matching: straight-line paths, targets, loss and training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import NetworkConfig, TrainingConfig
from .data import MultiAnnotatedSample
from .net import VelocityNetParams, forward_graph, init_params
from .optim import AdamState, adam_step
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


def _pair(S0, Se):
    S0 = np.asarray(S0, dtype=np.float64)
    Se = np.asarray(Se, dtype=np.float64)
    if S0.shape != Se.shape:
        raise ShapeError(f"source shape {S0.shape} vs target shape {Se.shape}")
    return S0, Se


def sample_path_point(S0, Se, t) -> np.ndarray:
    """(1 - t) * S0 + t * Se; ``t`` may be a scalar or one value per leading index."""
    S0, Se = _pair(S0, Se)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (S0.ndim - t.ndim))
    return (1.0 - t) * S0 + t * Se


def target_velocity(S0, Se) -> np.ndarray:
    S0, Se = _pair(S0, Se)
    return Se - S0


def gaussian_path_logdensity(S, Se, t: float) -> float:
    """log N(S; t * Se, (1 - t)^2 I), defined for 0 <= t < 1."""
    S, Se = _pair(S, Se)
    if not 0.0 <= t < 1.0:
        raise ValueError(f"conditional path density is degenerate or undefined at t={t}")
    sigma = 1.0 - t
    d = S.size
    r = (S - t * Se).ravel()
    return float(-0.5 * d * math.log(2.0 * math.pi) - d * math.log(sigma) - 0.5 * (r @ r) / sigma**2)


@dataclass
class CFMBatch:
    """All random draws behind one loss evaluation, kept so they can be replayed."""

    t: np.ndarray  # [B]
    S0: np.ndarray  # [B,C,H,W]
    Se: np.ndarray  # [B,C,H,W]
    X: np.ndarray  # [B,Cx,H,W], rows zeroed where the condition was dropped
    dropped: np.ndarray  # [B] bool

    @property
    def St(self) -> np.ndarray:
        return sample_path_point(self.S0, self.Se, self.t)

    @property
    def target(self) -> np.ndarray:
        return target_velocity(self.S0, self.Se)


def draw_batch(
    samples: Sequence[MultiAnnotatedSample],
    rng: np.random.Generator,
    p_drop: float = 0.1,
    eps_t: float = 1e-3,
) -> CFMBatch:
    """Draw expert index, t, S0 and the dropout mask for every element, in that order."""
    if len(samples) == 0:
        raise ValueError("empty batch")
    B = len(samples)
    experts = [rng.integers(len(s.masks)) for s in samples]
    Se = np.stack([s.masks[e][None].astype(np.float64) for s, e in zip(samples, experts)])
    t = rng.uniform(0.0, 1.0 - eps_t, size=B)
    S0 = rng.standard_normal(Se.shape)
    dropped = rng.random(B) < p_drop
    X = np.stack([s.image for s in samples]).astype(np.float64)
    X[dropped] = 0.0
    return CFMBatch(t, S0, Se, X, dropped)


def batch_loss(
    velocity: Callable[[np.ndarray, np.ndarray, np.ndarray], Tensor], batch: CFMBatch
) -> Tensor:
    """Mean over the batch of the squared L2 norm of (prediction - target)."""
    pred = velocity(batch.t, batch.St, batch.X)
    diff = T.add(pred, Tensor(-batch.target))
    per_pixel = int(np.prod(batch.S0.shape[1:]))
    return T.scale(T.mean(T.square(diff)), per_pixel)


def cfm_loss(
    params: VelocityNetParams,
    samples: Sequence[MultiAnnotatedSample],
    rng: np.random.Generator,
    p_drop: float = 0.1,
    eps_t: float = 1e-3,
    leaves: dict[str, Tensor] | None = None,
) -> Tensor:
    """Differentiable CFM loss on one freshly drawn batch.

    Pass ``leaves`` (parameter tensors with ``requires_grad``) to get gradients
    after ``backward``; otherwise constants are used.
    """
    batch = draw_batch(samples, rng, p_drop, eps_t)
    if leaves is None:
        leaves = {k: Tensor(v) for k, v in params.tensors.items()}
    cfg = params.config
    return batch_loss(lambda t, S, X: forward_graph(leaves, cfg, t, S, X), batch)


@dataclass
class LossHistory:
    values: list[float] = field(default_factory=list)
    window: int = 100

    def __len__(self) -> int:
        return len(self.values)

    def moving_average(self) -> np.ndarray:
        v = np.asarray(self.values)
        if v.size < self.window:
            return np.array([v.mean()]) if v.size else v
        c = np.cumsum(np.concatenate([[0.0], v]))
        return (c[self.window :] - c[: -self.window]) / self.window

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,loss\n")
            for i, v in enumerate(self.values):
                fh.write(f"{i},{v!r}\n")


def train(
    dataset: Sequence[MultiAnnotatedSample],
    net_config: NetworkConfig,
    train_config: TrainingConfig,
    params: VelocityNetParams | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[VelocityNetParams, LossHistory]:
    """Adam on the CFM loss; every stochastic choice comes from one stream seeded by ``train_config.seed``."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    net_config.validate()
    train_config.validate()
    if params is None:
        params = init_params(net_config, train_config.seed)
    rng = np.random.default_rng(np.random.SeedSequence(train_config.seed, spawn_key=(1,)))
    names = params.names()
    values = params.values()
    state = AdamState.zeros_like(values)
    history = LossHistory(window=train_config.ma_window)
    for it in range(train_config.iterations):
        idx = rng.integers(len(dataset), size=train_config.batch_size)
        batch = [dataset[i] for i in idx]
        leaves = {k: Tensor(v, requires_grad=True) for k, v in zip(names, values)}
        loss = cfm_loss(params, batch, rng, train_config.p_drop, train_config.eps_t, leaves=leaves)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(it, value)
        T.backward(loss)
        grads = [leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v) for k, v in zip(names, values)]
        values, state = adam_step(values, grads, state, train_config.lr)
        history.values.append(value)
        if callback is not None:
            callback(it, value)
        if it % 100 == 0:
            log.debug("iteration %d loss %.5f", it, value)
    return params.with_values(values), history
