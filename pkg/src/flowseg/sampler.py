"""Fixed-step ODE integration of the guided velocity field from t=0 to t=1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import IntegratorConfig
from .net import VelocityNetParams, forward, guided_velocity

Field = Callable[[float, np.ndarray], np.ndarray]


class IntegrationError(RuntimeError):
    def __init__(self, msg: str, step: int | None = None, sample: int | None = None):
        super().__init__(msg)
        self.step = step
        self.sample = sample


def integrate_field(field: Field, S0: np.ndarray, method: str = "midpoint", h: float = 0.01) -> np.ndarray:
    """Integrate dS/dt = field(t, S) on the uniform grid t_k = k*h, k = 0..1/h."""
    cfg = IntegratorConfig(method=method, step=h).validate()
    n = cfg.n_steps
    S = np.array(S0, dtype=np.float64, copy=True)
    for k in range(n):
        t = k / n
        if method == "midpoint":
            half = S + (0.5 * h) * field(t, S)
            S = S + h * field(t + 0.5 * h, half)
        else:
            S = S + h * field(t, S)
        if not np.all(np.isfinite(S)):
            raise IntegrationError(f"non-finite state at step {k}", step=k)
    return S


def velocity_field(params: VelocityNetParams, X: np.ndarray, guidance: float, conditional_only: bool = False) -> Field:
    """Closure u(t, S) for a fixed condition batch ``X`` [B, C_X, H, W]."""
    if conditional_only:
        return lambda t, S: forward(params, min(t, 1.0), S, X)
    return lambda t, S: guided_velocity(params, min(t, 1.0), S, X, guidance)


def integrate(params: VelocityNetParams, S0, X, config: IntegratorConfig, conditional_only: bool = False) -> np.ndarray:
    """S0, X batched as [B, C, H, W]; returns the continuous S_1 field."""
    config.validate()
    field = velocity_field(params, X, config.guidance, conditional_only)
    return integrate_field(field, S0, config.method, config.step)


def binarize(S, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(S) >= threshold).astype(np.uint8)


def source_noise(seed: int, index: int, shape, key: tuple[int, ...] = ()) -> np.ndarray:
    """S_0 for sample ``index``; one independent stream per index so results do not depend on M."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key) + (index,)))
    return rng.standard_normal(shape)


@dataclass
class SampleSet:
    fields: np.ndarray  # [M, C_S, H, W] continuous outputs
    masks: np.ndarray  # [M, C_S, H, W] uint8 in {0, 1}
    seed: int
    config: IntegratorConfig

    def __len__(self) -> int:
        return self.fields.shape[0]

    def mask_list(self, channel: int = 0) -> list[np.ndarray]:
        return [m[channel] for m in self.masks]


def sample_many(
    params: VelocityNetParams,
    X: np.ndarray,
    M: int,
    config: IntegratorConfig,
    seed: int,
    conditional_only: bool = False,
    chunk: int | None = None,
    key: tuple[int, ...] = (),
) -> SampleSet:
    """Draw M source samples for one condition image ``X`` [C_X, H, W] and integrate them.

    ``key`` namespaces the per-sample streams (the CLI uses the image's index
    in the manifest). Samples are integrated in batches of ``chunk``
    (default: all M at once).
    """
    if M < 1:
        raise ValueError(f"need M >= 1 samples, got {M}")
    config.validate()
    cfg = params.config
    shape = (cfg.mask_channels, cfg.size, cfg.size)
    S0 = np.stack([source_noise(seed, i, shape, key) for i in range(M)])
    chunk = chunk or M
    out = []
    for start in range(0, M, chunk):
        s0 = S0[start : start + chunk]
        Xb = np.broadcast_to(np.asarray(X, dtype=np.float64), (len(s0),) + np.shape(X))
        try:
            out.append(integrate(params, s0, np.ascontiguousarray(Xb), config, conditional_only))
        except IntegrationError as e:
            raise IntegrationError(f"samples {start}..{start + len(s0) - 1}: {e}", e.step, start) from e
    fields = np.concatenate(out)
    return SampleSet(fields, binarize(fields, config.threshold), seed, config)
