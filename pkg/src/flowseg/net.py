"""Image-conditioned, time-dependent velocity field u(t, S, X).

A small encoder-decoder: ``depth`` stride-2 average-pool stages, each stage two
3x3 conv + SiLU layers, channel-concat skips, and the time embedding added as a
per-channel bias after the first conv of every stage. The condition image is
concatenated to the mask along the channel axis; the unconditional branch sees
zero-filled condition channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import NetworkConfig
from .tensor import ShapeError, Tensor

MAX_FREQ = 1000.0


@dataclass
class VelocityNetParams:
    config: NetworkConfig
    tensors: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[np.ndarray]:
        return list(self.tensors.values())

    def with_values(self, values) -> "VelocityNetParams":
        return VelocityNetParams(self.config, dict(zip(self.tensors, values)))

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "VelocityNetParams":
        return VelocityNetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _channels(cfg: NetworkConfig) -> list[int]:
    return [cfg.width * 2**level for level in range(cfg.depth + 1)]


def block_layout(cfg: NetworkConfig) -> list[tuple[str, int, int]]:
    """(name, in_channels, out_channels) of every conv block, in forward order."""
    ch = _channels(cfg)
    blocks = []
    cin = cfg.mask_channels + cfg.cond_channels
    for level in range(cfg.depth):
        blocks.append((f"down{level}", cin, ch[level]))
        cin = ch[level]
    blocks.append(("mid", ch[cfg.depth - 1], ch[cfg.depth]))
    for level in reversed(range(cfg.depth)):
        blocks.append((f"up{level}", ch[level + 1] + ch[level], ch[level]))
    return blocks


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    e = cfg.temb_dim
    shapes = {"time.w": (e, e), "time.b": (e,)}
    for name, cin, cout in block_layout(cfg):
        shapes[f"{name}.conv1.w"] = (cout, cin, 3, 3)
        shapes[f"{name}.conv1.b"] = (cout,)
        shapes[f"{name}.temb.w"] = (e, cout)
        shapes[f"{name}.temb.b"] = (cout,)
        shapes[f"{name}.conv2.w"] = (cout, cout, 3, 3)
        shapes[f"{name}.conv2.b"] = (cout,)
    shapes["out.w"] = (cfg.mask_channels, cfg.width, 3, 3)
    shapes["out.b"] = (cfg.mask_channels,)
    return shapes


def init_params(config: NetworkConfig, seed: int) -> VelocityNetParams:
    """Fan-in scaled uniform weights, zero biases, zero output layer."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b") or name.startswith("out."):
            tensors[name] = np.zeros(shape)
            continue
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
        bound = np.sqrt(3.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return VelocityNetParams(config, tensors)


def sinusoidal_features(t, dim: int) -> np.ndarray:
    """[B, dim] features: sin at geometric frequencies, then cos at the same ones."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.ndim != 1:
        raise ShapeError(f"time must be a scalar or a 1-D batch, got shape {t.shape}")
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    half = dim // 2
    freqs = np.geomspace(1.0, MAX_FREQ, half)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def time_embed(params: VelocityNetParams, t) -> np.ndarray:
    """Learned time embedding SiLU(features(t) @ W + b), shape [B, temb_dim]."""
    leaves = {k: Tensor(v) for k, v in params.tensors.items()}
    return _embed(leaves, params.config, t).data


def _embed(p: dict[str, Tensor], cfg: NetworkConfig, t) -> Tensor:
    feats = Tensor(sinusoidal_features(t, cfg.temb_dim))
    return T.silu(T.bias_add(T.matmul(feats, p["time.w"]), p["time.b"]))


def _block(p, name, x, emb):
    h = T.bias_add(T.conv2d(x, p[f"{name}.conv1.w"]), p[f"{name}.conv1.b"])
    h = T.bias_add(h, T.bias_add(T.matmul(emb, p[f"{name}.temb.w"]), p[f"{name}.temb.b"]))
    h = T.silu(h)
    h = T.bias_add(T.conv2d(h, p[f"{name}.conv2.w"]), p[f"{name}.conv2.b"])
    return T.silu(h)


def _check_inputs(cfg: NetworkConfig, S: np.ndarray, X) -> np.ndarray:
    if S.ndim != 4 or S.shape[1:] != (cfg.mask_channels, cfg.size, cfg.size):
        raise ShapeError(
            f"mask shape {S.shape} does not match [B,{cfg.mask_channels},{cfg.size},{cfg.size}]"
        )
    want = (S.shape[0], cfg.cond_channels, cfg.size, cfg.size)
    if X is None:
        return np.zeros(want)
    X = np.asarray(X, dtype=np.float64)
    if X.shape != want:
        raise ShapeError(f"condition shape {X.shape} does not match {list(want)}")
    return X


def forward_graph(p: dict[str, Tensor], cfg: NetworkConfig, t, S, X=None) -> Tensor:
    """Differentiable forward pass over parameter leaves ``p``.

    ``t`` is a scalar or one time per batch element. ``X=None`` selects the
    unconditional branch (zero-filled condition channels).
    """
    S = S.data if isinstance(S, Tensor) else np.asarray(S, dtype=np.float64)
    X = _check_inputs(cfg, S, X)
    B = S.shape[0]
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(B, float(t))
    elif t.shape != (B,):
        raise ShapeError(f"time batch shape {t.shape} does not match batch size {B}")

    emb = _embed(p, cfg, t)
    h = Tensor(S)
    if cfg.cond_channels:
        h = T.concat_channels(h, Tensor(X))
    skips = []
    for level in range(cfg.depth):
        h = _block(p, f"down{level}", h, emb)
        skips.append(h)
        h = T.avg_pool2(h)
    h = _block(p, "mid", h, emb)
    for level in reversed(range(cfg.depth)):
        h = T.concat_channels(T.upsample2(h), skips[level])
        h = _block(p, f"up{level}", h, emb)
    return T.bias_add(T.conv2d(h, p["out.w"]), p["out.b"])


def forward(params: VelocityNetParams, t, S, X=None) -> np.ndarray:
    leaves = {k: Tensor(v) for k, v in params.tensors.items()}
    return forward_graph(leaves, params.config, t, S, X).data


def guided_velocity(params: VelocityNetParams, t, S, X, w: float) -> np.ndarray:
    """u_c + w * (u_c - u_u); the two branches run as separate passes."""
    if X is None:
        raise ValueError("guided_velocity needs a condition image")
    u_c = forward(params, t, S, X)
    if w == 0.0:
        return u_c
    u_u = forward(params, t, S, None)
    return u_c + w * (u_c - u_u)
