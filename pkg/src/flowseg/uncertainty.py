"""Pixel-wise mean / variance maps over a set of binary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MultiAnnotatedSample, to_u8, write_pgm


@dataclass
class UncertaintyMap:
    mean: np.ndarray  # [H, W] in [0, 1]
    variance: np.ndarray  # [H, W] in [0, 0.25]
    count: int


def _stack(masks) -> np.ndarray:
    masks = [np.asarray(m) for m in masks]
    if not masks:
        raise ValueError("need at least one mask")
    shape = masks[0].shape
    for i, m in enumerate(masks):
        if m.shape != shape:
            raise ValueError(f"mask {i} has shape {m.shape}, expected {shape}")
    arr = np.stack(masks).astype(np.float64)
    if np.any((arr != 0) & (arr != 1)):
        raise ValueError("masks must be binary (values in {0, 1})")
    return arr


def pixelwise_stats(masks) -> UncertaintyMap:
    """Per-pixel mean and population variance (divides by M)."""
    arr = _stack(masks)
    mean = arr.mean(axis=0)
    var = arr.var(axis=0)
    return UncertaintyMap(mean, var, arr.shape[0])


def gt_confidence_map(sample: MultiAnnotatedSample) -> UncertaintyMap:
    return pixelwise_stats(sample.masks)


def write_maps(umap: UncertaintyMap, mean_path, var_path) -> None:
    """8-bit PGMs: mean scaled [0,1] -> [0,255], variance x4 then the same."""
    write_pgm(mean_path, to_u8(umap.mean))
    write_pgm(var_path, to_u8(4.0 * umap.variance))
