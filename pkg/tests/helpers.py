"""Shared test utilities: independent oracles and miniature training setups."""

from __future__ import annotations

import math

import numpy as np
import torch

from auxseg import (ArchConfig, AugmentationConfig, SyntheticDataConfig, TrainConfig,
                    generate_synthetic, split)


def brute_force_sdm(mask: np.ndarray, direction: str) -> np.ndarray:
    """O(n*m) nearest-opposite-pixel search; the independent distance oracle."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.float64)
    measured = mask if direction == "in" else ~mask
    reference = np.argwhere(~mask if direction == "in" else mask)
    for y in range(h):
        for x in range(w):
            if measured[y, x]:
                d2 = ((reference[:, 0] - y) ** 2 + (reference[:, 1] - x) ** 2).min()
                out[y, x] = math.sqrt(int(d2))
    return out


def finite_diff_grad(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar fn w.r.t. every entry of x."""
    grad = torch.zeros_like(x, dtype=torch.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.tensor(1e-8, dtype=a.dtype))
    return float(((a - b).abs() / denom).max())


def tiny_splits(count: int = 30, hw: int = 32, seed: int = 5):
    samples = generate_synthetic(SyntheticDataConfig(count=count, height=hw, width=hw, seed=seed))
    return split(samples, (0.6, 0.2, 0.2), seed=seed)


def tiny_arch() -> ArchConfig:
    return ArchConfig(base_width=8, stage_blocks=(1, 1, 1))


def tiny_cfg(**overrides) -> TrainConfig:
    defaults = dict(batch_size=4, steps=12, pretrain_steps=8, val_every=6, seed=123)
    defaults.update(overrides)
    return TrainConfig(**defaults)


def quiet_aug() -> AugmentationConfig:
    return AugmentationConfig.disabled()


def state_dicts_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    return all(torch.equal(a[k], b[k]) for k in a)
