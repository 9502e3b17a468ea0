"""Domain types, the Dice metric/loss, and ensemble prediction averaging.

Images, masks and probability maps are plain 2D numpy arrays (H, W): images are
float32 in [0, 1], masks are uint8 in {0, 1}, probability maps are float arrays
with every value in [0, 1]. Losses operate on torch tensors so they can sit in
an autograd graph; their arithmetic is done in float64 regardless of the input
dtype so that exact-combination identities hold to tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class Sample:
    """One image with an optional binary mask."""

    image: np.ndarray
    mask: np.ndarray | None
    id: str

    def __post_init__(self) -> None:
        if self.image.ndim != 2:
            raise ValueError(f"sample '{self.id}': image must be 2D, got shape {self.image.shape}")
        lo, hi = float(self.image.min()), float(self.image.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"sample '{self.id}': intensities outside [0,1] (min={lo}, max={hi})")
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise ValueError(
                    f"sample '{self.id}': mask shape {self.mask.shape} != image shape {self.image.shape}"
                )
            values = np.unique(self.mask)
            if not np.isin(values, (0, 1)).all():
                raise ValueError(f"sample '{self.id}': mask values must be 0/1, got {values}")


@dataclass
class DatasetSplits:
    """Disjoint train/val/test sample lists; every sample carries a mask."""

    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [s.id for part in (self.train, self.val, self.test) for s in part]
        if len(ids) != len(set(ids)):
            raise ValueError("split ids are not pairwise disjoint")
        for part_name in ("train", "val", "test"):
            for s in getattr(self, part_name):
                if s.mask is None:
                    raise ValueError(f"sample '{s.id}' in {part_name} split has no mask")


def dice_score(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """Hard Dice 2|A∩B|/(|A|+|B|) after thresholding pred at threshold.

    Returns 1.0 when both the thresholded prediction and the ground truth are
    empty (the 0/0 case).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    a = pred > threshold
    b = gt > 0
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Differentiable Dice loss 1 - (2·Σp·t + smooth)/(Σp + Σt + smooth).

    Sums run over all elements (batch dice when given a batch). Targets may be
    soft probability maps, which is what lets the same loss score a student
    against a teacher-ensemble pseudo-annotation.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if smooth <= 0:
        raise ValueError(f"smooth must be > 0, got {smooth}")
    p = pred.double()
    t = target.double()
    intersection = (p * t).sum()
    return 1.0 - (2.0 * intersection + smooth) / (p.sum() + t.sum() + smooth)


def ensemble_average(preds: list[np.ndarray]) -> np.ndarray:
    """Elementwise arithmetic mean of probability maps."""
    if len(preds) == 0:
        raise ValueError("cannot average an empty list of predictions")
    shape = np.asarray(preds[0]).shape
    for i, p in enumerate(preds):
        if np.asarray(p).shape != shape:
            raise ValueError(f"shape mismatch: prediction 0 has {shape}, prediction {i} has {np.asarray(p).shape}")
    return np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in preds]), axis=0)


def mean_dice(preds: list[np.ndarray], samples: list[Sample], threshold: float = 0.5) -> float:
    """Unweighted mean of per-sample hard Dice."""
    if len(preds) != len(samples):
        raise ValueError(f"{len(preds)} predictions for {len(samples)} samples")
    if not samples:
        raise ValueError("cannot compute mean dice over an empty sample list")
    return float(np.mean([dice_score(p, s.mask, threshold) for p, s in zip(preds, samples)]))
