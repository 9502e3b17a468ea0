"""Stage-2: distill the per-task teacher set into a single student model.

The pseudo-annotation for each batch is the mean of the frozen teachers'
probability maps computed on the same augmented images the student sees; the
student loss mixes ground truth and pseudo-annotation Dice terms with weight
lambda_kd on the distillation term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import DatasetSplits, ensemble_average, soft_dice_loss
from .model import ArchConfig, ModelBundle, build
from .seeding import derive_rng
from .train import TrainConfig, TrainRun, _fit, _scalar, _seg_batch, validate


@dataclass
class DistillConfig:
    """Knowledge-distillation settings for the student run.

    lambda_kd defaults to 0.83, the operative N/(N+1) weighting for five
    teachers that makes each teacher's pseudo-annotation count like the ground
    truth; steps/val_every override the TrainConfig values when set.
    """

    lambda_kd: float = 0.83
    steps: int | None = None
    val_every: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_kd <= 1.0:
            raise ValueError(f"lambda_kd must be in [0,1], got {self.lambda_kd}")
        if self.steps is not None and self.steps <= 0:
            raise ValueError(f"steps must be positive, got {self.steps}")


def teacher_ensemble(teachers: list, images: np.ndarray) -> np.ndarray:
    """Mean of the teachers' probability maps for one image or an image stack."""
    if not teachers:
        raise ValueError("teacher list is empty")
    images = np.asarray(images)
    preds = []
    for i, teacher in enumerate(teachers):
        p = np.asarray(teacher.predict(images))
        if p.shape != images.shape:
            raise ValueError(
                f"teacher {i} produced shape {p.shape} for input shape {images.shape}")
        preds.append(p)
    return ensemble_average(preds)


def _student_loss_terms(student_pred: torch.Tensor, gt_mask: torch.Tensor,
                        ensemble_pred: torch.Tensor, lambda_kd: float):
    if student_pred.shape != gt_mask.shape or student_pred.shape != ensemble_pred.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(student_pred.shape)}, gt {tuple(gt_mask.shape)}, "
            f"ensemble {tuple(ensemble_pred.shape)}")
    if not 0.0 <= lambda_kd <= 1.0:
        raise ValueError(f"lambda_kd must be in [0,1], got {lambda_kd}")
    loss_gt = soft_dice_loss(student_pred, gt_mask)
    loss_kd = soft_dice_loss(student_pred, ensemble_pred)
    total = (1.0 - lambda_kd) * loss_gt + lambda_kd * loss_kd
    return total, loss_gt, loss_kd


def student_loss(student_pred: torch.Tensor, gt_mask: torch.Tensor,
                 ensemble_pred: torch.Tensor, lambda_kd: float) -> torch.Tensor:
    """(1-lambda)·Dice(pred, gt) + lambda·Dice(pred, teacher ensemble)."""
    total, _, _ = _student_loss_terms(student_pred, gt_mask, ensemble_pred, lambda_kd)
    return total


def distill_student(splits: DatasetSplits, teachers: list[ModelBundle], arch: ArchConfig,
                    cfg: TrainConfig, dcfg: DistillConfig) -> TrainRun:
    """Train a fresh student against ground truth plus the frozen teacher ensemble."""
    if not teachers:
        raise ValueError("teacher list is empty")
    if not splits.train or not splits.val:
        raise ValueError("distillation needs nonempty train and val splits")
    for teacher in teachers:
        teacher.eval()
    if dcfg.steps is not None or dcfg.val_every is not None:
        from dataclasses import replace
        cfg = replace(cfg, steps=dcfg.steps or cfg.steps,
                      val_every=dcfg.val_every or cfg.val_every)
    bundle = build(arch, [], cfg.seed)
    seg_rng = derive_rng(cfg.seed, "seg")

    def compute_loss():
        x, y = _seg_batch(splits.train, seg_rng, cfg)
        with torch.no_grad():
            maps = torch.stack([teacher.seg_probs(x) for teacher in teachers])
            if maps.shape[2:] != x.shape[1:]:
                raise ValueError(f"teacher output shape {tuple(maps.shape[1:])} does not match "
                                 f"student input shape {tuple(x.shape)}")
            ensemble = maps.mean(dim=0)
        pred = bundle.seg_probs(x)
        total, loss_gt, loss_kd = _student_loss_terms(pred, y, ensemble, dcfg.lambda_kd)
        return total, {"loss_total": _scalar(total), "loss_gt": _scalar(loss_gt),
                       "loss_kd": _scalar(loss_kd)}

    parameters = list(bundle.trunk.parameters()) + list(bundle.heads["seg"].parameters())
    val_dice, history = _fit(bundle, parameters, cfg.steps, cfg, compute_loss,
                             validate_fn=lambda: validate(bundle, splits.val))
    return TrainRun(bundle, val_dice, history)
