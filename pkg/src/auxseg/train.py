"""Stage-1 training engine: schedules, the two co-solving modes, and selection.

Every run owns its RNG streams (see seeding.py) and model, so (task, mode) runs
are independent jobs; run_stage1 can execute them serially or in worker
processes with identical results. Checkpoint selection is best-validation-Dice
within a run; mode selection is the larger validation Dice, ties going to
joint training.
"""

from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .auxtask import AuxiliaryTask, BatchContext
from .core import DatasetSplits, Sample, mean_dice, soft_dice_loss
from .data import AugmentationConfig, augment
from .model import ArchConfig, ModelBundle, build, transfer_shared
from .seeding import derive_rng, derive_seed


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr0: float = 1e-3
    power: float = 0.9
    steps: int = 2000
    pretrain_steps: int = 1000
    val_every: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    aux_weights: dict[str, float] = field(default_factory=dict)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr0 <= 0 or self.power <= 0:
            raise ValueError(f"lr0 and power must be positive, got lr0={self.lr0}, power={self.power}")
        if self.steps <= 0 or self.pretrain_steps <= 0 or self.val_every <= 0:
            raise ValueError("steps, pretrain_steps and val_every must be positive")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")

    def aux_weight(self, task_name: str) -> float:
        return float(self.aux_weights.get(task_name, 1.0))


@dataclass
class TrainRun:
    """One completed training run: best-val model, its score, per-step log."""

    model: ModelBundle
    val_dice: float | None
    history: list[dict]
    pretrain_history: list[dict] | None = None


@dataclass
class StageOneResult:
    task_name: str
    chosen_mode: str
    val_dice_joint: float
    val_dice_pretrain: float
    joint_run: TrainRun
    pretrain_run: TrainRun

    def __post_init__(self) -> None:
        expected = select_mode(self.val_dice_joint, self.val_dice_pretrain)
        if self.chosen_mode != expected:
            raise ValueError(
                f"chosen_mode {self.chosen_mode!r} does not match scores "
                f"(joint={self.val_dice_joint}, pretrain={self.val_dice_pretrain})"
            )

    @property
    def model(self) -> ModelBundle:
        return (self.joint_run if self.chosen_mode == "joint" else self.pretrain_run).model

    @property
    def history(self) -> dict[str, list[dict]]:
        out = {"joint": self.joint_run.history, "pretrain": self.pretrain_run.history}
        if self.pretrain_run.pretrain_history is not None:
            out["pretrain_phase1"] = self.pretrain_run.pretrain_history
        return out


def _scalar(value: "torch.Tensor") -> float:
    return float(value.detach())


def lr_at(step: int, total: int, lr0: float, power: float) -> float:
    """Poly-annealed learning rate lr0 * (1 - step/total) ** power."""
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 - step / total) ** power


def validate(model, val: list[Sample], threshold: float = 0.5) -> float:
    """Mean per-sample hard Dice of the model's segmentation output (no augmentation)."""
    if not val:
        raise ValueError("validation set is empty")
    preds = model.predict(np.stack([s.image for s in val]))
    return mean_dice(list(preds), val, threshold)


def select_mode(val_dice_joint: float, val_dice_pretrain: float) -> str:
    """Pick the better training mode by validation Dice; tie goes to joint."""
    return "joint" if val_dice_joint >= val_dice_pretrain else "pretrain"


# ---------------------------------------------------------------------------
# Engine


def _seg_batch(train_samples: list[Sample], rng: np.random.Generator,
               cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    idx = rng.integers(0, len(train_samples), cfg.batch_size)
    images, masks = [], []
    for i in idx:
        s = augment(train_samples[int(i)], cfg.augment, rng)
        images.append(s.image)
        masks.append(s.mask)
    x = torch.from_numpy(np.stack(images)).unsqueeze(1)
    y = torch.from_numpy(np.stack(masks).astype(np.float32)).unsqueeze(1)
    return x, y


def _fit(bundle: ModelBundle, parameters, steps: int, cfg: TrainConfig, compute_loss,
         after_step=None, validate_fn=None) -> tuple[float | None, list[dict]]:
    """Optimize with RAdam under the poly schedule, keeping the best-val state."""
    optimizer = torch.optim.RAdam(list(parameters), lr=cfg.lr0, betas=cfg.betas,
                                  eps=cfg.eps, weight_decay=cfg.weight_decay)
    history: list[dict] = []
    best: tuple[float, dict] | None = None
    bundle.train()
    for step in range(steps):
        lr = lr_at(step, steps, cfg.lr0, cfg.power)
        for group in optimizer.param_groups:
            group["lr"] = lr
        loss, parts = compute_loss()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if after_step is not None:
            after_step()
        record = {"step": step, "lr": lr, **parts}
        if validate_fn is not None and ((step + 1) % cfg.val_every == 0 or step == steps - 1):
            score = validate_fn()
            bundle.train()
            record["val_dice"] = score
            if best is None or score > best[0]:
                best = (score, {k: v.detach().clone() for k, v in bundle.state_dict().items()})
        history.append(record)
    best_score = None
    if best is not None:
        best_score, state = best
        bundle.load_state_dict(state)
    bundle.eval()
    return best_score, history


def _check_splits(splits: DatasetSplits) -> None:
    if not splits.train:
        raise ValueError("training split is empty")
    if not splits.val:
        raise ValueError("validation split is empty")


def _fit_segmentation(bundle: ModelBundle, splits: DatasetSplits, cfg: TrainConfig):
    seg_rng = derive_rng(cfg.seed, "seg")

    def compute_loss():
        x, y = _seg_batch(splits.train, seg_rng, cfg)
        loss = soft_dice_loss(bundle.seg_probs(x), y)
        return loss, {"loss_total": _scalar(loss), "loss_seg": _scalar(loss), "loss_aux": None}

    parameters = list(bundle.trunk.parameters()) + list(bundle.heads["seg"].parameters())
    return _fit(bundle, parameters, cfg.steps, cfg, compute_loss,
                validate_fn=lambda: validate(bundle, splits.val))


def train_conventional(splits: DatasetSplits, arch: ArchConfig, cfg: TrainConfig) -> TrainRun:
    """Supervised segmentation training on the Dice loss (no auxiliary task)."""
    _check_splits(splits)
    bundle = build(arch, [], cfg.seed)
    val_dice, history = _fit_segmentation(bundle, splits, cfg)
    return TrainRun(bundle, val_dice, history)


def train_joint(splits: DatasetSplits, task: AuxiliaryTask, arch: ArchConfig,
                cfg: TrainConfig) -> TrainRun:
    """Co-solve segmentation and one auxiliary task via a weighted loss sum."""
    _check_splits(splits)
    bundle = build(arch, [task], cfg.seed)
    seg_rng = derive_rng(cfg.seed, "seg")
    aux_rng = derive_rng(cfg.seed, "aux", task.name)
    state = task.init_state(bundle)
    ctx = BatchContext(cfg.batch_size, cfg.augment)
    weight = cfg.aux_weight(task.name)

    def compute_loss():
        x, y = _seg_batch(splits.train, seg_rng, cfg)
        loss_seg = soft_dice_loss(bundle.seg_probs(x), y)
        batch = task.make_batch(splits.train, aux_rng, ctx)
        loss_aux, extra = task.loss(bundle, batch, state)
        loss = loss_seg + weight * loss_aux
        parts = {"loss_total": _scalar(loss), "loss_seg": _scalar(loss_seg),
                 "loss_aux": _scalar(loss_aux), **extra}
        return loss, parts

    parameters = list(bundle.parameters())
    val_dice, history = _fit(bundle, parameters, cfg.steps, cfg, compute_loss,
                             after_step=lambda: task.after_step(bundle, state),
                             validate_fn=lambda: validate(bundle, splits.val))
    return TrainRun(bundle, val_dice, history)


def pretrain_aux(splits: DatasetSplits, task: AuxiliaryTask, arch: ArchConfig,
                 cfg: TrainConfig) -> TrainRun:
    """Phase 1 of the pre-training mode: optimize trunk + task head on the aux loss only."""
    _check_splits(splits)
    bundle = build(arch, [task], cfg.seed)
    aux_rng = derive_rng(cfg.seed, "aux", task.name)
    state = task.init_state(bundle)
    ctx = BatchContext(cfg.batch_size, cfg.augment)

    def compute_loss():
        batch = task.make_batch(splits.train, aux_rng, ctx)
        loss_aux, extra = task.loss(bundle, batch, state)
        parts = {"loss_total": _scalar(loss_aux), "loss_seg": None,
                 "loss_aux": _scalar(loss_aux), **extra}
        return loss_aux, parts

    parameters = list(bundle.trunk.parameters()) + list(bundle.heads[task.name].parameters())
    _, history = _fit(bundle, parameters, cfg.pretrain_steps, cfg, compute_loss,
                      after_step=lambda: task.after_step(bundle, state))
    return TrainRun(bundle, None, history)


def pretrain_then_finetune(splits: DatasetSplits, task: AuxiliaryTask, arch: ArchConfig,
                           cfg: TrainConfig) -> TrainRun:
    """Pre-train the trunk on the auxiliary loss, transfer it, fine-tune on Dice.

    The fine-tune bundle is built fresh (randomly initialized segmentation
    head), receives the pre-trained trunk, and gets its own poly schedule.
    """
    pre = pretrain_aux(splits, task, arch, cfg)
    finetune_cfg = replace(cfg, seed=derive_seed(cfg.seed, "finetune"))
    bundle = build(arch, [], finetune_cfg.seed)
    transfer_shared(pre.model, bundle)
    val_dice, history = _fit_segmentation(bundle, splits, finetune_cfg)
    return TrainRun(bundle, val_dice, history, pretrain_history=pre.history)


def stage1_single_task(splits: DatasetSplits, task: AuxiliaryTask, arch: ArchConfig,
                       cfg: TrainConfig) -> StageOneResult:
    """Run both modes for one task and select by validation Dice."""
    joint_cfg = replace(cfg, seed=derive_seed(cfg.seed, "stage1", task.name, "joint"))
    pretrain_cfg = replace(cfg, seed=derive_seed(cfg.seed, "stage1", task.name, "pretrain"))
    joint_run = train_joint(splits, task, arch, joint_cfg)
    pretrain_run = pretrain_then_finetune(splits, task, arch, pretrain_cfg)
    chosen = select_mode(joint_run.val_dice, pretrain_run.val_dice)
    return StageOneResult(
        task_name=task.name,
        chosen_mode=chosen,
        val_dice_joint=joint_run.val_dice,
        val_dice_pretrain=pretrain_run.val_dice,
        joint_run=joint_run,
        pretrain_run=pretrain_run,
    )


def _stage1_worker(args) -> StageOneResult:
    splits, task, arch, cfg, threads = args
    torch.set_num_threads(threads)
    return stage1_single_task(splits, task, arch, cfg)


def run_stage1(splits: DatasetSplits, tasks: list[AuxiliaryTask], arch: ArchConfig,
               cfg: TrainConfig, workers: int = 1) -> list[StageOneResult]:
    """Both training modes for every task; per-task failures abort the experiment."""
    if not tasks:
        raise ValueError("run_stage1 needs at least one auxiliary task")
    names = [t.name for t in tasks]
    if len(names) != len(set(names)):
        raise ValueError(f"duplicate task names: {names}")
    if workers <= 1 or len(tasks) == 1:
        results = []
        for task in tasks:
            try:
                results.append(stage1_single_task(splits, task, arch, cfg))
            except Exception as exc:
                raise RuntimeError(f"stage-1 task '{task.name}' failed: {exc}") from exc
        return results
    threads = torch.get_num_threads()
    payloads = [(splits, task, arch, cfg, threads) for task in tasks]
    context = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
        futures = {task.name: pool.submit(_stage1_worker, payload)
                   for task, payload in zip(tasks, payloads)}
        results = []
        for task in tasks:
            try:
                results.append(futures[task.name].result())
            except Exception as exc:
                raise RuntimeError(f"stage-1 task '{task.name}' failed: {exc}") from exc
        return results


# ---------------------------------------------------------------------------
# Multi-task baselines (all auxiliary losses at once)


def train_joint_all(splits: DatasetSplits, tasks: list[AuxiliaryTask], arch: ArchConfig,
                    cfg: TrainConfig) -> TrainRun:
    """Segmentation plus the weighted sum of every auxiliary loss in one objective."""
    _check_splits(splits)
    bundle = build(arch, tasks, cfg.seed)
    seg_rng = derive_rng(cfg.seed, "seg")
    aux_rngs = {t.name: derive_rng(cfg.seed, "aux", t.name) for t in tasks}
    states = {t.name: t.init_state(bundle) for t in tasks}
    ctx = BatchContext(cfg.batch_size, cfg.augment)

    def compute_loss():
        x, y = _seg_batch(splits.train, seg_rng, cfg)
        loss_seg = soft_dice_loss(bundle.seg_probs(x), y)
        loss = loss_seg
        aux_total = 0.0
        for task in tasks:
            batch = task.make_batch(splits.train, aux_rngs[task.name], ctx)
            loss_aux, _ = task.loss(bundle, batch, states[task.name])
            loss = loss + cfg.aux_weight(task.name) * loss_aux
            aux_total += cfg.aux_weight(task.name) * _scalar(loss_aux)
        return loss, {"loss_total": _scalar(loss), "loss_seg": _scalar(loss_seg), "loss_aux": aux_total}

    def after_step():
        for task in tasks:
            task.after_step(bundle, states[task.name])

    val_dice, history = _fit(bundle, list(bundle.parameters()), cfg.steps, cfg, compute_loss,
                             after_step=after_step, validate_fn=lambda: validate(bundle, splits.val))
    return TrainRun(bundle, val_dice, history)


def multitask_pretrain_then_finetune(splits: DatasetSplits, tasks: list[AuxiliaryTask],
                                     arch: ArchConfig, cfg: TrainConfig) -> TrainRun:
    """Pre-train the trunk on all auxiliary losses jointly, then fine-tune on Dice."""
    _check_splits(splits)
    bundle = build(arch, tasks, cfg.seed)
    aux_rngs = {t.name: derive_rng(cfg.seed, "aux", t.name) for t in tasks}
    states = {t.name: t.init_state(bundle) for t in tasks}
    ctx = BatchContext(cfg.batch_size, cfg.augment)

    def compute_loss():
        loss = None
        for task in tasks:
            batch = task.make_batch(splits.train, aux_rngs[task.name], ctx)
            loss_aux, _ = task.loss(bundle, batch, states[task.name])
            term = cfg.aux_weight(task.name) * loss_aux
            loss = term if loss is None else loss + term
        return loss, {"loss_total": _scalar(loss), "loss_seg": None, "loss_aux": _scalar(loss)}

    def after_step():
        for task in tasks:
            task.after_step(bundle, states[task.name])

    parameters = list(bundle.trunk.parameters())
    for task in tasks:
        parameters += list(bundle.heads[task.name].parameters())
    _fit(bundle, parameters, cfg.pretrain_steps, cfg, compute_loss, after_step=after_step)

    finetune_cfg = replace(cfg, seed=derive_seed(cfg.seed, "finetune"))
    student = build(arch, [], finetune_cfg.seed)
    transfer_shared(bundle, student)
    val_dice, history = _fit_segmentation(student, splits, finetune_cfg)
    return TrainRun(student, val_dice, history)
