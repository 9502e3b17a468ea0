"""Auxiliary-task assisted segmentation training with ensemble distillation."""

from .core import (DatasetSplits, Sample, dice_score, ensemble_average, mean_dice,
                   soft_dice_loss)
from .data import (AugmentationConfig, SyntheticDataConfig, augment, generate_synthetic,
                   load_directory, save_dataset, split)
from .auxtask import (AuxiliaryTask, BatchContext, available_tasks, make_task, moco_loss,
                      normalize_distance_map, rkb_make_example, rkb_permutations, sdm,
                      sdm_loss, two_view_augment, vicreg_loss)
from .model import (ARCH_PRESETS, ArchConfig, CheckpointError, ModelBundle, build,
                    load_checkpoint, save_checkpoint, transfer_shared)
from .train import (StageOneResult, TrainConfig, TrainRun, lr_at,
                    multitask_pretrain_then_finetune, pretrain_aux, pretrain_then_finetune,
                    run_stage1, select_mode, stage1_single_task, train_conventional,
                    train_joint, train_joint_all, validate)
from .distill import DistillConfig, distill_student, student_loss, teacher_ensemble
from .experiment import (ConfigError, ExperimentConfig, build_dataset, evaluate_checkpoint,
                         format_report, load_config, parse_config, run_experiment)

__all__ = [name for name in dir() if not name.startswith("_")]
