"""Declarative experiment configuration, pipeline orchestration, and reporting.

An experiment is one YAML file (flat sections, unknown keys rejected) that
names the data source, the auxiliary tasks, the architecture preset, training
budgets, the distillation weight, and which baselines to run. Each pipeline
phase writes its artifacts plus a DONE marker into its own directory under the
output dir, so an interrupted run resumes at phase granularity.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import multiprocessing
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .auxtask import AuxiliaryTask, available_tasks, make_task
from .core import DatasetSplits, mean_dice
from .data import (AugmentationConfig, SyntheticDataConfig, generate_synthetic,
                   load_directory, split)
from .distill import DistillConfig, distill_student, teacher_ensemble
from .model import ARCH_PRESETS, ArchConfig, load_checkpoint, save_checkpoint
from .seeding import derive_seed
from .train import (TrainConfig, TrainRun, multitask_pretrain_then_finetune,
                    stage1_single_task, train_conventional, train_joint_all, validate)

BASELINE_NAMES = ("conventional", "joint_all", "mt_pretrain", "ensemble")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    synthetic: SyntheticDataConfig | None
    directory: str | None
    fractions: tuple[float, float, float] | None
    counts: dict[str, int] | None
    seed: int


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    data: DataSection
    tasks: dict[str, dict]
    arch: ArchConfig
    train: TrainConfig
    distill: DistillConfig
    baselines: list[str]
    raw: dict

    def make_tasks(self) -> list[AuxiliaryTask]:
        return [make_task(name, hp) for name, hp in self.tasks.items()]


def _check_keys(section: dict, allowed: set[str], context: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {context}; allowed: {sorted(allowed)}")


def _as_tuple(value):
    return tuple(value) if isinstance(value, list) else value


def _parse_data(section: dict) -> DataSection:
    _check_keys(section, {"synthetic", "directory", "fractions", "counts", "seed"}, "data")
    synthetic = None
    directory = section.get("directory")
    if "synthetic" in section:
        if directory is not None:
            raise ConfigError("data: give either 'synthetic' or 'directory', not both")
        syn = dict(section["synthetic"])
        _check_keys(syn, {f.name for f in dataclasses.fields(SyntheticDataConfig)}, "data.synthetic")
        synthetic = SyntheticDataConfig(**syn)
    elif directory is None:
        raise ConfigError("data: needs 'synthetic' or 'directory'")
    fractions = section.get("fractions")
    counts = section.get("counts")
    if fractions is not None and counts is not None:
        raise ConfigError("data: give either 'fractions' or 'counts', not both")
    if fractions is not None:
        if len(fractions) != 3:
            raise ConfigError(f"data.fractions needs 3 entries, got {fractions}")
        fractions = tuple(float(f) for f in fractions)
    if counts is not None:
        _check_keys(counts, {"train", "val", "test"}, "data.counts")
        counts = {k: int(v) for k, v in counts.items()}
        if set(counts) != {"train", "val", "test"}:
            raise ConfigError("data.counts needs train, val and test entries")
    if fractions is None and counts is None:
        fractions = (0.6, 0.1, 0.3)
    return DataSection(synthetic=synthetic, directory=directory, fractions=fractions,
                       counts=counts, seed=int(section.get("seed", 0)))


def _parse_augment(section: dict) -> AugmentationConfig:
    allowed = {f.name for f in dataclasses.fields(AugmentationConfig)}
    _check_keys(section, allowed, "augment")
    return AugmentationConfig(**{k: _as_tuple(v) for k, v in section.items()})


def _parse_arch(section: dict) -> ArchConfig:
    allowed = {"preset"} | {f.name for f in dataclasses.fields(ArchConfig)}
    _check_keys(section, allowed, "arch")
    preset = section.get("preset", "desk")
    if preset not in ARCH_PRESETS:
        raise ConfigError(f"unknown arch preset {preset!r}; available: {sorted(ARCH_PRESETS)}")
    arch = ARCH_PRESETS[preset]
    overrides = {k: _as_tuple(v) for k, v in section.items() if k != "preset"}
    return replace(arch, **overrides) if overrides else arch


def _parse_train(section: dict, default_seed: int, augment: AugmentationConfig) -> TrainConfig:
    allowed = {f.name for f in dataclasses.fields(TrainConfig)} - {"augment"}
    _check_keys(section, allowed, "train")
    kwargs = {k: _as_tuple(v) for k, v in section.items()}
    kwargs.setdefault("seed", default_seed)
    return TrainConfig(augment=augment, **kwargs)


def _parse_distill(section: dict) -> DistillConfig:
    _check_keys(section, {f.name for f in dataclasses.fields(DistillConfig)}, "distill")
    return DistillConfig(**section)


def parse_config(mapping: dict) -> ExperimentConfig:
    """Validate a loaded config mapping; unknown keys anywhere are errors."""
    if not isinstance(mapping, dict):
        raise ConfigError(f"config root must be a mapping, got {type(mapping).__name__}")
    _check_keys(mapping, {"seed", "output_dir", "data", "tasks", "arch", "train",
                          "distill", "augment", "baselines"}, "config")
    for required in ("seed", "output_dir", "data", "tasks"):
        if required not in mapping:
            raise ConfigError(f"config: missing required key '{required}'")
    seed = int(mapping["seed"])
    data = _parse_data(mapping["data"])
    tasks_section = mapping["tasks"]
    if not isinstance(tasks_section, dict) or not tasks_section:
        raise ConfigError("tasks: needs a non-empty mapping of task name -> hyperparams")
    tasks: dict[str, dict] = {}
    for name, hp in tasks_section.items():
        if name not in available_tasks():
            raise ConfigError(f"unknown task {name!r}; available: {available_tasks()}")
        tasks[name] = {k: _as_tuple(v) for k, v in (hp or {}).items()}
    augment = _parse_augment(mapping.get("augment", {}) or {})
    arch = _parse_arch(mapping.get("arch", {}) or {})
    train = _parse_train(mapping.get("train", {}) or {}, seed, augment)
    distill = _parse_distill(mapping.get("distill", {}) or {})
    baselines = list(mapping.get("baselines", []) or [])
    for b in baselines:
        if b not in BASELINE_NAMES:
            raise ConfigError(f"unknown baseline {b!r}; available: {BASELINE_NAMES}")
    return ExperimentConfig(seed=seed, output_dir=str(mapping["output_dir"]), data=data,
                            tasks=tasks, arch=arch, train=train, distill=distill,
                            baselines=baselines, raw=mapping)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        mapping = yaml.safe_load(fh)
    return parse_config(mapping)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_dataset(cfg: ExperimentConfig) -> DatasetSplits:
    """Materialize the configured dataset and split it deterministically."""
    if cfg.data.synthetic is not None:
        samples = generate_synthetic(cfg.data.synthetic)
    else:
        samples = load_directory(cfg.data.directory)
    if cfg.data.counts is not None:
        total = sum(cfg.data.counts.values())
        if total != len(samples):
            raise ConfigError(f"data.counts sum to {total} but the dataset has {len(samples)} samples")
        fractions = tuple(cfg.data.counts[k] / total for k in ("train", "val", "test"))
    else:
        fractions = cfg.data.fractions
    return split(samples, fractions, cfg.data.seed)


# ---------------------------------------------------------------------------
# Phase plumbing


def _write_history(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def _save_run(run: TrainRun, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.model, directory / "best.ckpt")
    _write_history(directory / "history.jsonl", run.history)
    if run.pretrain_history is not None:
        _write_history(directory / "pretrain_history.jsonl", run.pretrain_history)


def _phase_done(pdir: Path) -> bool:
    return (pdir / "DONE").exists() and (pdir / "result.json").exists()


def _finish_phase(pdir: Path, result: dict, started: float) -> dict:
    result = dict(result)
    result["wall_clock_s"] = time.perf_counter() - started
    (pdir / "result.json").write_text(json.dumps(result, indent=2))
    (pdir / "DONE").touch()
    return result


def _prepare_phase(exp: Path, name: str) -> Path | None:
    """Return the phase dir to (re)run, or None when the phase is complete."""
    pdir = exp / name
    if _phase_done(pdir):
        return None
    if pdir.exists():
        shutil.rmtree(pdir)
    pdir.mkdir(parents=True)
    return pdir


def _load_result(exp: Path, name: str) -> dict:
    return json.loads((exp / name / "result.json").read_text())


def _run_stage1_phase(splits: DatasetSplits, task: AuxiliaryTask, arch: ArchConfig,
                      cfg: TrainConfig, pdir: Path) -> dict:
    started = time.perf_counter()
    result = stage1_single_task(splits, task, arch, cfg)
    _save_run(result.joint_run, pdir / "joint")
    _save_run(result.pretrain_run, pdir / "pretrain")
    return _finish_phase(pdir, {
        "val_dice_joint": result.val_dice_joint,
        "val_dice_pretrain": result.val_dice_pretrain,
        "chosen_mode": result.chosen_mode,
    }, started)


def _stage1_phase_worker(args) -> dict:
    splits, task, arch, cfg, pdir, threads = args
    torch.set_num_threads(threads)
    return _run_stage1_phase(splits, task, arch, cfg, Path(pdir))


# ---------------------------------------------------------------------------
# The pipeline


def run_experiment(cfg: ExperimentConfig, resume: bool = False, force: bool = False,
                   workers: int = 1) -> dict:
    """Run baselines, stage 1 over all tasks, stage 2 distillation, and report.

    Completed phases (DONE marker present) are skipped; without --resume a
    previously used output dir is refused unless force is set.
    """
    exp = Path(cfg.output_dir)
    config_text = yaml.safe_dump(cfg.raw, sort_keys=True)
    stored = exp / "config.yaml"
    if stored.exists():
        if force:
            shutil.rmtree(exp)
        elif not resume:
            raise RuntimeError(
                f"output dir {exp} already holds an experiment; pass resume to continue "
                f"or force to start over")
        elif yaml.safe_load(stored.read_text()) != cfg.raw:
            raise RuntimeError(f"stored config in {exp} differs from the given config; "
                               f"refusing to resume")
    exp.mkdir(parents=True, exist_ok=True)
    if not stored.exists():
        stored.write_text(config_text)

    splits = build_dataset(cfg)
    tasks = cfg.make_tasks()
    train_cfg = cfg.train
    results: dict[str, dict] = {}

    def run_phase(name: str, fn) -> None:
        pdir = _prepare_phase(exp, name)
        if pdir is None:
            results[name] = _load_result(exp, name)
            return
        started = time.perf_counter()
        try:
            result = fn(pdir)
        except Exception as exc:
            raise RuntimeError(f"phase {name} failed: {exc}") from exc
        results[name] = _finish_phase(pdir, result, started)

    if "conventional" in cfg.baselines:
        def conventional_phase(pdir: Path) -> dict:
            run = train_conventional(splits, cfg.arch,
                                     replace(train_cfg, seed=derive_seed(train_cfg.seed, "baseline", "conventional")))
            _save_run(run, pdir)
            return {"val_dice": run.val_dice}
        run_phase("baselines/conventional", conventional_phase)

    pending = [task for task in tasks if not _phase_done(exp / "stage1" / task.name)]
    if pending and workers > 1:
        threads = torch.get_num_threads()
        payloads = []
        for task in pending:
            pdir = _prepare_phase(exp, f"stage1/{task.name}")
            payloads.append((splits, task, cfg.arch, train_cfg, str(pdir), threads))
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
            futures = {task.name: pool.submit(_stage1_phase_worker, payload)
                       for task, payload in zip(pending, payloads)}
            for task in pending:
                try:
                    futures[task.name].result()
                except Exception as exc:
                    raise RuntimeError(f"phase stage1/{task.name} failed: {exc}") from exc
    else:
        for task in pending:
            pdir = _prepare_phase(exp, f"stage1/{task.name}")
            try:
                _run_stage1_phase(splits, task, cfg.arch, train_cfg, pdir)
            except Exception as exc:
                raise RuntimeError(f"phase stage1/{task.name} failed: {exc}") from exc
    for task in tasks:
        results[f"stage1/{task.name}"] = _load_result(exp, f"stage1/{task.name}")

    if "joint_all" in cfg.baselines:
        def joint_all_phase(pdir: Path) -> dict:
            run = train_joint_all(splits, cfg.make_tasks(), cfg.arch,
                                  replace(train_cfg, seed=derive_seed(train_cfg.seed, "baseline", "joint_all")))
            _save_run(run, pdir)
            return {"val_dice": run.val_dice}
        run_phase("baselines/joint_all", joint_all_phase)

    if "mt_pretrain" in cfg.baselines:
        def mt_pretrain_phase(pdir: Path) -> dict:
            run = multitask_pretrain_then_finetune(splits, cfg.make_tasks(), cfg.arch,
                                                   replace(train_cfg, seed=derive_seed(train_cfg.seed, "baseline", "mt_pretrain")))
            _save_run(run, pdir)
            return {"val_dice": run.val_dice}
        run_phase("baselines/mt_pretrain", mt_pretrain_phase)

    def stage2_phase(pdir: Path) -> dict:
        teachers = _load_teachers(exp, cfg, results)
        run = distill_student(splits, teachers, cfg.arch,
                              replace(train_cfg, seed=derive_seed(train_cfg.seed, "stage2")),
                              cfg.distill)
        _save_run(run, pdir / "student")
        return {"val_dice": run.val_dice, "lambda_kd": cfg.distill.lambda_kd}
    run_phase("stage2", stage2_phase)

    report = _build_report(exp, cfg, splits, results)
    (exp / "report.json").write_text(json.dumps(report, indent=2))
    (exp / "summary.txt").write_text(format_report(report))
    return report


def _load_teachers(exp: Path, cfg: ExperimentConfig, results: dict) -> list:
    teachers = []
    for name in cfg.tasks:
        chosen = results[f"stage1/{name}"]["chosen_mode"]
        teachers.append(load_checkpoint(exp / "stage1" / name / chosen / "best.ckpt"))
    return teachers


def _build_report(exp: Path, cfg: ExperimentConfig, splits: DatasetSplits, results: dict) -> dict:
    test = splits.test
    test_images = np.stack([s.image for s in test])

    def test_dice_of(path: Path) -> float:
        return validate(load_checkpoint(path), test)

    stage1 = {}
    for name in cfg.tasks:
        r = results[f"stage1/{name}"]
        stage1[name] = {
            "val_dice_joint": r["val_dice_joint"],
            "val_dice_pretrain": r["val_dice_pretrain"],
            "chosen_mode": r["chosen_mode"],
            "test_dice": test_dice_of(exp / "stage1" / name / r["chosen_mode"] / "best.ckpt"),
        }

    baselines = {}
    for name in ("conventional", "joint_all", "mt_pretrain"):
        if name in cfg.baselines:
            baselines[name] = {
                "val_dice": results[f"baselines/{name}"]["val_dice"],
                "test_dice": test_dice_of(exp / "baselines" / name / "best.ckpt"),
            }
    if "ensemble" in cfg.baselines:
        teachers = _load_teachers(exp, cfg, results)
        ensemble_probs = teacher_ensemble(teachers, test_images)
        baselines["ensemble"] = {"test_dice": mean_dice(list(ensemble_probs), test)}

    wall_clock = {name: r.get("wall_clock_s") for name, r in results.items()}
    return {
        "seed": cfg.seed,
        "data_seed": cfg.data.seed,
        "config_hash": config_hash(cfg),
        "tasks": list(cfg.tasks),
        "n_samples": {"train": len(splits.train), "val": len(splits.val), "test": len(test)},
        "stage1": stage1,
        "baselines": baselines,
        "student": {
            "val_dice": results["stage2"]["val_dice"],
            "test_dice": test_dice_of(exp / "stage2" / "student" / "best.ckpt"),
            "lambda_kd": results["stage2"]["lambda_kd"],
        },
        "wall_clock_s": wall_clock,
    }


def format_report(report: dict) -> str:
    """Human-readable summary; Dice as percent with 2 decimals."""

    def pct(x) -> str:
        return f"{100 * x:6.2f}" if x is not None else "   n/a"

    lines = [
        f"experiment report  (seed {report['seed']}, config {report['config_hash'][:12]})",
        "samples: {train} train / {val} val / {test} test".format(**report["n_samples"]),
        "",
        "stage 1: validation Dice (%) per task and mode",
        f"  {'task':<10} {'joint':>8} {'pretrain':>9}  chosen",
    ]
    for name, row in report["stage1"].items():
        lines.append(f"  {name:<10} {pct(row['val_dice_joint']):>8} "
                     f"{pct(row['val_dice_pretrain']):>9}  {row['chosen_mode']}")
    lines += ["", "test Dice (%)"]
    for name, row in report["baselines"].items():
        lines.append(f"  {name:<14} {pct(row['test_dice'])}")
    lines.append(f"  {'student (ours)':<14} {pct(report['student']['test_dice'])}")
    lines += ["", "teacher test Dice (%)"]
    for name, row in report["stage1"].items():
        lines.append(f"  {name:<10} {pct(row['test_dice'])}  ({row['chosen_mode']})")
    lines.append("")
    return "\n".join(lines)


def evaluate_checkpoint(checkpoint: str | Path, *, config: str | Path | None = None,
                        data_dir: str | Path | None = None,
                        fractions: tuple[float, float, float] | None = None,
                        seed: int | None = None, part: str = "test") -> float:
    """Mean Dice of a stored model on one split of a dataset."""
    ckpt_path = Path(checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    bundle = load_checkpoint(ckpt_path)
    if (config is None) == (data_dir is None):
        raise ValueError("give exactly one of config or data_dir")
    if config is not None:
        cfg = load_config(config)
        splits = build_dataset(cfg)
    else:
        samples = load_directory(data_dir)
        if part == "all":
            return validate(bundle, samples)
        if fractions is None or seed is None:
            raise ValueError("evaluating one split of a directory needs fractions and seed")
        splits = split(samples, tuple(fractions), seed)
    if part == "all":
        return validate(bundle, splits.train + splits.val + splits.test)
    if part not in ("train", "val", "test"):
        raise ValueError(f"unknown split {part!r}")
    return validate(bundle, getattr(splits, part))
