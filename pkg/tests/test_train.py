import numpy as np
import pytest
from dataclasses import replace

from auxseg import (StageOneResult, TrainRun, build, lr_at, make_task, pretrain_aux,
                    pretrain_then_finetune, run_stage1, select_mode, stage1_single_task,
                    train_conventional, train_joint, transfer_shared, validate)
from auxseg.seeding import derive_seed
from auxseg.train import _fit_segmentation

from helpers import state_dicts_equal, tiny_arch, tiny_cfg, tiny_splits


class TestLrSchedule:
    def test_initial_value(self):
        assert lr_at(0, 2000, 1e-3, 0.9) == 1e-3

    def test_final_value(self):
        assert lr_at(2000, 2000, 1e-3, 0.9) == 0.0

    def test_halfway(self):
        assert lr_at(1000, 2000, 1e-3, 0.9) == pytest.approx(0.0005358867312681466, abs=1e-15)

    def test_step_beyond_total_errors(self):
        with pytest.raises(ValueError, match="outside"):
            lr_at(2001, 2000, 1e-3, 0.9)

    def test_monotone_nonincreasing(self):
        values = [lr_at(s, 100, 1e-3, 0.9) for s in range(101)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class _StubModel:
    def __init__(self, maps_by_nbytes):
        self.maps = maps_by_nbytes

    def predict(self, images):
        return self.maps(np.asarray(images))


class TestValidate:
    def test_perfect_stub_scores_one(self):
        splits = tiny_splits()
        model = _StubModel(lambda imgs: np.stack([s.mask.astype(float) for s in splits.val]))
        assert validate(model, splits.val) == 1.0

    def test_all_zeros_scores_zero(self):
        splits = tiny_splits()
        model = _StubModel(lambda imgs: np.zeros_like(imgs))
        assert validate(model, splits.val) == 0.0

    def test_permutation_invariant(self):
        splits = tiny_splits()
        val = splits.val

        def by_lookup(imgs):
            lookup = {s.image.tobytes(): s.mask.astype(float) for s in val}
            return np.stack([lookup[img.tobytes()] * 0.9 for img in imgs])

        model = _StubModel(by_lookup)
        forward = validate(model, val)
        backward = validate(model, list(reversed(val)))
        assert forward == backward

    def test_empty_val_errors(self):
        with pytest.raises(ValueError, match="empty"):
            validate(_StubModel(lambda x: x), [])


class TestSelection:
    def test_argmax(self):
        assert select_mode(0.6, 0.7) == "pretrain"
        assert select_mode(0.7, 0.6) == "joint"

    def test_tie_goes_to_joint(self):
        assert select_mode(0.5, 0.5) == "joint"

    def test_stage_one_result_rejects_inconsistent_choice(self):
        run = TrainRun(model=None, val_dice=0.5, history=[])
        with pytest.raises(ValueError, match="chosen_mode"):
            StageOneResult(task_name="x", chosen_mode="pretrain", val_dice_joint=0.7,
                           val_dice_pretrain=0.6, joint_run=run, pretrain_run=run)


class TestConventional:
    def test_same_seed_identical_history_and_params(self):
        splits = tiny_splits()
        cfg = tiny_cfg(steps=6, val_every=3)
        a = train_conventional(splits, tiny_arch(), cfg)
        b = train_conventional(splits, tiny_arch(), cfg)
        assert a.history == b.history
        assert state_dicts_equal(a.model.state_dict(), b.model.state_dict())

    def test_history_length_and_lr_sequence(self):
        splits = tiny_splits()
        cfg = tiny_cfg(steps=7, val_every=3)
        run = train_conventional(splits, tiny_arch(), cfg)
        assert len(run.history) == cfg.steps
        for record in run.history:
            assert record["lr"] == lr_at(record["step"], cfg.steps, cfg.lr0, cfg.power)

    def test_best_val_checkpointing(self):
        splits = tiny_splits()
        cfg = tiny_cfg(steps=9, val_every=3)
        run = train_conventional(splits, tiny_arch(), cfg)
        val_events = [r["val_dice"] for r in run.history if "val_dice" in r]
        assert run.val_dice == max(val_events)
        assert validate(run.model, splits.val) == run.val_dice

    def test_empty_split_errors(self):
        splits = tiny_splits()
        from auxseg import DatasetSplits
        with pytest.raises(ValueError, match="empty"):
            train_conventional(DatasetSplits(train=[], val=splits.val, test=[]),
                               tiny_arch(), tiny_cfg())


class TestJoint:
    @pytest.mark.parametrize("task_name", ["sdm_in", "rkb", "moco", "vicreg"])
    def test_zero_weight_matches_conventional_exactly(self, task_name):
        splits = tiny_splits()
        cfg = tiny_cfg(steps=5, val_every=5, aux_weights={task_name: 0.0})
        conventional = train_conventional(splits, tiny_arch(), replace(cfg, aux_weights={}))
        joint = train_joint(splits, make_task(task_name), tiny_arch(), cfg)
        assert state_dicts_equal(conventional.model.trunk.state_dict(),
                                 joint.model.trunk.state_dict())
        assert state_dicts_equal(conventional.model.heads["seg"].state_dict(),
                                 joint.model.heads["seg"].state_dict())
        seg_losses_conv = [r["loss_seg"] for r in conventional.history]
        seg_losses_joint = [r["loss_seg"] for r in joint.history]
        assert seg_losses_conv == seg_losses_joint

    def test_loss_is_weighted_sum_every_step(self):
        splits = tiny_splits()
        weight = 0.7
        cfg = tiny_cfg(steps=4, val_every=4, aux_weights={"sdm_in": weight})
        run = train_joint(splits, make_task("sdm_in"), tiny_arch(), cfg)
        for record in run.history:
            assert record["loss_total"] == pytest.approx(
                record["loss_seg"] + weight * record["loss_aux"], abs=1e-6)

    def test_determinism(self):
        splits = tiny_splits()
        cfg = tiny_cfg(steps=4, val_every=4)
        a = train_joint(splits, make_task("moco"), tiny_arch(), cfg)
        b = train_joint(splits, make_task("moco"), tiny_arch(), cfg)
        assert a.history == b.history
        assert state_dicts_equal(a.model.state_dict(), b.model.state_dict())


class TestPretrainFinetune:
    def test_composite_equals_manual_composition(self):
        splits = tiny_splits()
        cfg = tiny_cfg(steps=5, pretrain_steps=4, val_every=5)
        task = make_task("sdm_in")
        composite = pretrain_then_finetune(splits, task, tiny_arch(), cfg)

        pre = pretrain_aux(splits, task, tiny_arch(), cfg)
        finetune_cfg = replace(cfg, seed=derive_seed(cfg.seed, "finetune"))
        bundle = build(tiny_arch(), [], finetune_cfg.seed)
        # fresh seg head, then the pre-trained trunk moves over
        assert not state_dicts_equal(bundle.heads["seg"].state_dict(),
                                     pre.model.heads["seg"].state_dict())
        transfer_shared(pre.model, bundle)
        assert state_dicts_equal(bundle.trunk.state_dict(), pre.model.trunk.state_dict())
        val_dice, history = _fit_segmentation(bundle, splits, finetune_cfg)

        assert composite.pretrain_history == pre.history
        assert composite.history == history
        assert composite.val_dice == val_dice
        assert state_dicts_equal(composite.model.state_dict(), bundle.state_dict())

    def test_pretrain_aux_trains_only_trunk_and_task_head(self):
        splits = tiny_splits()
        cfg = tiny_cfg(pretrain_steps=3)
        task = make_task("sdm_in")
        initial = build(tiny_arch(), [task], cfg.seed)
        run = pretrain_aux(splits, task, tiny_arch(), cfg)
        assert state_dicts_equal(initial.heads["seg"].state_dict(),
                                 run.model.heads["seg"].state_dict())
        assert not state_dicts_equal(initial.trunk.state_dict(), run.model.trunk.state_dict())
        assert not state_dicts_equal(initial.heads["sdm_in"].state_dict(),
                                     run.model.heads["sdm_in"].state_dict())

    def test_sdm_pretrain_loss_decreases(self):
        splits = tiny_splits()
        cfg = tiny_cfg(pretrain_steps=30, batch_size=8)
        run = pretrain_aux(splits, make_task("sdm_in"), tiny_arch(), cfg)
        first = np.mean([r["loss_aux"] for r in run.history[:3]])
        last = np.mean([r["loss_aux"] for r in run.history[-3:]])
        assert last < first


class TestRunStage1:
    def _stub_runs(self, monkeypatch, scores):
        calls = []

        def fake_joint(splits, task, arch, cfg):
            calls.append((task.name, "joint"))
            return TrainRun(model=object(), val_dice=scores[task.name][0], history=[])

        def fake_pretrain(splits, task, arch, cfg):
            calls.append((task.name, "pretrain"))
            return TrainRun(model=object(), val_dice=scores[task.name][1], history=[])

        monkeypatch.setattr("auxseg.train.train_joint", fake_joint)
        monkeypatch.setattr("auxseg.train.pretrain_then_finetune", fake_pretrain)
        return calls

    def test_argmax_selection(self, monkeypatch):
        self._stub_runs(monkeypatch, {"moco": (0.6, 0.7)})
        result = stage1_single_task(None, make_task("moco"), tiny_arch(), tiny_cfg())
        assert result.chosen_mode == "pretrain"
        assert result.val_dice_joint == 0.6
        assert result.val_dice_pretrain == 0.7

    def test_tie_selects_joint(self, monkeypatch):
        self._stub_runs(monkeypatch, {"moco": (0.5, 0.5)})
        result = stage1_single_task(None, make_task("moco"), tiny_arch(), tiny_cfg())
        assert result.chosen_mode == "joint"

    def test_five_tasks_ten_runs(self, monkeypatch):
        names = ["sdm_in", "sdm_out", "rkb", "moco", "vicreg"]
        calls = self._stub_runs(monkeypatch, {n: (0.5, 0.6) for n in names})
        results = run_stage1(None, [make_task(n) for n in names], tiny_arch(), tiny_cfg())
        assert len(results) == 5
        assert len(calls) == 10
        assert [r.task_name for r in results] == names

    def test_failure_carries_task_name(self, monkeypatch):
        def boom(splits, task, arch, cfg):
            raise RuntimeError("exploded")

        monkeypatch.setattr("auxseg.train.train_joint", boom)
        with pytest.raises(RuntimeError, match="stage-1 task 'rkb'"):
            run_stage1(None, [make_task("rkb")], tiny_arch(), tiny_cfg())

    def test_no_tasks_errors(self):
        with pytest.raises(ValueError, match="at least one"):
            run_stage1(None, [], tiny_arch(), tiny_cfg())

    def test_serial_equals_parallel(self):
        splits = tiny_splits(count=18, hw=16)
        cfg = tiny_cfg(steps=3, pretrain_steps=2, val_every=3, batch_size=2)
        tasks = [make_task("sdm_in"), make_task("vicreg")]
        serial = run_stage1(splits, tasks, tiny_arch(), cfg, workers=1)
        parallel = run_stage1(splits, [make_task("sdm_in"), make_task("vicreg")],
                              tiny_arch(), cfg, workers=2)
        for a, b in zip(serial, parallel):
            assert a.task_name == b.task_name
            assert a.chosen_mode == b.chosen_mode
            assert a.val_dice_joint == b.val_dice_joint
            assert a.val_dice_pretrain == b.val_dice_pretrain
            assert state_dicts_equal(a.model.state_dict(), b.model.state_dict())
