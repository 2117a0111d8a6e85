"""Training-loop mechanics: momentum teacher, step order, determinism."""

import dataclasses

import numpy as np
import pytest

from c2l.augment import AugmentConfig, ImageBatch
from c2l.encoder import EncoderConfig, NetworkParams, init_params
from c2l.numerics import NonFiniteError, Tensor
from c2l.trainer import (
    TrainConfig,
    export_student,
    init_state,
    load_train_state,
    lr_at_epoch,
    momentum_update,
    save_train_checkpoint,
    train,
    train_step,
)


def tiny_encoder():
    return EncoderConfig(input_size=(8, 8), channels_per_stage=(4, 8),
                         feature_dim=8)


def tiny_config(**kw):
    base = dict(theta=0.5, tau=0.2, batch_size=4, queue_size=16, epochs=2,
                lr=0.05, weight_decay=0.0, lr_drop_epochs=(1,), seed=3,
                mixup_mode="full", encoder=tiny_encoder(),
                augment=AugmentConfig.disabled())
    base.update(kw)
    return TrainConfig(**base)


def tiny_images(m=12, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((m, 1, 8, 8), dtype=np.float32)


def toy_params(values, role):
    params = {name: Tensor(np.array(v, dtype=np.float64))
              for name, v in values.items()}
    return NetworkParams(params, role, tiny_encoder())


class TestTrainConfig:
    def test_defaults_are_valid(self):
        cfg = TrainConfig()
        assert cfg.theta == 0.999
        assert cfg.lr_drop_epochs == (30, 40, 50)

    def test_theta_out_of_range(self):
        with pytest.raises(ValueError, match="theta"):
            tiny_config(theta=1.5)

    def test_drops_must_increase(self):
        with pytest.raises(ValueError, match="increasing"):
            tiny_config(epochs=10, lr_drop_epochs=(4, 4))

    def test_drops_must_precede_end(self):
        with pytest.raises(ValueError, match="epochs"):
            tiny_config(epochs=5, lr_drop_epochs=(5,))

    def test_unknown_mixup_mode(self):
        with pytest.raises(ValueError, match="mixup_mode"):
            tiny_config(mixup_mode="extra")

    def test_bad_reduction(self):
        with pytest.raises(ValueError, match="reduction"):
            tiny_config(loss_reduction="median")


class TestMomentumUpdate:
    def _nets(self, seed=0):
        cfg = tiny_encoder()
        student = init_params(cfg, seed=seed)
        teacher = init_params(cfg, seed=seed + 1)
        teacher = NetworkParams(dict(teacher.items()), "teacher", cfg)
        return student, teacher

    def test_theta_one_keeps_teacher(self):
        student, teacher = self._nets()
        before = {n: p.data.copy() for n, p in teacher.items()}
        momentum_update(teacher, student, 1.0)
        for n, p in teacher.items():
            np.testing.assert_array_equal(p.data, before[n])

    def test_theta_zero_copies_student(self):
        student, teacher = self._nets()
        momentum_update(teacher, student, 0.0)
        for n, p in teacher.items():
            np.testing.assert_array_equal(p.data, student[n].data)

    def test_hand_value(self):
        """teacher 2.0, student 0.0, theta 0.999 gives 1.998."""
        student = toy_params({"a": [0.0, 0.0]}, "student")
        teacher = toy_params({"a": [2.0, 2.0]}, "teacher")
        momentum_update(teacher, student, 0.999)
        np.testing.assert_allclose(teacher["a"].data, 1.998, rtol=1e-12)

    def test_theta_half_matches_elementwise_formula(self):
        student, teacher = self._nets(seed=5)
        expect = {n: (0.5 * p.data.astype(np.float64)
                      + 0.5 * student[n].data.astype(np.float64)).astype(np.float32)
                  for n, p in teacher.items()}
        momentum_update(teacher, student, 0.5)
        for n, p in teacher.items():
            np.testing.assert_array_equal(p.data, expect[n])

    def test_shape_mismatch_rejected(self):
        student = toy_params({"a": [0.0, 0.0]}, "student")
        teacher = toy_params({"a": [1.0, 1.0, 1.0]}, "teacher")
        with pytest.raises(ValueError, match="shape"):
            momentum_update(teacher, student, 0.5)

    def test_name_mismatch_rejected(self):
        student = toy_params({"a": [0.0]}, "student")
        teacher = toy_params({"b": [1.0]}, "teacher")
        with pytest.raises(ValueError, match="names"):
            momentum_update(teacher, student, 0.5)

    def test_theta_out_of_range_rejected(self):
        student = toy_params({"a": [0.0]}, "student")
        teacher = toy_params({"a": [1.0]}, "teacher")
        with pytest.raises(ValueError, match="theta"):
            momentum_update(teacher, student, -0.1)

    def test_trajectory_recurrence_oracle(self):
        """k momentum updates equal the closed-form geometric sum."""
        theta = 0.7
        rng = np.random.default_rng(9)
        t0 = rng.normal(size=2)
        teacher = toy_params({"w": t0}, "teacher")
        students = [rng.normal(size=2) for _ in range(5)]
        for s in students:
            momentum_update(teacher, toy_params({"w": s}, "student"), theta)
        k = len(students)
        expect = theta ** k * t0
        for i, s in enumerate(students):
            expect = expect + (1 - theta) * theta ** (k - 1 - i) * s
        np.testing.assert_allclose(teacher["w"].data, expect, rtol=1e-12)


class TestTrainStep:
    def _setup(self, **kw):
        cfg = tiny_config(**kw)
        state = init_state(cfg, track_inserts=True)
        batch = ImageBatch(tiny_images()[: cfg.batch_size])
        return cfg, state, batch

    def test_theta_one_freezes_teacher_not_student(self):
        cfg, state, batch = self._setup(theta=1.0)
        t_before = {n: p.data.copy() for n, p in state.teacher.items()}
        s_before = {n: p.data.copy() for n, p in state.student.items()}
        train_step(state, batch, cfg)
        for n, p in state.teacher.items():
            np.testing.assert_array_equal(p.data, t_before[n])
        assert any((p.data != s_before[n]).any() for n, p in state.student.items())

    def test_queue_newest_entries_are_v2a_v2m_vm(self):
        cfg, state, batch = self._setup()
        sink = {}
        train_step(state, batch, cfg, debug_sink=sink)
        z = cfg.batch_size
        assert state.queue.insert_log == [("v2A", z), ("v2M", z), ("vm", z)]
        newest = state.queue.snapshot()[-3 * z:]
        expect = np.concatenate([sink["v2a"], sink["v2m"], sink["vm"]])
        np.testing.assert_array_equal(newest, expect.astype(np.float32))

    def test_step_metrics_deterministic(self):
        cfg, _, batch = self._setup()
        runs = []
        for _ in range(2):
            state = init_state(cfg)
            runs.append(train_step(state, batch, cfg))
        assert runs[0] == runs[1]

    @pytest.mark.parametrize("mode,per_step", [
        ("none", 1), ("traditional", 1), ("batch", 1),
        ("batch_lossM", 2), ("full", 3)])
    def test_insert_count_per_mode(self, mode, per_step):
        cfg, state, batch = self._setup(mixup_mode=mode)
        train_step(state, batch, cfg)
        assert state.queue.inserted == per_step * cfg.batch_size

    def test_none_mode_has_no_mixed_loss(self):
        cfg, state, batch = self._setup(mixup_mode="none")
        metrics = train_step(state, batch, cfg)
        assert metrics["loss_M"] == 0.0
        assert metrics["loss_A"] > 0.0

    def test_mixed_only_modes_have_no_plain_loss(self):
        for mode in ("batch", "traditional"):
            cfg, state, batch = self._setup(mixup_mode=mode)
            metrics = train_step(state, batch, cfg)
            assert metrics["loss_A"] == 0.0
            assert metrics["loss_M"] > 0.0

    def test_non_finite_error_names_iteration(self):
        cfg, state, batch = self._setup()
        state.iteration = 7
        state.student["head.w"].data[...] = np.inf
        with np.errstate(invalid="ignore"):
            with pytest.raises(NonFiniteError, match="iteration 7"):
                train_step(state, batch, cfg)

    def test_frozen_system_keeps_loss_constant(self):
        """theta=0 with lr=0 and a saturated queue: nothing can move."""
        cfg, state, batch = self._setup(mixup_mode="none", theta=0.0,
                                        queue_size=4)
        state = init_state(cfg)
        losses = [train_step(state, batch, cfg, lr=0.0)["loss_A"]
                  for _ in range(4)]
        assert losses[1] == losses[2] == losses[3]

    def test_gradients_cleared_after_step(self):
        # sgd_step itself errors if any parameter is missing its gradient,
        # so a successful step also proves every parameter received one.
        cfg, state, batch = self._setup()
        train_step(state, batch, cfg)
        assert all(p.grad is None for _, p in state.student.items())


class TestTrain:
    def test_lr_schedule_trace(self):
        cfg = tiny_config(epochs=6, lr_drop_epochs=(3, 4, 5))
        images = tiny_images(8)
        records = []
        train(cfg, images, metrics_fn=records.append)
        per_epoch = {}
        for r in records:
            per_epoch[r["epoch"]] = r["lr"]
        assert per_epoch == {e: cfg.lr / 10.0 ** sum(d <= e for d in (3, 4, 5))
                             for e in range(6)}
        assert per_epoch[0] == 0.05 and per_epoch[5] == pytest.approx(5e-5)

    def test_lr_at_epoch_defaults(self):
        cfg = TrainConfig()
        assert lr_at_epoch(cfg, 0) == 0.03
        assert lr_at_epoch(cfg, 30) == 0.003
        assert lr_at_epoch(cfg, 40) == pytest.approx(0.0003)
        assert lr_at_epoch(cfg, 59) == pytest.approx(3e-5)

    def test_two_runs_identical(self):
        cfg = tiny_config()
        images = tiny_images()
        logs = []
        finals = []
        for _ in range(2):
            records = []
            state = train(cfg, images, metrics_fn=records.append)
            logs.append(records)
            finals.append({n: p.data.copy() for n, p in state.student.items()})
        assert logs[0] == logs[1]
        for n in finals[0]:
            np.testing.assert_array_equal(finals[0][n], finals[1][n])

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg4 = tiny_config(epochs=4, lr_drop_epochs=())
        cfg2 = dataclasses.replace(cfg4, epochs=2)
        images = tiny_images()
        full = train(cfg4, images)
        half = train(cfg2, images)
        path = tmp_path / "mid.ckpt"
        save_train_checkpoint(half, str(path), cfg4.seed)
        resumed = load_train_state(str(path), cfg4)
        assert resumed.epoch == 2
        resumed = train(cfg4, images, state=resumed)
        for n, p in full.student.items():
            np.testing.assert_array_equal(p.data, resumed.student[n].data)
        np.testing.assert_array_equal(full.queue.buffer, resumed.queue.buffer)

    def test_checkpoint_cadence(self):
        cfg = tiny_config(epochs=4, lr_drop_epochs=(), checkpoint_every_epochs=2)
        calls = []
        train(cfg, tiny_images(8), checkpoint_fn=lambda s, e: calls.append(e))
        assert calls == [2, 4]

    def test_dataset_smaller_than_batch_rejected(self):
        with pytest.raises(ValueError, match="smaller"):
            train(tiny_config(), tiny_images(2))

    def test_loss_decreases_on_tiny_instance_task(self):
        """Telling 64 bump images apart is learnable; noise would not be."""
        rng = np.random.default_rng(4)
        yy, xx = np.mgrid[0:8, 0:8]
        images = np.empty((64, 1, 8, 8), dtype=np.float32)
        for i in range(64):
            cy, cx = rng.uniform(1.5, 5.5, size=2)
            img = (rng.uniform(0.1, 0.3)
                   + rng.uniform(0.4, 0.7)
                   * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                            / (2 * rng.uniform(0.8, 1.6) ** 2)))
            images[i, 0] = np.clip(img + rng.normal(0, 0.02, (8, 8)), 0.0, 1.0)
        cfg = tiny_config(epochs=40, lr_drop_epochs=(), lr=0.03, theta=0.9,
                          batch_size=8, queue_size=8, mixup_mode="none",
                          augment=AugmentConfig())
        records = []
        train(cfg, images, metrics_fn=records.append)
        losses = [r["loss_A"] for r in records]
        assert np.mean(losses[-32:]) < np.mean(losses[:32])


class TestExport:
    def test_export_contains_student_only(self, tmp_path):
        from c2l.checkpoint import load_student, tensor_roles
        cfg = tiny_config(epochs=1, lr_drop_epochs=())
        state = train(cfg, tiny_images(8))
        path = tmp_path / "enc.ckpt"
        export_student(state, str(path))
        assert tensor_roles(str(path)) == ["student"]
        loaded = load_student(str(path))
        for n, p in state.student.items():
            np.testing.assert_array_equal(loaded[n].data, p.data)
