"""The pretraining loop: paired views, momentum teacher, queue updates.

One step, in order: draw two augmented views of the same source batch;
mix both with ONE shared spec; student forward on the plain and mixed
view (recorded); teacher forward on its two views (never recorded);
feature-mix the teacher's plain features; contrastive losses; SGD step
on the student only; momentum update of the teacher; queue insert of
the teacher-side features (v2A, v2M, vm).

The teacher is guarded by a checksum around the backward pass: it can
change only through the momentum update. All per-step randomness is
keyed by (seed, "step", iteration), so resuming from a checkpoint
replays the identical tail of the run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import numerics as N
from .augment import AugmentConfig, ImageBatch, augment_batch
from .contrast import (
    FeatureBatch,
    c2l_loss,
    contrastive_logits,
    info_nce_loss,
    queue_init,
    queue_insert,
    top1_accuracy,
)
from .encoder import EncoderConfig, clone_params, encoder_forward, init_params
from .mixup import batch_mixup, feature_mixup, sample_mixspec
from .numerics import NonFiniteError, Tape, backward, sgd_step
from .rng import RngStream

MIXUP_MODES = ("none", "traditional", "batch", "batch_lossM", "full")


@dataclass
class TrainConfig:
    """Loop hyperparameters; defaults are the desk-scale recipe."""

    theta: float = 0.999
    tau: float = 0.2
    batch_size: int = 32
    queue_size: int = 2048
    epochs: int = 60
    lr: float = 0.03
    weight_decay: float = 1e-4
    lr_drop_epochs: tuple = (30, 40, 50)
    seed: int = 0
    loss_reduction: str = "mean"
    sgd_momentum: float = 0.0  # optional extension; 0 = plain SGD
    mixup_mode: str = "full"
    checkpoint_every_epochs: int = 0  # 0 disables periodic checkpoints
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must be in [0, 1], got {self.theta}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.queue_size < 1:
            raise ValueError(f"queue_size must be >= 1, got {self.queue_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        drops = tuple(int(e) for e in self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError(f"lr_drop_epochs must be strictly increasing: {drops}")
        if drops and (drops[0] < 1 or drops[-1] >= self.epochs):
            raise ValueError(
                f"lr_drop_epochs must lie in [1, epochs); got {drops} "
                f"for {self.epochs} epochs")
        self.lr_drop_epochs = drops
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"loss_reduction must be mean or sum, "
                             f"got {self.loss_reduction!r}")
        if self.mixup_mode not in MIXUP_MODES:
            raise ValueError(f"mixup_mode must be one of {MIXUP_MODES}, "
                             f"got {self.mixup_mode!r}")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ValueError(f"sgd_momentum must be in [0, 1), got {self.sgd_momentum}")


class TrainState:
    """Everything the loop mutates: both networks, queue, progress."""

    __slots__ = ("student", "teacher", "queue", "iteration", "epoch",
                 "rng", "velocity")

    def __init__(self, student, teacher, queue, rng, iteration=0, epoch=0):
        self.student = student
        self.teacher = teacher
        self.queue = queue
        self.rng = rng
        self.iteration = iteration
        self.epoch = epoch
        self.velocity = None


def init_state(config, track_inserts=False):
    """Fresh state: teacher starts as an exact copy of the student."""
    student = init_params(config.encoder, seed=config.seed)
    teacher = clone_params(student, role="teacher")
    queue = queue_init(config.queue_size, config.encoder.feature_dim,
                       RngStream(config.seed, "queue"),
                       track_inserts=track_inserts)
    return TrainState(student, teacher, queue, RngStream(config.seed))


def momentum_update(teacher, student, theta):
    """teacher <- theta * teacher + (1 - theta) * student, elementwise."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must be in [0, 1], got {theta}")
    if teacher.names() != student.names():
        raise ValueError("teacher/student parameter names differ")
    if theta == 1.0:
        return
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        if theta == 0.0:
            t.data[...] = s.data
        else:
            t.data[...] = theta * t.data + (1.0 - theta) * s.data


def _params_checksum(params):
    h = hashlib.blake2b(digest_size=16)
    for name, p in params.items():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.digest()


def _per_sample_mixup(batch, lams, perm):
    """Mixup with an independent lambda per row (comparison arm only)."""
    x = batch.images
    lam = lams.reshape(-1, 1, 1, 1).astype(x.dtype)
    return ImageBatch(lam * x + (1.0 - lam) * x[perm])


def _teacher_features(teacher, images):
    out = encoder_forward(teacher, images)
    return out.data


def train_step(state, batch, config, lr=None, debug_sink=None):
    """One full iteration; returns {loss_A, loss_M, top1}."""
    if lr is None:
        lr = config.lr
    mode = config.mixup_mode
    z = batch.z
    it_rng = state.rng.child("step", state.iteration)
    try:
        x1a = augment_batch(batch, it_rng.child("view", 0), config.augment)
        x2a = augment_batch(batch, it_rng.child("view", 1), config.augment)

        spec = None
        x1m = x2m = None
        if mode == "traditional":
            lams = it_rng.child("mix", "lam").uniform(0.0, 1.0, size=z)
            perm = it_rng.child("mix", "perm").permutation(z)
            x1m = _per_sample_mixup(x1a, lams, perm)
            x2m = _per_sample_mixup(x2a, lams, perm)
        elif mode != "none":
            spec = sample_mixspec(z, it_rng.child("mix"))
            x1m = batch_mixup(x1a, spec)
            x2m = batch_mixup(x2a, spec)

        plain_pair = mode in ("none", "batch_lossM", "full")
        mixed_pair = mode != "none"

        v2a = _teacher_features(state.teacher, x2a) if plain_pair else None
        v2m = _teacher_features(state.teacher, x2m) if mixed_pair else None
        vm = feature_mixup(v2a, spec) if mode == "full" else None

        with Tape() as tape:
            top1_parts = []
            terms = []
            loss_a_val = 0.0
            loss_m_val = 0.0
            v1a = encoder_forward(state.student, x1a) if plain_pair else None
            v1m = encoder_forward(state.student, x1m) if mixed_pair else None
            if mode == "full":
                loss_a, loss_m, stats = c2l_loss(
                    v1a, v2a, v1m, v2m, vm, state.queue, config.tau,
                    reduction=config.loss_reduction, return_stats=True)
                total = N.add(loss_a, loss_m)
                loss_a_val = loss_a.item()
                loss_m_val = loss_m.item()
                top1 = stats["top1"]
            else:
                if plain_pair:
                    logits_a = contrastive_logits(v1a, v2a, state.queue, config.tau)
                    loss_a = info_nce_loss(logits_a, config.loss_reduction)
                    terms.append(loss_a)
                    loss_a_val = loss_a.item()
                    top1_parts.append(top1_accuracy(logits_a))
                if mixed_pair:
                    logits_m = contrastive_logits(v1m, v2m, state.queue, config.tau)
                    loss_m = info_nce_loss(logits_m, config.loss_reduction)
                    terms.append(loss_m)
                    loss_m_val = loss_m.item()
                    top1_parts.append(top1_accuracy(logits_m))
                total = terms[0]
                for t in terms[1:]:
                    total = N.add(total, t)
                top1 = float(np.mean(top1_parts))

        if not (np.isfinite(loss_a_val) and np.isfinite(loss_m_val)):
            raise NonFiniteError("non-finite loss")

        guard = _params_checksum(state.teacher)
        backward(total, tape)
        sgd_step(state.student, lr,
                 weight_decay=config.weight_decay,
                 momentum=config.sgd_momentum,
                 velocity=_velocity_for(state, config))
        if _params_checksum(state.teacher) != guard:
            raise RuntimeError(
                f"iteration {state.iteration}: teacher changed during backward")
        momentum_update(state.teacher, state.student, config.theta)

        if plain_pair:
            queue_insert(state.queue, FeatureBatch(v2a, "v2A"))
        if mixed_pair:
            queue_insert(state.queue, FeatureBatch(v2m, "v2M"))
        if mode == "full":
            queue_insert(state.queue, FeatureBatch(vm, "vm"))
    except NonFiniteError as e:
        raise NonFiniteError(f"iteration {state.iteration}: {e}") from e

    if debug_sink is not None:
        debug_sink.update(x1a=x1a, x2a=x2a, x1m=x1m, x2m=x2m, spec=spec,
                          v2a=v2a, v2m=v2m, vm=vm)
    state.iteration += 1
    return {"loss_A": loss_a_val, "loss_M": loss_m_val, "top1": top1}


def _velocity_for(state, config):
    if config.sgd_momentum == 0.0:
        return None
    if state.velocity is None:
        state.velocity = {}
    return state.velocity


def lr_at_epoch(config, epoch):
    """Initial lr divided by 10 at each configured drop epoch."""
    drops = sum(1 for d in config.lr_drop_epochs if epoch >= d)
    return config.lr / (10.0 ** drops)


def _as_images(dataset):
    images = getattr(dataset, "images", dataset)
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[0] < 1:
        raise ValueError(f"dataset must be a nonempty [M,C,H,W] store, "
                         f"got shape {arr.shape}")
    return arr


def train(config, dataset, state=None, metrics_fn=None, checkpoint_fn=None):
    """Run the remaining epochs; returns the final state.

    ``state`` resumes a partially trained run (see load_train_state);
    ``metrics_fn`` receives one record per step; ``checkpoint_fn(state,
    epoch)`` fires after each epoch whose index matches the cadence.
    """
    images = _as_images(dataset)
    m = images.shape[0]
    z = config.batch_size
    if m < z:
        raise ValueError(f"dataset of {m} images is smaller than one batch ({z})")
    if state is None:
        state = init_state(config)
    steps_per_epoch = m // z
    for epoch in range(state.epoch, config.epochs):
        lr = lr_at_epoch(config, epoch)
        order = state.rng.child("epoch", epoch).permutation(m)
        for b in range(steps_per_epoch):
            rows = order[b * z:(b + 1) * z]
            step_metrics = train_step(state, ImageBatch(images[rows]), config, lr)
            if metrics_fn is not None:
                record = {"step": state.iteration - 1, "epoch": epoch, "lr": lr}
                record.update(step_metrics)
                metrics_fn(record)
        state.epoch = epoch + 1
        cadence = config.checkpoint_every_epochs
        if checkpoint_fn is not None and cadence and (epoch + 1) % cadence == 0:
            checkpoint_fn(state, epoch + 1)
    return state


def save_train_checkpoint(state, path, seed):
    """Full resumable snapshot: both networks, queue, progress."""
    ckpt.save_full(path, state.student, state.teacher, state.queue,
                   state.iteration, state.epoch, seed)


def load_train_state(path, config):
    """Rebuild a TrainState from a full checkpoint; config must match."""
    pieces = ckpt.load_full(path, expected_config=config.encoder)
    if pieces["seed"] != config.seed:
        raise ckpt.CheckpointError(
            f"checkpoint seed {pieces['seed']} differs from config seed "
            f"{config.seed}; the resumed tail would not match")
    state = TrainState(pieces["student"], pieces["teacher"], pieces["queue"],
                       RngStream(config.seed),
                       iteration=pieces["iteration"], epoch=pieces["epoch"])
    return state


def export_student(state, path):
    """Student-only export: the pretrained encoder, nothing else."""
    ckpt.save_student(path, state.student,
                      progress={"iteration": state.iteration,
                                "epoch": state.epoch})
