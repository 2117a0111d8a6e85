"""Representation quality: AUROC, frozen linear probe, full fine-tune.

AUROC follows the Mann-Whitney convention (half credit for ties) and is
computed from average ranks, which is algebraically identical to
counting all positive/negative pairs. The probe trains a per-class
logistic head on frozen features by full-batch gradient descent (the
objective is convex, so a zero-initialized head needs no seed); the
fine-tune variant trains every encoder parameter with minibatch SGD.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import numerics as N
from .encoder import clone_params, encoder_forward, init_params
from .numerics import Tape, Tensor, backward, sgd_step
from .rng import RngStream


class LabeledSet:
    """Images plus a [M, C] binary label matrix (multi-label)."""

    def __init__(self, images, labels):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels)
        if images.ndim != 4:
            raise ValueError(f"images must be [M,C,H,W], got {images.shape}")
        if labels.ndim != 2 or labels.shape[0] != images.shape[0]:
            raise ValueError(f"labels must be [M, classes] aligned with "
                             f"images, got {labels.shape}")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0/1")
        self.images = images
        self.labels = labels.astype(np.int8)

    @classmethod
    def from_dataset(cls, dataset):
        if dataset.labels is None:
            raise ValueError("dataset has no labels")
        return cls(dataset.images, dataset.labels)

    @property
    def num_classes(self):
        return self.labels.shape[1]

    def __len__(self):
        return self.images.shape[0]


@dataclass
class EvalConfig:
    lr: float = 0.1
    epochs: int = 100
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"invalid eval config: {self}")


PROBE_DEFAULTS = dict(lr=0.1, epochs=100)
FINETUNE_DEFAULTS = dict(lr=0.01, epochs=20)


def auroc(scores, labels):
    """P(random positive outranks random negative), ties half credit."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValueError(f"scores/labels must be equal-length 1-D, "
                         f"got {s.shape} and {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one positive and one negative")
    order = np.argsort(s, kind="stable")
    ordered = s[order]
    # average 1-based rank within each tie group
    edges = np.flatnonzero(np.r_[True, ordered[1:] != ordered[:-1], True])
    starts, ends = edges[:-1], edges[1:]
    ranks_sorted = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    ranks = np.empty_like(ranks_sorted)
    ranks[order] = ranks_sorted
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _resolve_encoder(encoder):
    if isinstance(encoder, str):
        return ckpt.load_student(encoder)
    return encoder


def encoder_features(params, images, batch_size=64):
    """Frozen forward in batches; rows are unit-norm [M, D] float32."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    for lo in range(0, images.shape[0], batch_size):
        feats = encoder_forward(params, images[lo:lo + batch_size])
        out.append(feats.data)
    return np.concatenate(out, axis=0)


def _per_class_auroc(scores, labels, what):
    """Column-wise AUROC; degenerate classes become None with a warning."""
    per_class = []
    for c in range(labels.shape[1]):
        col = labels[:, c]
        if col.min() == col.max():
            warnings.warn(f"{what}: class {c} has a single label value; "
                          f"AUROC undefined, excluded from mean")
            per_class.append(None)
        else:
            per_class.append(auroc(scores[:, c], col))
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise ValueError(f"{what}: every class is degenerate")
    return {"per_class": per_class, "mean": float(np.mean(defined))}


def train_logistic_head(features, labels, config):
    """Full-batch gradient descent on the convex logistic objective."""
    x = Tensor(features.astype(np.float32))
    targets = labels.astype(np.float32)
    d, c = features.shape[1], labels.shape[1]
    w = Tensor(np.zeros((d, c), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
    head = {"w": w, "b": b}
    for _ in range(config.epochs):
        with Tape() as tape:
            loss = N.sigmoid_cross_entropy(N.linear(x, w, b), targets)
        backward(loss, tape)
        sgd_step(head, config.lr, weight_decay=config.weight_decay)
    return w.data, b.data


def linear_probe(encoder, train, test, config=None):
    """Per-class test AUROC of a logistic head on frozen features."""
    if config is None:
        config = EvalConfig(**PROBE_DEFAULTS)
    params = _resolve_encoder(encoder)
    w, b = train_logistic_head(encoder_features(params, train.images),
                                train.labels, config)
    scores = encoder_features(params, test.images) @ w + b
    return _per_class_auroc(scores, test.labels, "linear_probe")


def fine_tune(encoder, train, test, config=None, encoder_config=None):
    """Train the whole encoder plus a logistic head; report test AUROC.

    Pass ``encoder=None`` with an ``encoder_config`` for the
    from-scratch control arm. The input parameters are copied, never
    mutated; the trained copy is returned under ``"encoder"``.
    """
    if config is None:
        config = EvalConfig(**FINETUNE_DEFAULTS)
    if encoder is None:
        if encoder_config is None:
            raise ValueError("from-scratch fine-tune needs encoder_config")
        params = init_params(encoder_config, seed=config.seed)
    else:
        params = clone_params(_resolve_encoder(encoder), role="student")
    d = params.config.feature_dim
    c = train.num_classes
    w = Tensor(np.zeros((d, c), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
    trainable = dict(params.items())
    trainable["probe.w"] = w
    trainable["probe.b"] = b
    m = len(train)
    z = min(config.batch_size, m)
    rng = RngStream(config.seed, "finetune")
    targets = train.labels.astype(np.float32)
    for epoch in range(config.epochs):
        order = rng.child("epoch", epoch).permutation(m)
        for lo in range(0, m - z + 1, z):
            rows = order[lo:lo + z]
            with Tape() as tape:
                feats = encoder_forward(params, train.images[rows])
                loss = N.sigmoid_cross_entropy(N.linear(feats, w, b),
                                               targets[rows])
            backward(loss, tape)
            sgd_step(trainable, config.lr,
                     weight_decay=config.weight_decay)
    scores = encoder_features(params, test.images) @ w.data + b.data
    result = _per_class_auroc(scores, test.labels, "fine_tune")
    result["encoder"] = params
    return result
