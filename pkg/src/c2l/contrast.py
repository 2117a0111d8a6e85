"""Memory queue of past features and the contrastive loss.

Each anchor row is scored against its positive (logit 0) and every queue
entry (logits 1..N); the loss is softmax cross-entropy with target 0.
Gradients flow only into the anchors: positives and queue entries enter
the computation as plain arrays, so the teacher can never be
backpropagated through by construction.
"""

from __future__ import annotations

import numpy as np

from . import numerics as N
from .numerics import Tensor

_UNIT_TOL = 1e-5

TAGS = ("v1A", "v1M", "v2A", "v2M", "vm")


def _require_unit_rows(arr, what):
    norms = np.sqrt((arr * arr).sum(axis=-1))
    if (np.abs(norms - 1.0) > _UNIT_TOL).any():
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(f"{what}: rows must be unit-norm (off by {worst:.2e})")


class FeatureBatch:
    """Z x D unit-norm feature rows with a provenance tag."""

    __slots__ = ("vectors", "tag")

    def __init__(self, vectors, tag):
        arr = np.asarray(vectors)
        if arr.ndim != 2:
            raise ValueError(f"FeatureBatch expects [Z,D], got shape {arr.shape}")
        if tag not in TAGS:
            raise ValueError(f"unknown provenance tag {tag!r}; choices: {TAGS}")
        _require_unit_rows(arr, f"FeatureBatch({tag})")
        self.vectors = arr
        self.tag = tag

    @property
    def z(self):
        return self.vectors.shape[0]

    def __repr__(self):
        return f"FeatureBatch(tag={self.tag}, shape={self.vectors.shape})"


class MemoryQueue:
    """Fixed-capacity FIFO ring of unit-norm feature vectors."""

    __slots__ = ("buffer", "head", "inserted", "insert_log")

    def __init__(self, buffer, head=0, track_inserts=False):
        self.buffer = buffer  # [N, D], row `head` is the next overwrite slot
        self.head = head
        self.inserted = 0  # total vectors ever inserted
        self.insert_log = [] if track_inserts else None

    @property
    def n(self):
        return self.buffer.shape[0]

    @property
    def d(self):
        return self.buffer.shape[1]

    def snapshot(self):
        """Contents ordered oldest to newest."""
        return np.roll(self.buffer, -self.head, axis=0)


def queue_init(n, d, rng, dtype=np.float32, track_inserts=False):
    """N standard-normal vectors, row-normalized; deterministic per stream."""
    if n < 1 or d < 2:
        raise ValueError(f"queue needs N >= 1 and D >= 2, got N={n}, D={d}")
    buf = rng.normal(size=(n, d)).astype(dtype)
    buf /= np.sqrt((buf * buf).sum(axis=1, keepdims=True))
    return MemoryQueue(buf, head=0, track_inserts=track_inserts)


def queue_insert(queue, vectors, tag=None):
    """Append rows in order, evicting the same number of oldest entries."""
    arr = vectors.vectors if isinstance(vectors, FeatureBatch) else np.asarray(vectors)
    if tag is None and isinstance(vectors, FeatureBatch):
        tag = vectors.tag
    z = arr.shape[0]
    if arr.ndim != 2 or arr.shape[1] != queue.d:
        raise ValueError(
            f"insert of shape {arr.shape} into queue of dim {queue.d}")
    if z > queue.n:
        raise ValueError(f"cannot insert {z} vectors into a queue of length {queue.n}")
    _require_unit_rows(arr, "queue_insert")
    idx = (queue.head + np.arange(z)) % queue.n
    queue.buffer[idx] = arr.astype(queue.buffer.dtype, copy=False)
    queue.head = int((queue.head + z) % queue.n)
    queue.inserted += z
    if queue.insert_log is not None:
        queue.insert_log.append((tag, z))


def _logits(anchors, pos_data, neg_data, queue_buf, tau):
    """Differentiable [Z, N+1] logits from shared negative scores."""
    a_data = anchors.data
    first = (a_data * pos_data).sum(axis=1, keepdims=True)
    out = Tensor(np.concatenate([first, neg_data], axis=1) / a_data.dtype.type(tau))
    out.requires_grad = N.is_tracing() and anchors.requires_grad

    def backward_fn(g):
        ga = (g[:, :1] * pos_data + g[:, 1:] @ queue_buf) / g.dtype.type(tau)
        return (ga.astype(a_data.dtype, copy=False),)

    N.record_op(out, (anchors,), backward_fn)
    return out


def _teacher_side(x, what):
    """Unwrap a non-differentiable operand, rejecting gradient carriers."""
    if isinstance(x, Tensor):
        if x.requires_grad:
            raise ValueError(f"{what} must not carry gradients (teacher side)")
        return x.data
    if isinstance(x, FeatureBatch):
        return x.vectors
    return np.asarray(x)


def contrastive_logits(anchor, positive, queue, tau):
    """Logits [anchor . positive, anchor . q_1, ..., anchor . q_N] / tau.

    Accepts a single D-vector or a batch [Z, D] of anchors; gradients
    flow into the anchors only.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if isinstance(anchor, Tensor) and anchor.ndim == 2:
        a, single = anchor, False
    else:
        data = anchor.data if isinstance(anchor, Tensor) else np.asarray(anchor)
        single = data.ndim == 1
        a = Tensor(np.atleast_2d(data))
    pos = _teacher_side(positive, "positive")
    pos = np.atleast_2d(pos)
    negs = a.data @ queue.buffer.T
    out = _logits(a, pos, negs, queue.buffer, tau)
    if single:
        return Tensor(out.data[0])
    return out


def info_nce_loss(logit_rows, reduction="mean"):
    """Mean (or sum) softmax cross-entropy against target index 0."""
    data = logit_rows.data if isinstance(logit_rows, Tensor) else np.asarray(logit_rows)
    if not np.isfinite(data).all():
        raise N.NonFiniteError("non-finite contrastive logits")
    t = logit_rows if isinstance(logit_rows, Tensor) else Tensor(data)
    return N.softmax_cross_entropy(t, 0, reduction=reduction)


def top1_accuracy(logit_rows):
    """Fraction of rows whose largest logit is the positive (index 0)."""
    data = logit_rows.data if isinstance(logit_rows, Tensor) else np.asarray(logit_rows)
    return float((data.argmax(axis=1) == 0).mean())


def c2l_loss(v1A, v2A, v1M, v2M, vm, queue, tau, reduction="mean",
             return_stats=False):
    """The two-part loss: loss_A pairs the plain views, loss_M pairs the
    mixed student view with the mixed teacher view AND the mixed teacher
    features.  Returns (loss_A, loss_M); teacher-side inputs must be
    gradient-free."""
    p2A = _teacher_side(v2A, "v2A")
    p2M = _teacher_side(v2M, "v2M")
    pm = _teacher_side(vm, "vm")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    negs_A = v1A.data @ queue.buffer.T
    logits_A = _logits(v1A, p2A, negs_A, queue.buffer, tau)
    negs_M = v1M.data @ queue.buffer.T  # shared by both loss_M terms
    logits_M1 = _logits(v1M, p2M, negs_M, queue.buffer, tau)
    logits_M2 = _logits(v1M, pm, negs_M, queue.buffer, tau)
    loss_A = info_nce_loss(logits_A, reduction)
    loss_M = N.add(info_nce_loss(logits_M1, reduction),
                   info_nce_loss(logits_M2, reduction))
    if return_stats:
        stats = {"top1": (top1_accuracy(logits_A) + top1_accuracy(logits_M1)
                          + top1_accuracy(logits_M2)) / 3.0}
        return loss_A, loss_M, stats
    return loss_A, loss_M
