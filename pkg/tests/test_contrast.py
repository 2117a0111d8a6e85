"""Memory queue semantics and the contrastive loss oracles."""

import math

import numpy as np
import pytest

from c2l import numerics as N
from c2l.contrast import (
    FeatureBatch,
    MemoryQueue,
    c2l_loss,
    contrastive_logits,
    info_nce_loss,
    queue_init,
    queue_insert,
    top1_accuracy,
)
from c2l.numerics import Tape, Tensor, backward
from c2l.rng import RngStream

from helpers import check_gradients


def _unit_rows(z, d, rng, dtype=np.float64):
    v = rng.normal(size=(z, d)).astype(dtype)
    return v / np.sqrt((v * v).sum(axis=1, keepdims=True))


class TestQueueInit:
    def test_rows_are_unit_norm(self):
        q = queue_init(64, 16, RngStream(0, "q"))
        norms = np.sqrt((q.buffer * q.buffer).sum(axis=1))
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_deterministic_per_stream(self):
        a = queue_init(32, 8, RngStream(7, "q"))
        b = queue_init(32, 8, RngStream(7, "q"))
        assert (a.buffer == b.buffer).all()

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValueError):
            queue_init(0, 8, RngStream(0))
        with pytest.raises(ValueError):
            queue_init(8, 1, RngStream(0))

    def test_dtype(self):
        assert queue_init(4, 4, RngStream(0)).buffer.dtype == np.float32
        assert queue_init(4, 4, RngStream(0), dtype=np.float64).buffer.dtype == np.float64


class TestQueueInsert:
    def test_fifo_eviction(self):
        """Inserting three pairs into capacity 4 leaves the last two pairs."""
        d = 3
        eye = np.eye(d)
        rows = {k: eye[i % d] for i, k in enumerate("abcdef")}
        q = MemoryQueue(np.stack([rows["a"], rows["b"], rows["a"], rows["b"]]))
        queue_insert(q, np.stack([rows["a"], rows["b"]]))
        queue_insert(q, np.stack([rows["c"], rows["d"]]))
        queue_insert(q, np.stack([rows["e"], rows["f"]]))
        snap = q.snapshot()
        expect = np.stack([rows["c"], rows["d"], rows["e"], rows["f"]])
        np.testing.assert_array_equal(snap, expect)

    def test_insert_exactly_capacity_replaces_all(self):
        rng = np.random.default_rng(0)
        q = queue_init(8, 4, RngStream(1))
        fresh = _unit_rows(8, 4, rng, np.float32)
        queue_insert(q, fresh)
        np.testing.assert_array_equal(q.snapshot(), fresh)

    def test_oversized_insert_rejected(self):
        q = queue_init(4, 4, RngStream(1))
        with pytest.raises(ValueError, match="cannot insert"):
            queue_insert(q, _unit_rows(5, 4, np.random.default_rng(0)))

    def test_dim_mismatch_rejected(self):
        q = queue_init(4, 4, RngStream(1))
        with pytest.raises(ValueError, match="dim"):
            queue_insert(q, _unit_rows(2, 5, np.random.default_rng(0)))

    def test_non_unit_rows_rejected(self):
        q = queue_init(4, 4, RngStream(1))
        with pytest.raises(ValueError, match="unit-norm"):
            queue_insert(q, np.full((1, 4), 0.9))

    def test_insert_log_records_tags_in_order(self):
        q = queue_init(16, 4, RngStream(1), track_inserts=True)
        rng = np.random.default_rng(3)
        for tag in ("v2A", "v2M", "vm"):
            queue_insert(q, FeatureBatch(_unit_rows(2, 4, rng, np.float32), tag))
        assert q.insert_log == [("v2A", 2), ("v2M", 2), ("vm", 2)]
        assert q.inserted == 6

    def test_wraparound_head(self):
        q = queue_init(4, 4, RngStream(1))
        rng = np.random.default_rng(0)
        queue_insert(q, _unit_rows(3, 4, rng, np.float32))
        newest = _unit_rows(3, 4, rng, np.float32)
        queue_insert(q, newest)
        np.testing.assert_array_equal(q.snapshot()[-3:], newest)


class TestFeatureBatch:
    def test_tag_validation(self):
        v = _unit_rows(2, 4, np.random.default_rng(0))
        with pytest.raises(ValueError, match="tag"):
            FeatureBatch(v, "bogus")

    def test_unit_norm_validation(self):
        with pytest.raises(ValueError, match="unit-norm"):
            FeatureBatch(np.ones((2, 4)), "v2A")

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            FeatureBatch(np.ones(4), "v2A")


class TestContrastiveLogits:
    def test_hand_case_axis_vectors(self):
        """anchor=e0, positive=e0, queue rows e1 and -e0 give [1, 0, -1]."""
        q = MemoryQueue(np.array([[0.0, 1.0], [-1.0, 0.0]]))
        logits = contrastive_logits(np.array([1.0, 0.0]), np.array([1.0, 0.0]), q, 1.0)
        np.testing.assert_allclose(logits.data, [1.0, 0.0, -1.0], atol=1e-15)

    def test_temperature_scales_logits(self):
        q = MemoryQueue(np.array([[0.0, 1.0], [-1.0, 0.0]]))
        logits = contrastive_logits(np.array([1.0, 0.0]), np.array([1.0, 0.0]), q, 0.2)
        np.testing.assert_allclose(logits.data, [5.0, 0.0, -5.0], rtol=1e-12)

    def test_batch_rows_match_single_calls(self):
        rng = np.random.default_rng(5)
        q = queue_init(16, 8, RngStream(2), dtype=np.float64)
        anchors = _unit_rows(4, 8, rng)
        pos = _unit_rows(4, 8, rng)
        batch = contrastive_logits(Tensor(anchors), pos, q, 0.2)
        for i in range(4):
            row = contrastive_logits(anchors[i], pos[i], q, 0.2)
            np.testing.assert_allclose(batch.data[i], row.data, rtol=1e-12)

    def test_queue_buffer_not_mutated(self):
        q = queue_init(16, 8, RngStream(2))
        before = q.buffer.copy()
        contrastive_logits(_unit_rows(2, 8, np.random.default_rng(0), np.float32),
                           _unit_rows(2, 8, np.random.default_rng(1), np.float32),
                           q, 0.2)
        np.testing.assert_array_equal(q.buffer, before)
        assert q.head == 0

    def test_nonpositive_tau_rejected(self):
        q = queue_init(4, 4, RngStream(0))
        v = _unit_rows(2, 4, np.random.default_rng(0), np.float32)
        for tau in (0.0, -0.5):
            with pytest.raises(ValueError, match="tau"):
                contrastive_logits(Tensor(v), v, q, tau)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        q = queue_init(24, 6, RngStream(3), dtype=np.float64)
        pos = _unit_rows(5, 6, rng)
        anchors = _unit_rows(5, 6, rng)

        def build(t):
            return info_nce_loss(contrastive_logits(t[0], pos, q, 0.2))

        check_gradients(build, [anchors])

    def test_gradient_flows_only_into_anchor(self):
        rng = np.random.default_rng(12)
        q = queue_init(8, 4, RngStream(4), dtype=np.float64)
        a = Tensor(_unit_rows(3, 4, rng), requires_grad=True)
        p = Tensor(_unit_rows(3, 4, rng))
        with Tape() as tape:
            loss = info_nce_loss(contrastive_logits(a, p, q, 0.2))
        backward(loss, tape)
        assert a.grad is not None
        assert p.grad is None


class TestInfoNCE:
    def test_uniform_logits_give_log_n_plus_one(self):
        """All-equal logits: loss is ln(N+1) exactly (here N=2)."""
        loss = info_nce_loss(Tensor(np.zeros((4, 3))))
        np.testing.assert_allclose(loss.item(), math.log(3.0), rtol=1e-12)

    def test_hand_case_value(self):
        """Logits [1, 0, -1] with target 0: ln(e + 1 + 1/e) - 1."""
        loss = info_nce_loss(Tensor(np.array([[1.0, 0.0, -1.0]])))
        expect = math.log(math.e + 1.0 + math.exp(-1.0)) - 1.0
        np.testing.assert_allclose(loss.item(), expect, atol=1e-10)
        np.testing.assert_allclose(loss.item(), 0.40760596444438, atol=1e-10)

    def test_sum_reduction_scales_by_rows(self):
        rows = np.tile([[0.5, -0.2, 0.1]], (4, 1))
        mean = info_nce_loss(Tensor(rows), reduction="mean").item()
        total = info_nce_loss(Tensor(rows), reduction="sum").item()
        np.testing.assert_allclose(total, 4.0 * mean, rtol=1e-12)

    def test_non_finite_logits_rejected(self):
        bad = np.array([[0.0, np.inf, 0.0]])
        with pytest.raises(N.NonFiniteError):
            info_nce_loss(Tensor(bad))

    def test_top1_accuracy(self):
        rows = np.array([[2.0, 1.0, 0.0], [0.0, 3.0, 1.0], [5.0, 4.0, 4.5]])
        assert top1_accuracy(rows) == pytest.approx(2.0 / 3.0)


class TestC2LLoss:
    def _features(self, seed, z=4, d=8):
        rng = np.random.default_rng(seed)
        return [_unit_rows(z, d, rng) for _ in range(5)]

    def test_matches_manual_composition(self):
        v1a, v2a, v1m, v2m, vm = self._features(0)
        q = queue_init(16, 8, RngStream(5), dtype=np.float64)
        la, lm = c2l_loss(Tensor(v1a), v2a, Tensor(v1m), v2m, vm, q, 0.2)
        ref_a = info_nce_loss(contrastive_logits(Tensor(v1a), v2a, q, 0.2))
        ref_m1 = info_nce_loss(contrastive_logits(Tensor(v1m), v2m, q, 0.2))
        ref_m2 = info_nce_loss(contrastive_logits(Tensor(v1m), vm, q, 0.2))
        np.testing.assert_allclose(la.item(), ref_a.item(), rtol=1e-12)
        np.testing.assert_allclose(lm.item(), ref_m1.item() + ref_m2.item(), rtol=1e-12)

    def test_queue_rotation_leaves_loss_unchanged(self):
        """The loss only sees the queue as a set of negatives."""
        v1a, v2a, v1m, v2m, vm = self._features(1)
        q = queue_init(16, 8, RngStream(6), dtype=np.float64)
        la1, lm1 = c2l_loss(Tensor(v1a), v2a, Tensor(v1m), v2m, vm, q, 0.2)
        rolled = MemoryQueue(np.roll(q.buffer, 5, axis=0))
        la2, lm2 = c2l_loss(Tensor(v1a), v2a, Tensor(v1m), v2m, vm, rolled, 0.2)
        np.testing.assert_allclose(la1.item(), la2.item(), rtol=1e-12)
        np.testing.assert_allclose(lm1.item(), lm2.item(), rtol=1e-12)

    def test_teacher_gradient_carrier_rejected(self):
        v1a, v2a, v1m, v2m, vm = self._features(2)
        q = queue_init(16, 8, RngStream(7), dtype=np.float64)
        bad = Tensor(v2a, requires_grad=True)
        with pytest.raises(ValueError, match="teacher"):
            c2l_loss(Tensor(v1a), bad, Tensor(v1m), v2m, vm, q, 0.2)

    def test_loss_m_accumulates_both_terms_in_gradient(self):
        v1a, v2a, v1m, v2m, vm = self._features(3)
        q = queue_init(16, 8, RngStream(8), dtype=np.float64)

        def both(t):
            _, lm = c2l_loss(Tensor(v1a), v2a, t[0], v2m, vm, q, 0.2)
            return lm

        check_gradients(both, [v1m])

    def test_stats_report_top1(self):
        v1a, v2a, v1m, v2m, vm = self._features(4)
        q = queue_init(16, 8, RngStream(9), dtype=np.float64)
        _, _, stats = c2l_loss(Tensor(v1a), v2a, Tensor(v1m), v2m, vm, q, 0.2,
                               return_stats=True)
        assert 0.0 <= stats["top1"] <= 1.0
