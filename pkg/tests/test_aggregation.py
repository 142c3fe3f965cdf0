import numpy as np
import pytest

from axialreid import aggregation as agg
from axialreid.errors import DimensionError, ValidationError
from axialreid.gradcheck import fd_gradient, rel_error
from axialreid.tensor import Rng


class TestMaskDownsample:
    def test_all_valid_stays_valid(self):
        out = agg.mask_downsample(np.ones((2, 8, 4)), (4, 2))
        assert np.all(out == 1.0)

    def test_strict_majority_rule(self):
        m = np.zeros((1, 2, 2))
        m[0, 0, 0] = m[0, 0, 1] = m[0, 1, 0] = 1  # 3 of 4 valid
        assert agg.mask_downsample(m, (1, 1))[0, 0, 0] == 1.0
        m[0, 1, 0] = 0  # exactly half
        # 2 of 4 is not strictly more than half, but the all-zero frame fallback kicks in
        out = agg.mask_downsample(m, (1, 1))
        assert out[0, 0, 0] == 1.0

    def test_majority_without_fallback(self):
        m = np.zeros((1, 2, 4))
        m[0, :, :2] = 1  # left cell 4/4, right cell 0/4
        m[0, 0, 2] = 1  # right cell 1/4: minority
        out = agg.mask_downsample(m, (1, 2))
        assert out[0, 0, 0] == 1.0 and out[0, 0, 1] == 0.0
        m[0, 1, 2] = 1  # right cell 2/4: still not strictly > half
        assert agg.mask_downsample(m, (1, 2))[0, 0, 1] == 0.0
        m[0, 0, 3] = 1  # right cell 3/4
        assert agg.mask_downsample(m, (1, 2))[0, 0, 1] == 1.0

    def test_fully_padded_frame_falls_back_to_ones(self):
        m = np.zeros((2, 4, 4))
        m[1] = 1
        out = agg.mask_downsample(m, (2, 2))
        assert np.all(out[0] == 1.0) and np.all(out[1] == 1.0)

    def test_non_integer_ratio_rejected(self):
        with pytest.raises(DimensionError):
            agg.mask_downsample(np.ones((1, 6, 4)), (4, 2))


class TestMaskedAvgPool:
    def test_all_valid_is_plain_mean(self):
        rng = Rng(0)
        f = rng.normal((3, 4, 2, 2))
        out = agg.masked_avg_pool(f, np.ones((3, 2, 2)))
        np.testing.assert_allclose(out, f.mean(axis=(2, 3)), atol=1e-15)

    def test_single_valid_cell(self):
        f = Rng(1).normal((1, 3, 2, 2))
        m = np.zeros((1, 2, 2))
        m[0, 1, 0] = 1
        np.testing.assert_array_equal(agg.masked_avg_pool(f, m)[0], f[0, :, 1, 0])

    def test_invalid_cells_do_not_matter(self):
        rng = Rng(2)
        f = rng.child(0).normal((2, 3, 4, 4))
        m = (rng.child(1).uniform(0, 1, (2, 4, 4)) > 0.5).astype(float)
        m[:, 0, 0] = 1  # keep at least one valid cell
        base = agg.masked_avg_pool(f, m)
        f2 = f.copy()
        f2 += (1 - m[:, None]) * rng.child(2).normal(f.shape) * 100
        assert np.array_equal(agg.masked_avg_pool(f2, m), base)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            agg.masked_avg_pool(np.ones((2, 3, 4, 4)), np.ones((2, 4, 3)))

    def test_backward_matches_fd(self):
        rng = Rng(3)
        f = rng.child(0).normal((2, 3, 2, 2))
        m = np.ones((2, 2, 2))
        m[0, 0, 0] = 0
        g = rng.child(1).normal((2, 3))

        def loss():
            return float(np.sum(g * agg.masked_avg_pool(f, m)))

        grad = agg.masked_avg_pool_backward(g, m)
        assert rel_error(grad, fd_gradient(loss, f)) < 1e-6


class TestAggregate:
    def test_single_frame(self):
        f = Rng(4).normal((1, 5))
        bn = agg.BatchNorm1d(5, eps=0.0)
        f_pre, _ = agg.aggregate(f, bn)
        np.testing.assert_array_equal(f_pre, f[0])

    def test_identical_frames(self):
        one = Rng(5).normal((6,))
        f = np.tile(one, (4, 1))
        bn = agg.BatchNorm1d(6)
        f_pre, _ = agg.aggregate(f, bn)
        np.testing.assert_allclose(f_pre, one, atol=1e-15)

    def test_identity_bn_in_eval_mode(self):
        f = Rng(6).normal((3, 4))
        bn = agg.BatchNorm1d(4, eps=0.0)  # unit scale, zero shift, running stats (0, 1)
        f_pre, f_post = agg.aggregate(f, bn, training=False)
        np.testing.assert_array_equal(f_post, f_pre)

    def test_frame_order_invariance(self):
        f = Rng(7).normal((5, 3))
        bn = agg.BatchNorm1d(3)
        pre1, _ = agg.aggregate(f, bn)
        pre2, _ = agg.aggregate(f[::-1], bn)
        np.testing.assert_allclose(pre1, pre2, atol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            agg.aggregate(np.empty((0, 3)), agg.BatchNorm1d(3))


class TestBatchNorm:
    def test_train_backward_matches_fd(self):
        rng = Rng(8)
        x = rng.child(0).normal((6, 4))
        g = rng.child(1).normal((6, 4))
        bn = agg.BatchNorm1d(4)
        bn.gamma = rng.child(2).uniform(0.5, 1.5, (4,))
        bn.beta = rng.child(3).normal((4,))

        def loss():
            fresh = agg.BatchNorm1d(4)
            fresh.gamma, fresh.beta = bn.gamma, bn.beta
            out, _ = fresh.forward(x, training=True)
            return float(np.sum(g * out))

        out, cache = bn.forward(x, training=True)
        d_x, d_gamma, d_beta = bn.backward(g, cache)
        assert rel_error(d_x, fd_gradient(loss, x)) < 1e-5
        assert rel_error(d_gamma, fd_gradient(loss, bn.gamma)) < 1e-5
        assert rel_error(d_beta, fd_gradient(loss, bn.beta)) < 1e-5

    def test_running_stats_converge_in_eval(self):
        rng = Rng(9)
        bn = agg.BatchNorm1d(3, momentum=0.5)
        for i in range(50):
            bn.forward(rng.child(i).normal((32, 3)) * 2.0 + 1.0, training=True)
        out, _ = bn.forward(np.array([[1.0, 1.0, 1.0]]), training=False)
        assert np.max(np.abs(out)) < 0.2


class TestTriplet:
    def test_separated_clusters_zero_loss(self):
        feats = np.array([[0.0, 0], [0.1, 0], [10, 10], [10.1, 10]])
        labels = np.array([0, 0, 1, 1])
        loss, grad = agg.batch_hard_triplet(feats, labels, margin=0.0)
        assert loss == 0.0
        assert not grad.any()

    def test_identical_features_loss_is_margin(self):
        feats = np.ones((4, 3))
        labels = np.array([0, 0, 1, 1])
        loss, _ = agg.batch_hard_triplet(feats, labels, margin=0.3)
        assert loss == pytest.approx(0.3, abs=1e-15)

    def test_against_exhaustive_pair_oracle(self):
        rng = Rng(10)
        feats = rng.normal((8, 6))
        labels = np.repeat(np.arange(4), 2)
        loss, _ = agg.batch_hard_triplet(feats, labels, margin=0.3)
        # oracle: exhaustive hardest-pair search with explicit loops
        total = 0.0
        for a in range(8):
            d_pos = max(
                np.linalg.norm(feats[a] - feats[j])
                for j in range(8) if j != a and labels[j] == labels[a]
            )
            d_neg = min(
                np.linalg.norm(feats[a] - feats[j])
                for j in range(8) if labels[j] != labels[a]
            )
            total += max(0.0, 0.3 + d_pos - d_neg)
        assert abs(loss - total / 8) < 1e-12

    def test_nonnegative_and_zero_iff_satisfied(self):
        rng = Rng(11)
        for trial in range(20):
            feats = rng.child(trial).normal((6, 4))
            labels = np.repeat(np.arange(3), 2)
            loss, _ = agg.batch_hard_triplet(feats, labels, margin=0.2)
            assert loss >= 0.0
            margins_ok = True
            for a in range(6):
                d_pos = max(np.linalg.norm(feats[a] - feats[j]) for j in range(6) if j != a and labels[j] == labels[a])
                d_neg = min(np.linalg.norm(feats[a] - feats[j]) for j in range(6) if labels[j] != labels[a])
                if 0.2 + d_pos - d_neg > 0:
                    margins_ok = False
            assert (loss == 0.0) == margins_ok

    def test_singleton_identity_rejected(self):
        with pytest.raises(ValidationError):
            agg.batch_hard_triplet(np.ones((3, 2)), np.array([0, 0, 1]), margin=0.3)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = agg.cross_entropy(np.zeros((2, 7)), np.array([0, 3]))
        assert loss == pytest.approx(np.log(7), abs=1e-12)

    def test_confident_correct_logits(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1e6
        loss, _ = agg.cross_entropy(logits, np.array([2]))
        assert loss < 1e-9

    def test_gradient_rows_sum_to_zero(self):
        rng = Rng(12)
        logits = rng.child(0).normal((5, 9))
        labels = rng.child(1).integers(0, 9, (5,))
        _, grad = agg.cross_entropy(logits, labels)
        assert np.max(np.abs(grad.sum(axis=1))) < 1e-15

    def test_out_of_range_label(self):
        with pytest.raises(ValidationError):
            agg.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_gradient_matches_fd(self):
        rng = Rng(13)
        logits = rng.child(0).normal((4, 6))
        labels = rng.child(1).integers(0, 6, (4,))
        _, grad = agg.cross_entropy(logits, labels)

        def loss():
            return agg.cross_entropy(logits, labels)[0]

        assert rel_error(grad, fd_gradient(loss, logits)) < 1e-6
