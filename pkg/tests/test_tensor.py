import numpy as np
import pytest

from axialreid.errors import DimensionError, ValidationError
from axialreid.tensor import (
    Rng,
    avg_pool_2d,
    avg_pool_2d_adjoint,
    load_tensor,
    matmul,
    save_tensor,
    softmax,
    upsample_nearest_2d,
    upsample_nearest_2d_adjoint,
)


def matmul_oracle(a, b):
    # naive triple loop, independent of the library path
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        assert matmul([[1, 0], [0, 1]], [[3], [4]]).tolist() == [[3], [4]]

    def test_hand_arithmetic(self):
        assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11]]

    def test_against_triple_loop_oracle(self):
        rng = Rng(7)
        a = rng.child(0).normal((5, 7))
        b = rng.child(1).normal((7, 3))
        assert np.max(np.abs(matmul(a, b) - matmul_oracle(a, b))) < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_associativity(self):
        rng = Rng(3)
        for trial in range(10):
            a = rng.child(trial, 0).normal((4, 5))
            b = rng.child(trial, 1).normal((5, 3))
            c = rng.child(trial, 2).normal((3, 6))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.max(np.abs(left - right)) / np.max(np.abs(left)) < 1e-9


class TestSoftmax:
    def test_uniform_logits(self):
        np.testing.assert_allclose(softmax([0.0, 0.0, 0.0], 0), [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_large_logits_no_overflow(self):
        np.testing.assert_allclose(softmax([1000.0, 1000.0], 0), [0.5, 0.5], rtol=0, atol=0)

    def test_exp_normalize_oracle_extended_precision(self):
        x = np.array([1.0, 2.0, 3.0])
        e = np.exp(np.asarray(x, dtype=np.longdouble))
        expected = (e / e.sum()).astype(np.float64)
        np.testing.assert_allclose(softmax(x, 0), expected, rtol=0, atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = Rng(11)
        x = rng.uniform(-1e3, 1e3, (20, 13))
        sums = softmax(x, 1).sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) < 1e-12

    def test_empty_axis_rejected(self):
        with pytest.raises(DimensionError):
            softmax(np.empty((3, 0)), 1)


class TestPooling:
    def test_constant_preserved(self):
        x = np.full((2, 3, 4, 4), 2.5)
        assert np.all(avg_pool_2d(x, 2) == 2.5)

    def test_hand_arithmetic(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        assert avg_pool_2d(x, 2).reshape(()) == 2.5

    def test_factor_one_identity(self):
        x = Rng(0).normal((2, 2, 3, 5))
        assert np.array_equal(avg_pool_2d(x, 1), x)
        assert np.array_equal(upsample_nearest_2d(x, 1), x)

    def test_factor_zero_rejected(self):
        with pytest.raises(DimensionError):
            avg_pool_2d(np.ones((1, 1, 2, 2)), 0)
        with pytest.raises(DimensionError):
            upsample_nearest_2d(np.ones((1, 1, 2, 2)), 0)

    def test_partial_edge_windows(self):
        x = np.arange(6, dtype=np.float64).reshape(1, 1, 2, 3)
        out = avg_pool_2d(x, 2)
        assert out.shape == (1, 1, 1, 2)
        np.testing.assert_allclose(out.ravel(), [(0 + 1 + 3 + 4) / 4, (2 + 5) / 2])

    def test_upsample_replication(self):
        out = upsample_nearest_2d(np.array([[5.0]]).reshape(1, 1, 1, 1), 2)
        assert out.reshape(2, 2).tolist() == [[5, 5], [5, 5]]

    def test_down_up_constant_roundtrip(self):
        x = np.full((3, 2, 6, 4), -1.25)
        up = upsample_nearest_2d(avg_pool_2d(x, 2), 2, target_hw=(6, 4))
        assert np.array_equal(up, x)

    def test_upsample_crop_to_odd_target(self):
        x = Rng(5).normal((1, 1, 3, 2))
        out = upsample_nearest_2d(x, 2, target_hw=(5, 3))
        assert out.shape == (1, 1, 5, 3)
        assert out[0, 0, 4, 2] == x[0, 0, 2, 1]

    def test_pool_adjoint_matches_fd(self):
        rng = Rng(9)
        x = rng.child(0).normal((1, 1, 5, 3))
        g = rng.child(1).normal((1, 1, 3, 2))
        adj = avg_pool_2d_adjoint(g, 2, (5, 3))
        # <g, pool(x)> gradient wrt x, via linearity: adjoint columns
        for idx in np.ndindex(x.shape):
            e = np.zeros_like(x)
            e[idx] = 1.0
            fd = np.sum(g * avg_pool_2d(e, 2))
            assert abs(adj[idx] - fd) < 1e-12

    def test_upsample_adjoint_matches_fd(self):
        rng = Rng(10)
        x_shape = (1, 1, 3, 2)
        g = rng.normal((1, 1, 5, 3))
        adj = upsample_nearest_2d_adjoint(g, 2, (3, 2))
        for idx in np.ndindex(x_shape):
            e = np.zeros(x_shape)
            e[idx] = 1.0
            fd = np.sum(g * upsample_nearest_2d(e, 2, target_hw=(5, 3)))
            assert abs(adj[idx] - fd) < 1e-12


class TestRng:
    def test_same_seed_identical_streams(self):
        a = Rng(42).uniform_init((4, 4), 16)
        b = Rng(42).uniform_init((4, 4), 16)
        assert np.array_equal(a, b)

    def test_children_independent_of_sibling_draws(self):
        r1 = Rng(1)
        _ = r1.child(0).normal((10,))
        a = r1.child(1).normal((3,))
        b = Rng(1).child(1).normal((3,))
        assert np.array_equal(a, b)

    def test_init_bound(self):
        draws = Rng(2).uniform_init((1000,), 4)
        assert np.max(np.abs(draws)) <= 0.5


class TestContainer:
    def test_roundtrip(self, tmp_path):
        x = Rng(3).normal((2, 3, 4))
        p = tmp_path / "t.aakt"
        save_tensor(p, x)
        assert np.array_equal(load_tensor(p), x)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.aakt"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValidationError, match="magic"):
            load_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.aakt"
        save_tensor(p, np.ones((2, 2)))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValidationError, match="payload"):
            load_tensor(p)
