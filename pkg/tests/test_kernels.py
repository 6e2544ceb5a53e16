import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from starshard.kernels import matmul, rms_norm, rope_apply, silu, softmax_rows


def triple_loop_matmul(a, b):
    """Independent oracle: scalar fp32 accumulation, inner index ascending."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for kk in range(k):
                acc = np.float32(acc + np.float32(a[i, kk] * b[kk, j]))
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        out = matmul(np.eye(2, dtype=np.float32), [[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(out, np.array([[3.0, 4.0], [5.0, 6.0]], dtype=np.float32))

    def test_hand_arithmetic(self):
        out = matmul([[1.0, 2.0]], [[3.0], [4.0]])
        assert np.array_equal(out, np.array([[11.0]], dtype=np.float32))

    def test_matches_triple_loop_oracle_bit_exact(self, rng):
        a = rng.standard_normal((7, 5)).astype(np.float32)
        b = rng.standard_normal((5, 3)).astype(np.float32)
        assert matmul(a, b).tobytes() == triple_loop_matmul(a, b).tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            matmul(np.ones((2, 3), dtype=np.float32), np.ones((2, 3), dtype=np.float32))

    def test_repeated_calls_bit_identical(self, rng):
        a = rng.standard_normal((9, 17)).astype(np.float32)
        b = rng.standard_normal((17, 4)).astype(np.float32)
        assert matmul(a, b).tobytes() == matmul(a, b).tobytes()

    def test_non_finite_output_raises(self):
        big = np.full((1, 2), 3e38, dtype=np.float32)
        with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
            matmul(big, big.T)


class TestSoftmaxRows:
    def test_symmetry(self):
        out = softmax_rows([[0.0, 0.0]])
        assert np.array_equal(out, np.array([[0.5, 0.5]], dtype=np.float32))

    def test_large_inputs_no_overflow(self):
        out = softmax_rows([[1000.0, 1000.0, 1000.0]])
        assert np.allclose(out, 1.0 / 3.0, atol=1e-7)

    def test_closed_form_ratio(self):
        out = softmax_rows([[0.0, math.log(3.0)]])
        assert np.allclose(out, [[0.25, 0.75]], atol=1e-7)

    def test_rejects_non_finite(self):
        with pytest.raises(FloatingPointError):
            softmax_rows([[np.inf, 0.0]])

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.lists(st.floats(min_value=-1e4, max_value=1e4), min_size=2, max_size=24),
            min_size=1,
            max_size=6,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    def test_rows_sum_to_one(self, rows):
        out = softmax_rows(np.array(rows, dtype=np.float32))
        sums = out.astype(np.float64).sum(axis=1)
        assert np.all(np.abs(sums - 1.0) <= 1e-6)


class TestRmsNorm:
    def test_unit_rows(self):
        x = np.ones((2, 8), dtype=np.float32)
        out = rms_norm(x, np.ones(8, dtype=np.float32), eps=0.0)
        assert np.array_equal(out, x)

    def test_zero_rows(self):
        x = np.zeros((3, 4), dtype=np.float32)
        out = rms_norm(x, np.ones(4, dtype=np.float32), eps=1e-5)
        assert np.array_equal(out, x)

    def test_matches_scalar_oracle(self, rng):
        x = rng.standard_normal((1, 16)).astype(np.float32)
        gain = rng.standard_normal(16).astype(np.float32)
        eps = 1e-5
        mean_sq = sum(float(v) ** 2 for v in x[0]) / 16.0
        expected = np.array(
            [float(v) / math.sqrt(mean_sq + eps) * float(g) for v, g in zip(x[0], gain)]
        )
        out = rms_norm(x, gain, eps)
        assert np.allclose(out[0], expected, rtol=1e-6, atol=1e-8)

    def test_gain_length_mismatch(self):
        with pytest.raises(ValueError):
            rms_norm(np.ones((1, 4), dtype=np.float32), np.ones(3, dtype=np.float32))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(min_value=1e-3, max_value=1e3))
    def test_scale_invariance(self, c):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 12)).astype(np.float32)
        gain = np.ones(12, dtype=np.float32)
        base = rms_norm(x, gain, eps=0.0)
        scaled = rms_norm(x * np.float32(c), gain, eps=0.0)
        assert np.allclose(base, scaled, rtol=1e-5)


class TestSilu:
    def test_zero(self):
        assert silu(np.zeros(3, dtype=np.float32)).tolist() == [0.0, 0.0, 0.0]

    def test_large_positive_is_identity(self):
        x = np.array([40.0, 80.0], dtype=np.float32)
        assert np.allclose(silu(x), x, rtol=1e-6)

    def test_value_at_one(self):
        expected = 1.0 / (1.0 + math.exp(-1.0))
        assert abs(float(silu(np.array([1.0], dtype=np.float32))[0]) - expected) < 1e-6

    def test_large_negative_no_overflow(self):
        out = silu(np.array([-200.0], dtype=np.float32))
        assert np.isfinite(out).all() and abs(float(out[0])) < 1e-6


class TestRopeApply:
    def test_position_zero_unchanged(self, rng):
        x = rng.standard_normal((3, 8)).astype(np.float32)
        out = rope_apply(x, [0, 0, 0])
        assert np.array_equal(out, x)

    def test_single_pair_rotation_by_position(self):
        # d=2 has one pair with unit frequency: rotation angle equals position.
        x = np.array([[1.0, 0.0]], dtype=np.float32)
        for pos in (0.5, 1.0, 2.0, 3.7):
            out = rope_apply(x, [pos], theta_base=123.0)
            assert np.allclose(out, [[math.cos(pos), math.sin(pos)]], atol=1e-6)

    def test_matches_scalar_sincos_oracle(self, rng):
        x = rng.standard_normal((5, 4)).astype(np.float32)
        positions = [3, 4, 5, 6, 7]
        theta = 10000.0
        expected = np.empty_like(x, dtype=np.float64)
        for i, pos in enumerate(positions):
            for j in range(2):
                angle = pos * theta ** (-2.0 * j / 4.0)
                c, s = math.cos(angle), math.sin(angle)
                expected[i, 2 * j] = float(x[i, 2 * j]) * c - float(x[i, 2 * j + 1]) * s
                expected[i, 2 * j + 1] = float(x[i, 2 * j]) * s + float(x[i, 2 * j + 1]) * c
        out = rope_apply(x, positions, theta)
        assert np.allclose(out, expected, atol=1e-6)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError, match="even"):
            rope_apply(np.ones((1, 3), dtype=np.float32), [0])
