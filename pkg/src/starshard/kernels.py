"""Dense fp32 kernels for the transformer forward pass.

Every kernel takes and returns float32 arrays and raises if an output (or a
required input) contains NaN or Inf, so non-finite values surface instead of
propagating silently. ``matmul`` accumulates the inner dimension in ascending
index order with one rounded fp32 multiply and one rounded fp32 add per term,
which makes results bit-identical across repeated calls and across processes.
"""

from __future__ import annotations

import numpy as np

__all__ = ["matmul", "softmax_rows", "rms_norm", "silu", "rope_apply"]


def _as_f32_matrix(name: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _check_finite(name: str, out: np.ndarray) -> np.ndarray:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{name} produced non-finite values")
    return out


def matmul(a, b) -> np.ndarray:
    """Row-major fp32 matrix product with a fixed summation order.

    The inner dimension is summed in ascending index order, so the result
    matches a naive scalar triple loop bit for bit and is reproducible across
    processes. Slower than BLAS, which is fine at desk scale.
    """
    a = _as_f32_matrix("a", a)
    b = _as_f32_matrix("b", b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return _check_finite("matmul", out)


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Exponentials and the normalizing sum run in double precision and the
    result is rounded to fp32 once, so each output row sums to 1 within 1e-6
    even for inputs of magnitude 1e4.
    """
    a = _as_f32_matrix("a", a)
    if not np.isfinite(a).all():
        raise FloatingPointError("softmax_rows requires finite input")
    shifted = a.astype(np.float64) - a.max(axis=1, keepdims=True).astype(np.float64)
    e = np.exp(shifted)
    out = (e / e.sum(axis=1, keepdims=True)).astype(np.float32)
    return _check_finite("softmax_rows", out)


def rms_norm(x, gain, eps: float = 1e-5) -> np.ndarray:
    """Per-row ``x / sqrt(mean(x**2) + eps) * gain`` in fp32.

    Internals run in double precision; scaling a row by any positive constant
    leaves the eps=0 output unchanged up to one fp32 rounding.
    """
    x = _as_f32_matrix("x", x)
    gain = np.asarray(gain, dtype=np.float32)
    if gain.shape != (x.shape[1],):
        raise ValueError(f"gain shape {gain.shape} does not match row width {x.shape[1]}")
    wide = x.astype(np.float64)
    inv = 1.0 / np.sqrt((wide * wide).mean(axis=1, keepdims=True) + eps)
    out = (wide * inv * gain.astype(np.float64)).astype(np.float32)
    return _check_finite("rms_norm", out)


def silu(x) -> np.ndarray:
    """Elementwise ``x * sigmoid(x)``; the split form avoids exp overflow."""
    arr = np.asarray(x, dtype=np.float32)
    wide = arr.astype(np.float64)
    sig = np.empty_like(wide)
    pos = wide >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-wide[pos]))
    ez = np.exp(wide[~pos])
    sig[~pos] = ez / (1.0 + ez)
    out = (wide * sig).astype(np.float32)
    return _check_finite("silu", out)


def rope_apply(x, positions, theta_base: float = 10000.0) -> np.ndarray:
    """Rotary position encoding applied to adjacent element pairs.

    Pair ``j`` of a width-d row at position ``p`` rotates by the angle
    ``p * theta_base ** (-2j/d)``; position 0 passes through unchanged.
    """
    x = _as_f32_matrix("x", x)
    seq, d = x.shape
    if d % 2:
        raise ValueError(f"rope_apply requires an even feature dimension, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (seq,):
        raise ValueError(f"positions shape {pos.shape} does not match sequence length {seq}")
    inv_freq = theta_base ** (-2.0 * np.arange(d // 2, dtype=np.float64) / d)
    angles = pos[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    even = x[:, 0::2].astype(np.float64)
    odd = x[:, 1::2].astype(np.float64)
    out = np.empty((seq, d), dtype=np.float64)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return _check_finite("rope_apply", out.astype(np.float32))
