"""Parameter accounting and a toy forward pass for depthwise-separable convolution,
plus the keypoint regression loss."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InvalidInputError, ShapeError


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    c_in: int
    c_out: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.kernel, self.c_in, self.c_out, self.stride) < 1 or self.padding < 0:
            raise ConfigurationError(f"invalid convolution spec {self}")


def params_conv(spec: ConvSpec) -> int:
    """Weights of a standard K x K convolution (bias excluded)."""
    return spec.kernel * spec.kernel * spec.c_in * spec.c_out


def params_dws(spec: ConvSpec) -> int:
    """Weights of a depthwise K x K convolution followed by a 1 x 1 pointwise one."""
    return spec.kernel * spec.kernel * spec.c_in + spec.c_in * spec.c_out


def reduction_factor(spec: ConvSpec) -> Fraction:
    """Exact ratio ``params_dws / params_conv = 1/C_out + 1/K^2``."""
    return Fraction(1, spec.c_out) + Fraction(1, spec.kernel * spec.kernel)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((p, p), (p, p), (0, 0))) if p else x


def dws_forward(x, depthwise, pointwise, spec: ConvSpec) -> np.ndarray:
    """Depthwise then pointwise convolution (cross-correlation, stride 1, zero padding).

    Args:
        x: input of shape (H, W, C_in).
        depthwise: one K x K kernel per input channel, shape (K, K, C_in).
        pointwise: 1 x 1 channel mixing weights, shape (C_in, C_out).
        spec: layer geometry; only ``stride == 1`` is supported.

    Returns:
        Array of shape (H + 2p - K + 1, W + 2p - K + 1, C_out).
    """
    x = np.asarray(x, dtype=float)
    dw = np.asarray(depthwise, dtype=float)
    pw = np.asarray(pointwise, dtype=float)
    K, C_in, C_out = spec.kernel, spec.c_in, spec.c_out
    if spec.stride != 1:
        raise ConfigurationError("dws_forward supports stride 1 only")
    if x.ndim != 3 or x.shape[2] != C_in:
        raise ShapeError(f"input must be (H, W, {C_in}), got {x.shape}")
    if dw.shape != (K, K, C_in):
        raise ShapeError(f"depthwise kernels must be ({K}, {K}, {C_in}), got {dw.shape}")
    if pw.shape != (C_in, C_out):
        raise ShapeError(f"pointwise weights must be ({C_in}, {C_out}), got {pw.shape}")
    xp = _pad(x, spec.padding)
    if xp.shape[0] < K or xp.shape[1] < K:
        raise ShapeError(f"padded input {xp.shape[:2]} is smaller than the {K}x{K} kernel")
    # windows: (H', W', C_in, K, K)
    win = sliding_window_view(xp, (K, K), axis=(0, 1))
    depth = np.einsum("hwcij,ijc->hwc", win, dw)
    return depth @ pw


def composed_kernel(depthwise, pointwise) -> np.ndarray:
    """Full (K, K, C_in, C_out) kernel equivalent to a depthwise-separable pair."""
    dw = np.asarray(depthwise, dtype=float)
    pw = np.asarray(pointwise, dtype=float)
    return dw[:, :, :, None] * pw[None, None, :, :]


def krn_loss(pred, truth, squared: bool = False) -> float:
    """Keypoint regression loss.

    By default sums ``|dx| + |dy|`` over keypoints, i.e. the per-coordinate
    2-norms of scalar differences. ``squared=True`` sums ``dx^2 + dy^2``
    instead (a plain squared-error loss).
    """
    p = np.asarray(getattr(pred, "points", pred), dtype=float)
    t = np.asarray(getattr(truth, "points", truth), dtype=float)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 2:
        raise InvalidInputError(f"keypoint arrays must match and be (n, 2): {p.shape} vs {t.shape}")
    d = p - t
    return float(np.sum(d**2) if squared else np.sum(np.abs(d)))
