"""Top-K activation sparsity, its quantized and block variants, and sparse linear.

Masks are computed on numpy values (they carry no gradient). ``sparsify``
wraps mask, rescale and quantizers into one autodiff node whose backward is
either the straight-through estimator (upstream gradient passed unchanged) or
the vanilla rule (upstream gradient multiplied by the mask).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

QUANT_EPS = 1e-6
ACT_QMAX = 127
ACT_QMIN = -128


class SparsityInputError(ValueError):
    """Non-finite or otherwise unusable activation values."""


class SparsityConfigError(ValueError):
    """Invalid sparsity configuration."""


class Mode(str, enum.Enum):
    DENSE = "dense"
    TOPK = "topk"
    QUANTIZED_TOPK = "quantized_topk"
    TERNARY_TOPK = "ternary_topk"
    BLOCK_TOPK = "block_topk"
    POSTACT_TOPK = "postact_topk"
    # ablation baseline: ReLU on every projection input instead of top-K
    RELU = "relu"


@dataclass(frozen=True)
class SparsityConfig:
    mode: Mode = Mode.DENSE
    keep_fraction: float = 1.0
    block_size_m: int = 32
    rescale: bool = True
    ste: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not (0.0 < self.keep_fraction <= 1.0):
            raise SparsityConfigError(
                f"keep_fraction must be in (0, 1], got {self.keep_fraction}"
            )
        if self.mode is Mode.BLOCK_TOPK and self.block_size_m < 2:
            raise SparsityConfigError(f"block_size_m must be >= 2, got {self.block_size_m}")

    @property
    def masks_projections(self) -> bool:
        return self.mode in (
            Mode.TOPK,
            Mode.QUANTIZED_TOPK,
            Mode.TERNARY_TOPK,
            Mode.BLOCK_TOPK,
        )

    def check_width(self, width: int) -> None:
        if self.mode is Mode.BLOCK_TOPK and width % self.block_size_m:
            raise SparsityConfigError(
                f"row width {width} is not divisible by block size {self.block_size_m}"
            )


@dataclass
class QuantizedActivation:
    q_values: np.ndarray  # int16 holding values in [-128, 127]
    gamma: np.ndarray  # per-row max |x|, shape (..., 1)

    def dequantize(self) -> np.ndarray:
        return self.q_values * (self.gamma / ACT_QMAX)


@dataclass
class TernaryWeight:
    t_values: np.ndarray  # int8 in {-1, 0, 1}
    weight_scale: float

    def dequantize(self) -> np.ndarray:
        return self.t_values * self.weight_scale


def keep_count(keep_fraction: float, width: int) -> int:
    """K = ceil(k * width); rounding first stops 0.7 * 10 from becoming 8."""
    return min(width, max(1, math.ceil(round(keep_fraction * width, 9))))


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _row_top_k(values: np.ndarray, k: int) -> np.ndarray:
    mag = np.abs(values)
    if not np.all(np.isfinite(mag)):
        raise SparsityInputError("top-K input contains non-finite values")
    width = values.shape[-1]
    if k >= width:
        return np.ones(values.shape, dtype=bool)
    kth = np.partition(mag, width - k, axis=-1)[..., width - k : width - k + 1]
    above = mag > kth
    # entries tied with the K-th largest fill the remaining slots, lowest index first
    tied = mag == kth
    missing = k - above.sum(axis=-1, keepdims=True)
    return above | (tied & (np.cumsum(tied, axis=-1) <= missing))


def top_k_mask(x, keep_fraction: float) -> np.ndarray:
    """Boolean mask with ``ceil(k*D)`` ones per row at the largest |x|."""
    if not (0.0 < keep_fraction <= 1.0):
        raise SparsityConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    values = _values(x)
    return _row_top_k(values, keep_count(keep_fraction, values.shape[-1]))


def block_top_k_mask(x, keep_fraction: float, block_size_m: int) -> np.ndarray:
    """Top-K applied independently to each contiguous block of ``block_size_m``."""
    if not (0.0 < keep_fraction <= 1.0):
        raise SparsityConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    values = _values(x)
    width = values.shape[-1]
    if block_size_m < 1 or width % block_size_m:
        raise SparsityConfigError(
            f"row width {width} is not divisible by block size {block_size_m}"
        )
    blocks = values.reshape(values.shape[:-1] + (width // block_size_m, block_size_m))
    mask = _row_top_k(blocks, keep_count(keep_fraction, block_size_m))
    return mask.reshape(values.shape)


def l2_rescale(x_masked, x_original) -> np.ndarray:
    """Scale each row so the kept entries recover the original row's L2 norm."""
    masked = _values(x_masked)
    original = _values(x_original)
    if masked.shape != original.shape:
        raise T.DimensionError(f"shapes differ: {masked.shape} vs {original.shape}")
    kept = np.sqrt((masked * masked).sum(axis=-1, keepdims=True))
    full = np.sqrt((original * original).sum(axis=-1, keepdims=True))
    ratio = np.divide(full, kept, out=np.ones_like(kept), where=kept > 0)
    return masked * ratio


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_act(x) -> QuantizedActivation:
    """8-bit absmax quantization with a per-row scale."""
    values = _values(x)
    gamma = np.abs(values).max(axis=-1, keepdims=True)
    scaled = values * (ACT_QMAX / (gamma + QUANT_EPS))
    q = np.clip(round_half_away(scaled), ACT_QMIN, ACT_QMAX).astype(np.int16)
    return QuantizedActivation(q_values=q, gamma=gamma)


def quantize_weight(w) -> TernaryWeight:
    """Ternary absmean quantization with one scale for the whole tensor."""
    values = _values(w)
    scale = float(np.abs(values).mean())
    t = np.clip(round_half_away(values / (scale + QUANT_EPS)), -1, 1).astype(np.int8)
    return TernaryWeight(t_values=t, weight_scale=scale)


def compute_mask(values: np.ndarray, cfg: SparsityConfig) -> np.ndarray:
    if cfg.mode is Mode.BLOCK_TOPK:
        return block_top_k_mask(values, cfg.keep_fraction, cfg.block_size_m)
    return top_k_mask(values, cfg.keep_fraction)


def sparsify(x: Tensor, cfg: SparsityConfig) -> Tensor:
    """The activation side of a sparse projection, as one autodiff node."""
    mode = cfg.mode
    if mode in (Mode.DENSE, Mode.POSTACT_TOPK):
        return x
    if mode is Mode.RELU:
        return T.relu(x)

    cfg.check_width(x.shape[-1])
    mask = compute_mask(x.data, cfg)
    if mode in (Mode.QUANTIZED_TOPK, Mode.TERNARY_TOPK):
        out = quantize_act(x.data).dequantize() * mask
    else:
        out = x.data * mask
        if cfg.rescale:
            out = l2_rescale(out, x.data)

    if cfg.ste:
        backward = lambda g: (g,)  # noqa: E731
    else:
        backward = lambda g: (g * mask,)  # noqa: E731
    return T._make(out, (x,), backward)


def effective_weight(w: Tensor, cfg: SparsityConfig) -> Tensor:
    """Ternary-dequantized weight with straight-through gradient, else ``w``."""
    if cfg.mode is not Mode.TERNARY_TOPK:
        return w
    return T._make(quantize_weight(w.data).dequantize(), (w,), lambda g: (g,))


def sparse_linear(x: Tensor, w: Tensor, cfg: SparsityConfig) -> Tensor:
    """``Y = sparsify(X) @ W_eff^T`` for every sparsity mode."""
    return T.matmul(sparsify(x, cfg), effective_weight(w, cfg))


def post_activation_top_k(h: Tensor, keep_fraction: float) -> Tensor:
    """``h * top_k_mask(h)`` with a straight-through backward."""
    if keep_fraction >= 1.0:
        return h
    mask = top_k_mask(h.data, keep_fraction)
    return T._make(h.data * mask, (h,), lambda g: (g,))
