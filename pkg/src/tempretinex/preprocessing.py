"""Brightness-adaptive preprocessing, histogram matching, and paired downsampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data_io import to_tensor
from .errors import DomainError, ShapeError

V_FLOOR = 1.0 / 255.0
SAFETY_FACTOR = 0.8

# BT.601 luma weights; the convention for every "luminance" in this package
_LUMA = (0.299, 0.587, 0.114)


def luminance(img: torch.Tensor) -> torch.Tensor:
    """Per-pixel luminance of a (N, 3, H, W) tensor, shape (N, 1, H, W)."""
    if img.ndim != 4 or img.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W), got {tuple(img.shape)}")
    r, g, b = img[:, 0:1], img[:, 1:2], img[:, 2:3]
    return _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b


@dataclass
class AbaResult:
    """Adaptive brightness adjustment outputs: threshold v, gain, initial reflectance.

    ``v`` and ``gamma`` are per-frame measured statistics (plain floats), so
    gradients reach ``r0`` only through the image itself. Backpropagating into
    the gain would reward darkening the input to inflate it.
    """

    v: float
    gamma: float
    r0: torch.Tensor


def compute_valid_brightness(img, cdf_threshold: float) -> float:
    """Smallest luminance value whose empirical CDF reaches ``cdf_threshold``.

    Computed as the exact order statistic (the ceil(C*N)-th smallest luminance),
    which is what the empirical CDF reading reduces to on any finite grid, and
    clamped below by 1/255 so downstream division stays bounded.
    """
    if not 0.0 < cdf_threshold <= 1.0:
        raise DomainError(f"cdf_threshold must be in (0, 1], got {cdf_threshold}")
    y = luminance(to_tensor(img)).detach().flatten()
    k = min(max(1, math.ceil(cdf_threshold * y.numel() - 1e-9)), y.numel())
    v = float(torch.kthvalue(y, k).values)
    return max(v, V_FLOOR)


def compute_gain(v: float, cdf_threshold: float) -> float:
    """Amplification coefficient ``C * 0.8 / v``."""
    v = float(v)
    if v <= 0.0:
        raise DomainError(f"valid brightness must be > 0, got {v}")
    return cdf_threshold * SAFETY_FACTOR / v


def apply_aba(img, cdf_threshold: float) -> AbaResult:
    """Adaptive brightness adjustment: gain the image to a normalized exposure.

    Returns the clamped initial reflectance ``r0 = clamp(gamma * img, 0, 1)``
    together with the statistics that produced it.
    """
    img = to_tensor(img)
    v = compute_valid_brightness(img, cdf_threshold)
    gamma = compute_gain(v, cdf_threshold)
    r0 = torch.clamp(gamma * img, 0.0, 1.0)
    return AbaResult(v=v, gamma=gamma, r0=r0)


def histogram_match(source, reference) -> torch.Tensor:
    """Remap ``source`` so each channel's 256-bin CDF matches ``reference``'s.

    The mapping is value-wise and monotone; spatial structure is untouched.
    Resolutions may differ. Not differentiable (uses an integer LUT); call it
    on detached tensors.
    """
    src = to_tensor(source)
    ref = to_tensor(reference)
    if src.shape[1] != ref.shape[1]:
        raise ShapeError(f"channel mismatch: {src.shape[1]} vs {ref.shape[1]}")
    levels = torch.arange(256, dtype=src.dtype, device=src.device)
    out = torch.empty_like(src)
    for c in range(src.shape[1]):
        sq = torch.round(src[:, c].clamp(0.0, 1.0) * 255.0).long().flatten()
        rq = torch.round(ref[:, c].clamp(0.0, 1.0) * 255.0).long().flatten()
        cdf_s = torch.cumsum(torch.bincount(sq, minlength=256).double(), 0) / sq.numel()
        cdf_r = torch.cumsum(torch.bincount(rq, minlength=256).double(), 0) / rq.numel()
        lut = torch.searchsorted(cdf_r, cdf_s, right=False).clamp(max=255)
        out[:, c] = (levels[lut] / 255.0)[sq].reshape(src[:, c].shape)
    return out.clamp(0.0, 1.0)


def pair_downsample(img) -> tuple[torch.Tensor, torch.Tensor]:
    """Split an image into two half-resolution siblings over 2x2 blocks.

    For each non-overlapping block [[a, b], [c, d]] the first output keeps the
    diagonal mean (a+d)/2 and the second the anti-diagonal mean (b+c)/2. Odd
    trailing rows/columns are dropped (the reflect-padded block would be the
    only one touching synthetic pixels).
    """
    x = to_tensor(img)
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"pair_downsample needs at least 2x2 pixels, got {h}x{w}")
    x = x[:, :, : h - h % 2, : w - w % 2]
    k1 = torch.tensor([[[[0.5, 0.0], [0.0, 0.5]]]], dtype=x.dtype, device=x.device)
    k2 = torch.tensor([[[[0.0, 0.5], [0.5, 0.0]]]], dtype=x.dtype, device=x.device)
    g1 = F.conv2d(x, k1.repeat(c, 1, 1, 1), stride=2, groups=c)
    g2 = F.conv2d(x, k2.repeat(c, 1, 1, 1), stride=2, groups=c)
    return g1, g2
