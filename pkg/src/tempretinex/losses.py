"""The twelve self-supervised loss terms and their unit-weight total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NumericalError
from .preprocessing import luminance, pair_downsample

ALPHA_MIN = 1.0
ALPHA_MAX = 25.0
PIX_BASE = 0.7
# keeps pow()'s backward finite when the exponent carries gradients
_POW_FLOOR = 1e-8

TERM_NAMES = (
    "res1", "cons1", "glob", "pix", "smooth", "res2",
    "cons2", "ill", "inter", "var", "color", "mtc",
)


@dataclass
class LossReport:
    """All twelve loss terms plus their sum, as 0-d tensors during training."""

    res1: torch.Tensor
    cons1: torch.Tensor
    glob: torch.Tensor
    pix: torch.Tensor
    smooth: torch.Tensor
    res2: torch.Tensor
    cons2: torch.Tensor
    ill: torch.Tensor
    inter: torch.Tensor
    var: torch.Tensor
    color: torch.Tensor
    mtc: torch.Tensor
    total: torch.Tensor

    def terms(self) -> dict:
        return {name: getattr(self, name) for name in TERM_NAMES}

    def to_floats(self) -> dict:
        out = {name: float(getattr(self, name).detach()) for name in TERM_NAMES}
        out["total"] = float(self.total.detach())
        return out


@dataclass
class SmoothnessConfig:
    """5x5 Gaussian neighborhood weighting for the illumination smoothness term."""

    window: int = 5
    sigma: float = 1.5


def _res_cons(noise_fn, img: torch.Tensor, noise_full: torch.Tensor | None = None):
    """Residual and consistency noise losses from one pair-downsampling pass.

    ``noise_full`` may carry a precomputed ``noise_fn(img)`` so the training
    step reuses its forward pass instead of running the denoiser again.
    """
    g1, g2 = pair_downsample(img)
    f1 = noise_fn(g1)
    f2 = noise_fn(g2)
    res = ((g1 - f1 - g2) ** 2).mean() + ((g2 - f2 - g1) ** 2).mean()
    if noise_full is None:
        noise_full = noise_fn(img)
    d1, d2 = pair_downsample(img - noise_full)
    cons = ((g1 - f1 - d1) ** 2).mean() + ((g2 - f2 - d2) ** 2).mean()
    return res, cons


def l_res(noise_fn, img) -> torch.Tensor:
    """Residual loss: each downsampled sibling, denoised, should match the other."""
    return _res_cons(noise_fn, img)[0]


def l_cons(noise_fn, img, noise_full: torch.Tensor | None = None) -> torch.Tensor:
    """Consistency loss: denoise-then-downsample must equal downsample-then-denoise."""
    return _res_cons(noise_fn, img, noise_full)[1]


def brightness_alpha(i_ld: torch.Tensor, y_high: float) -> torch.Tensor:
    """Adaptive gain target y_high / mean-luminance, clamped to [1, 25]."""
    y_l = luminance(i_ld).mean()
    return torch.clamp(y_high / torch.clamp(y_l, min=1e-8), ALPHA_MIN, ALPHA_MAX)


def l_glob(r_re: torch.Tensor, i_ld: torch.Tensor, y_high: float) -> torch.Tensor:
    """Pull the reflectance toward the brightness-amplified frame."""
    alpha = brightness_alpha(i_ld, y_high)
    return ((r_re - alpha * i_ld) ** 2).mean()


def l_pix(s_re: torch.Tensor, i_ld: torch.Tensor, alpha) -> torch.Tensor:
    """Match illumination to a gamma-like remap of the amplified frame."""
    alpha = torch.as_tensor(alpha, dtype=s_re.dtype, device=s_re.device)
    lam = torch.pow(torch.as_tensor(PIX_BASE, dtype=s_re.dtype, device=s_re.device), -alpha) / alpha
    target = lam * torch.pow((alpha * i_ld).clamp(min=_POW_FLOOR), alpha)
    return ((s_re - target) ** 2).mean()


def _gaussian_offsets(window: int, sigma: float, dtype, device):
    half = window // 2
    offs = []
    weights = []
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            offs.append((dy, dx))
            weights.append(math.exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma)))
    w = torch.tensor(weights, dtype=dtype, device=device)
    return offs, w / w.sum()


def l_smooth(s: torch.Tensor, cfg: SmoothnessConfig | None = None) -> torch.Tensor:
    """Total-variation-squared plus Gaussian-weighted neighborhood roughness."""
    cfg = cfg or SmoothnessConfig()
    dx = torch.zeros_like(s)
    dy = torch.zeros_like(s)
    dx[..., :, :-1] = s[..., :, 1:] - s[..., :, :-1]
    dy[..., :-1, :] = s[..., 1:, :] - s[..., :-1, :]
    term1 = ((dx.abs() + dy.abs()) ** 2).mean()

    half = cfg.window // 2
    offs, weights = _gaussian_offsets(cfg.window, cfg.sigma, s.dtype, s.device)
    padded = F.pad(s, (half, half, half, half), mode="replicate")
    h, w = s.shape[-2:]
    acc = torch.zeros_like(s)
    for (dyo, dxo), wij in zip(offs, weights):
        shifted = padded[..., half + dyo : half + dyo + h, half + dxo : half + dxo + w]
        acc = acc + wij * (s - shifted).abs()
    term2 = acc.mean()
    return term1 + term2


def l_ill(s_rd: torch.Tensor, s_re: torch.Tensor) -> torch.Tensor:
    """Illumination stability across the second denoising stage."""
    return ((s_rd - s_re) ** 2).mean()


def l_mtc(r_rd: torch.Tensor, r_warped: torch.Tensor, mask: torch.Tensor, levels: int) -> torch.Tensor:
    """Occlusion-gated temporal consistency over a bicubic pyramid.

    Level 1 is full resolution; each further level halves both dimensions.
    Levels that would shrink below one pixel are dropped rather than erroring.
    """
    d = mask * (r_rd - r_warped)
    h, w = d.shape[-2:]
    while levels > 1 and min(h, w) < 2 ** (levels - 1):
        levels -= 1
    loss = d.abs().mean()
    for i in range(1, levels):
        size = (max(1, h >> i), max(1, w >> i))
        loss = loss + F.interpolate(d, size=size, mode="bicubic", align_corners=False).abs().mean()
    return loss


def l_color(r_rd: torch.Tensor, r_re: torch.Tensor) -> torch.Tensor:
    """Squared distance between per-channel spatial means."""
    m1 = r_rd.mean(dim=(0, 2, 3))
    m2 = r_re.mean(dim=(0, 2, 3))
    return ((m1 - m2) ** 2).sum()


def _local_variance(x: torch.Tensor, window: int) -> torch.Tensor:
    mu = F.avg_pool2d(x, window, stride=1)
    ex2 = F.avg_pool2d(x * x, window, stride=1)
    return ex2 - mu * mu


def l_var(r_rd: torch.Tensor, r_re: torch.Tensor, window: int = 7) -> torch.Tensor:
    """Mean absolute difference of local 7x7 variances (texture preservation)."""
    return (_local_variance(r_rd, window) - _local_variance(r_re, window)).abs().mean()


def l_inter(r_rd: torch.Tensor, s_rd: torch.Tensor, i_ld: torch.Tensor) -> torch.Tensor:
    """Reconstruction coupling: the denoised factors must still compose the frame."""
    return ((r_rd * s_rd - i_ld) ** 2).mean()


def total_loss(
    img: torch.Tensor,
    i_ld: torch.Tensor,
    ld_noise_fn,
    r_re: torch.Tensor,
    s_re: torch.Tensor,
    r_rd: torch.Tensor,
    s_rd: torch.Tensor,
    rd_noise_fn,
    warped_r: torch.Tensor,
    mask: torch.Tensor,
    y_high: float,
    mtc_levels: int = 4,
    smooth_cfg: SmoothnessConfig | None = None,
    ld_noise: torch.Tensor | None = None,
    rd_noise: torch.Tensor | None = None,
    include_mtc: bool = True,
) -> LossReport:
    """Evaluate all twelve terms from one forward pass and sum them (unit weights).

    ``ld_noise``/``rd_noise`` accept the noise predictions already computed by
    the forward pass so nothing is run twice. ``include_mtc=False`` (first
    frame of a sequence) and ``mtc_levels=0`` (ablation) both record a zero
    temporal term.
    """
    res1, cons1 = _res_cons(ld_noise_fn, img, ld_noise)
    alpha = brightness_alpha(i_ld, y_high)
    glob = l_glob(r_re, i_ld, y_high)
    pix = l_pix(s_re, i_ld, alpha)
    smooth = l_smooth(s_re, smooth_cfg)
    res2, cons2 = _res_cons(rd_noise_fn, r_re, rd_noise)
    ill = l_ill(s_rd, s_re)
    inter = l_inter(r_rd, s_rd, i_ld)
    var = l_var(r_rd, r_re)
    color = l_color(r_rd, r_re)
    if include_mtc and mtc_levels > 0:
        mtc = l_mtc(r_rd, warped_r, mask, mtc_levels)
    else:
        mtc = torch.zeros((), dtype=img.dtype, device=img.device)
    values = dict(
        res1=res1, cons1=cons1, glob=glob, pix=pix, smooth=smooth, res2=res2,
        cons2=cons2, ill=ill, inter=inter, var=var, color=color, mtc=mtc,
    )
    for name, value in values.items():
        if not torch.isfinite(value):
            raise NumericalError(f"loss term '{name}' is non-finite")
    total = sum(values[name] for name in TERM_NAMES)
    return LossReport(total=total, **values)
