"""Optical flow estimation, bilinear warping, and occlusion masking."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import EstimatorUnavailableError, ShapeError, ShapeMismatchError
from .networks import RetinexPair
from .preprocessing import histogram_match, luminance


def warp(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``src`` by ``flow``: output(p) = src(p + flow(p)), bilinear.

    ``flow`` is (N, 2, H, W) with channel 0 the x (column) displacement and
    channel 1 the y (row) displacement. Sample coordinates are clamped to the
    image border. Zero flow reproduces ``src`` bit-exactly.
    """
    if src.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"warp expects (N,C,H,W) src and (N,2,H,W) flow, got {tuple(src.shape)} / {tuple(flow.shape)}")
    if src.shape[-2:] != flow.shape[-2:] or src.shape[0] != flow.shape[0]:
        raise ShapeMismatchError(f"src {tuple(src.shape)} vs flow {tuple(flow.shape)}")
    n, c, h, w = src.shape
    dtype = src.dtype
    ys = torch.arange(h, dtype=dtype, device=src.device).view(1, 1, h, 1)
    xs = torch.arange(w, dtype=dtype, device=src.device).view(1, 1, 1, w)
    sx = (xs + flow[:, 0:1].to(dtype)).clamp(0, w - 1)
    sy = (ys + flow[:, 1:2].to(dtype)).clamp(0, h - 1)
    x0 = sx.floor()
    y0 = sy.floor()
    fx = sx - x0
    fy = sy - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src.reshape(n, c, h * w)

    def at(yi, xi):
        idx = (yi * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
        return torch.gather(flat, 2, idx).reshape(n, c, h, w)

    top = (1 - fx) * at(y0, x0) + fx * at(y0, x1)
    bottom = (1 - fx) * at(y1, x0) + fx * at(y1, x1)
    return (1 - fy) * top + fy * bottom


def occlusion_mask(r_re: torch.Tensor, r_warped: torch.Tensor, omega: float) -> torch.Tensor:
    """Exponential agreement mask: exp(-omega * channel-mean squared error).

    Returned as a constant (detached) (N, 1, H, W) tensor; the mask gates the
    temporal loss but must not adapt to reduce it.
    """
    if r_re.shape != r_warped.shape:
        raise ShapeMismatchError(f"{tuple(r_re.shape)} vs {tuple(r_warped.shape)}")
    err = (r_re.detach() - r_warped.detach()).pow(2).mean(dim=1, keepdim=True)
    return torch.exp(-omega * err)


class ZeroFlowEstimator:
    """No-motion stub; useful as a baseline and for single-image behavior."""

    def estimate(self, reference: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        n, _, h, w = target.shape
        return torch.zeros(n, 2, h, w, dtype=target.dtype, device=target.device)


class ClassicalFlowEstimator:
    """Coarse-to-fine local least-squares flow on luminance pyramids.

    Self-contained alternative to a pretrained estimator: 3 pyramid levels,
    5 warp-and-refine iterations per level, 7x7 aggregation windows. Levels
    are pre-smoothed and windows whose structure matrix has a small minimum
    eigenvalue contribute no motion, so sensor noise on flat regions reads
    as zero flow instead of random wobble.
    """

    def __init__(
        self,
        levels: int = 3,
        iters_per_level: int = 5,
        window: int = 7,
        pre_blur: int = 2,
        confidence: float = 2e-4,
    ):
        self.levels = levels
        self.iters_per_level = iters_per_level
        self.window = window
        self.pre_blur = pre_blur
        self.confidence = confidence

    def _blur(self, x: torch.Tensor, k: int | None = None) -> torch.Tensor:
        k = self.window if k is None else k
        pad = k // 2
        return F.avg_pool2d(F.pad(x, (pad, pad, pad, pad), mode="replicate"), k, stride=1)

    @staticmethod
    def _gradients(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        kx = torch.tensor([[[[-0.5, 0.0, 0.5]]]], dtype=x.dtype, device=x.device)
        padded = F.pad(x, (1, 1, 0, 0), mode="replicate")
        gx = F.conv2d(padded, kx)
        padded = F.pad(x, (0, 0, 1, 1), mode="replicate")
        gy = F.conv2d(padded, kx.transpose(2, 3))
        return gx, gy

    def estimate(self, reference: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if reference.shape != target.shape:
            raise ShapeMismatchError(f"{tuple(reference.shape)} vs {tuple(target.shape)}")
        with torch.no_grad():
            ref = luminance(reference.detach().float())
            tgt = luminance(target.detach().float())
            pyramid = [(ref, tgt)]
            while len(pyramid) < self.levels and min(pyramid[-1][0].shape[-2:]) >= 24:
                r, t = pyramid[-1]
                size = ((r.shape[-2] + 1) // 2, (r.shape[-1] + 1) // 2)
                pyramid.append(
                    (
                        F.interpolate(r, size=size, mode="bilinear", align_corners=False),
                        F.interpolate(t, size=size, mode="bilinear", align_corners=False),
                    )
                )
            n = ref.shape[0]
            coarse_h, coarse_w = pyramid[-1][0].shape[-2:]
            flow = torch.zeros(n, 2, coarse_h, coarse_w, dtype=ref.dtype, device=ref.device)
            lam = 1e-4
            for level, (r, t) in enumerate(reversed(pyramid)):
                for _ in range(self.pre_blur):
                    r = self._blur(r, 3)
                    t = self._blur(t, 3)
                if level:
                    prev_h, prev_w = flow.shape[-2:]
                    h, w = r.shape[-2:]
                    flow = F.interpolate(flow, size=(h, w), mode="bilinear", align_corners=False)
                    flow[:, 0] *= w / prev_w
                    flow[:, 1] *= h / prev_h
                for _ in range(self.iters_per_level):
                    r_w = warp(r, flow)
                    gx, gy = self._gradients(0.5 * (r_w + t))
                    it = r_w - t
                    a11 = self._blur(gx * gx)
                    a12 = self._blur(gx * gy)
                    a22 = self._blur(gy * gy)
                    lmin = 0.5 * ((a11 + a22) - torch.sqrt((a11 - a22) ** 2 + 4.0 * a12 * a12))
                    conf = (lmin > self.confidence).to(r.dtype)
                    b1 = self._blur(gx * it)
                    b2 = self._blur(gy * it)
                    a11 = a11 + lam
                    a22 = a22 + lam
                    det = a11 * a22 - a12 * a12
                    du = (-a22 * b1 + a12 * b2) / det
                    dv = (a12 * b1 - a11 * b2) / det
                    flow = flow + (conf * torch.cat([du, dv], dim=1)).clamp(-2.0, 2.0)
            bound = float(max(target.shape[-2:]))
            return flow.clamp(-bound, bound).to(target.dtype)


class ExternalFlowEstimator:
    """Adapter around a user-supplied pretrained flow model.

    The checkpoint must load via ``torch.jit.load`` or ``torch.load`` and be
    callable as ``model(a, b) -> (N, 2, H, W)`` flow such that
    ``a(p) ~= b(p + flow(p))`` (models returning per-iteration lists are
    unwrapped to their final estimate).
    """

    def __init__(self, checkpoint_path: str):
        if not checkpoint_path:
            raise EstimatorUnavailableError("external flow backend needs a checkpoint path")
        try:
            model = torch.jit.load(checkpoint_path, map_location="cpu")
        except Exception:
            try:
                model = torch.load(checkpoint_path, map_location="cpu", weights_only=False)
            except Exception as exc:
                raise EstimatorUnavailableError(
                    f"cannot load flow checkpoint {checkpoint_path}: {exc}"
                ) from exc
        if not callable(model):
            raise EstimatorUnavailableError(f"{checkpoint_path} did not load to a callable model")
        if hasattr(model, "eval"):
            model.eval()
        self.model = model

    def estimate(self, reference: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if reference.shape != target.shape:
            raise ShapeMismatchError(f"{tuple(reference.shape)} vs {tuple(target.shape)}")
        with torch.no_grad():
            out = self.model(target, reference)
        if isinstance(out, (list, tuple)):
            out = out[-1]
        n, _, h, w = target.shape
        if not isinstance(out, torch.Tensor) or out.shape != (n, 2, h, w):
            raise ShapeError(f"external flow model returned shape {getattr(out, 'shape', type(out))}, expected {(n, 2, h, w)}")
        return out.to(target.dtype)


def make_estimator(backend: str, checkpoint_path: str = ""):
    if backend == "zero":
        return ZeroFlowEstimator()
    if backend == "classical":
        return ClassicalFlowEstimator()
    if backend == "external":
        return ExternalFlowEstimator(checkpoint_path)
    raise EstimatorUnavailableError(f"unknown flow backend '{backend}'")


def estimate_flow(est, reference: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Estimate flow aligning ``reference`` content onto ``target`` coordinates."""
    flow = est.estimate(reference, target)
    n, _, h, w = target.shape
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"estimator returned {tuple(flow.shape)}, expected {(n, 2, h, w)}")
    bound = float(max(h, w))
    return flow.clamp(-bound, bound)


def align_previous(state, i_ld: torch.Tensor, est, downscale: int = 1) -> tuple[RetinexPair, torch.Tensor]:
    """Warp the previous frame's outputs onto the current frame.

    The current denoised frame is histogram-matched to the previous
    reflectance before flow estimation so the estimator sees comparable
    exposures. ``downscale`` > 1 estimates flow at reduced resolution and
    rescales the vectors (training-time accelerator). For the zero state the
    estimator is not invoked at all and zero tensors come back.

    Everything here is a constant in the training graph: gradients stop at
    the temporal boundary.
    """
    n, _, h, w = i_ld.shape
    if state.is_zero:
        zeros = torch.zeros_like(i_ld)
        flow = torch.zeros(n, 2, h, w, dtype=i_ld.dtype, device=i_ld.device)
        return RetinexPair(r=zeros, s=torch.zeros_like(i_ld)), flow
    with torch.no_grad():
        r_prev = state.r_prev.detach()
        s_prev = state.s_prev.detach()
        matched = histogram_match(i_ld.detach(), r_prev)
        if downscale > 1:
            size = (max(1, h // downscale), max(1, w // downscale))
            ref_small = F.interpolate(r_prev, size=size, mode="bilinear", align_corners=False)
            tgt_small = F.interpolate(matched, size=size, mode="bilinear", align_corners=False)
            flow_small = estimate_flow(est, ref_small, tgt_small)
            flow = F.interpolate(flow_small, size=(h, w), mode="bilinear", align_corners=False)
            flow[:, 0] *= w / size[1]
            flow[:, 1] *= h / size[0]
        else:
            flow = estimate_flow(est, r_prev, matched)
        warped_r = warp(r_prev, flow)
        warped_s = warp(s_prev, flow)
    return RetinexPair(r=warped_r, s=warped_s), flow
