"""PSNR, SSIM, brightness-continuity (MABD), and the histogram-matched protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from skimage.metrics import structural_similarity

from .data_io import Frame, FrameSequence, to_array, to_tensor
from .errors import DomainError, ShapeMismatchError
from .flow import estimate_flow, warp
from .preprocessing import histogram_match

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def _as_array(x) -> np.ndarray:
    if isinstance(x, Frame):
        return x.pixels.astype(np.float64)
    if isinstance(x, torch.Tensor):
        return to_array(x).astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def _luma(arr: np.ndarray) -> np.ndarray:
    return arr @ _LUMA


@dataclass
class EvalReport:
    """Per-sequence (or aggregate) metric values under one protocol."""

    name: str
    protocol: str
    psnr: float
    ssim: float
    mabd: float
    lpips: float | None = None

    def to_mapping(self) -> dict:
        return {
            "name": self.name,
            "protocol": self.protocol,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "mabd": self.mabd,
            "lpips": self.lpips,
        }


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB over [0, 1] images; +inf when equal."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def ssim(x, y) -> float:
    """Single-scale SSIM, 11x11 Gaussian window sigma 1.5, averaged over channels."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    return float(
        structural_similarity(
            a,
            b,
            channel_axis=2,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


def mabd(seq: FrameSequence, ref=None) -> float:
    """Mean absolute brightness difference between consecutive frames.

    Sequence mode (``ref=None``): per-frame mean luminances, averaged absolute
    steps. Pairwise mode: ``ref`` holds each frame's warped predecessor
    (length ``len(seq) - 1``, ``ref[t]`` aligned to ``seq[t + 1]``) and the
    difference is taken per pixel before averaging.
    """
    if len(seq) < 2:
        raise DomainError(f"MABD needs >= 2 frames, got {len(seq)}")
    if ref is None:
        brightness = [float(np.mean(_luma(_as_array(f)))) for f in seq]
        return float(np.mean(np.abs(np.diff(brightness))))
    return float(np.mean(mabd_series(seq, ref)))


def mabd_series(seq: FrameSequence, ref) -> list[float]:
    """Per-frame pairwise brightness deviations |Y(frame_t) - Y(aligned prev)|."""
    frames = list(seq)
    aligned = list(ref)
    if len(aligned) != len(frames) - 1:
        raise ShapeMismatchError(
            f"aligned reference must have {len(frames) - 1} frames, got {len(aligned)}"
        )
    out = []
    for t in range(1, len(frames)):
        cur = _luma(_as_array(frames[t]))
        prev = _luma(_as_array(aligned[t - 1]))
        if cur.shape != prev.shape:
            raise ShapeMismatchError(f"{cur.shape} vs {prev.shape}")
        out.append(float(np.mean(np.abs(cur - prev))))
    return out


def aligned_reference(seq: FrameSequence, est) -> list[np.ndarray]:
    """Warp each frame onto its successor's coordinates (for pairwise MABD)."""
    out = []
    for t in range(1, len(seq)):
        prev = to_tensor(seq[t - 1])
        cur = to_tensor(seq[t])
        flow = estimate_flow(est, prev, cur)
        out.append(to_array(warp(prev, flow)))
    return out


def evaluate(pred: FrameSequence, gt: FrameSequence, protocol: str = "raw",
             perceptual_metric=None) -> EvalReport:
    """Score a predicted sequence against ground truth under one protocol.

    ``hm`` histogram-matches each predicted frame to its ground-truth partner
    before PSNR/SSIM, removing global brightness differences; MABD is always
    computed on the raw predictions. ``perceptual_metric`` is an optional
    callable ``(pred_frame, gt_frame) -> float`` filling the otherwise absent
    perceptual column.
    """
    if protocol not in ("raw", "hm"):
        raise DomainError(f"unknown protocol '{protocol}'")
    if len(pred) != len(gt):
        raise ShapeMismatchError(f"sequence lengths differ: {len(pred)} vs {len(gt)}")
    psnrs, ssims, lpips_vals = [], [], []
    for p, g in zip(pred, gt):
        scored = p
        if protocol == "hm":
            scored = to_array(histogram_match(to_tensor(p), to_tensor(g)))
        psnrs.append(psnr(scored, g))
        ssims.append(ssim(scored, g))
        if perceptual_metric is not None:
            lpips_vals.append(float(perceptual_metric(scored, g)))
    seq_mabd = mabd(pred) if len(pred) >= 2 else float("nan")
    return EvalReport(
        name=pred.name,
        protocol=protocol,
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        mabd=seq_mabd,
        lpips=float(np.mean(lpips_vals)) if lpips_vals else None,
    )


def aggregate_reports(reports: list[EvalReport], name: str = "aggregate") -> EvalReport:
    """Unweighted mean of per-sequence reports (all must share a protocol)."""
    if not reports:
        raise DomainError("nothing to aggregate")
    protocols = {r.protocol for r in reports}
    if len(protocols) != 1:
        raise DomainError(f"cannot aggregate across protocols {sorted(protocols)}")
    lpips_vals = [r.lpips for r in reports if r.lpips is not None]
    return EvalReport(
        name=name,
        protocol=reports[0].protocol,
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        mabd=float(np.mean([r.mabd for r in reports])),
        lpips=float(np.mean(lpips_vals)) if lpips_vals else None,
    )
