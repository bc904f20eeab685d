"""Per-frame enhancement pass, unsupervised training, and sequence inference."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .data_io import Frame, FrameSequence, RunConfig, to_array, to_tensor
from .errors import DivergenceError, DomainError, NumericalError
from .flow import align_previous, make_estimator, occlusion_mask
from .losses import LossReport, total_loss
from .networks import (
    EnhancementNets,
    RetinexPair,
    ld_forward,
    rd_noise_closure,
    re_forward,
    save_checkpoint,
)
from .preprocessing import apply_aba

DIVERGENCE_LIMIT = 1e6
EPS = 1e-4
S_MAX = 2.0
LOG_COLUMNS = ("step", "res1", "cons1", "glob", "pix", "smooth", "res2",
               "cons2", "ill", "inter", "var", "color", "mtc", "total")


@dataclass
class TemporalState:
    """Previous frame's Retinex outputs, or the zero state before any frame."""

    r_prev: torch.Tensor | None
    s_prev: torch.Tensor | None
    is_zero: bool

    @classmethod
    def zero(cls) -> "TemporalState":
        return cls(r_prev=None, s_prev=None, is_zero=True)


@dataclass
class FrameResult:
    """Every intermediate of one enhancement pass; the output frame is ``r_rd``."""

    i_ld: torch.Tensor
    r0: torch.Tensor
    r_re: torch.Tensor
    s_re: torch.Tensor
    r_rd: torch.Tensor
    s_rd: torch.Tensor
    flow: torch.Tensor
    mask: torch.Tensor
    losses: LossReport | None = None


def _stage_finite(x: torch.Tensor, stage: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values after stage '{stage}'")
    return x


def enhance_frame(
    nets: EnhancementNets,
    frame,
    state: TemporalState,
    est,
    cfg: RunConfig,
    with_losses: bool = False,
    flow_downscale: int = 1,
) -> tuple[FrameResult, TemporalState]:
    """Run the full single-frame pass and thread the temporal state forward.

    Order: first-stage denoise, brightness adjustment, temporal alignment,
    reflectance estimation, ensembled second-stage denoise, occlusion mask,
    and (optionally) the loss report computed from this same forward pass.
    """
    img = to_tensor(frame)
    ld_noise, i_ld_live = ld_forward(nets.ld, img)
    _stage_finite(i_ld_live, "ld")
    # stage boundary: the first-stage denoiser trains on its residual losses
    # alone; letting the brightness targets backprop into it turns the noise
    # head into a tone control and corrupts the denoised frame
    i_ld = i_ld_live.detach()
    aba = apply_aba(i_ld, cfg.cdf_threshold)
    _stage_finite(aba.r0, "aba")
    warped, flow = align_previous(state, i_ld, est, downscale=flow_downscale)
    pair_re = re_forward(nets.re, aba.r0, i_ld, warped.r)
    _stage_finite(pair_re.r, "re")
    rd_fn = rd_noise_closure(nets.rd, pair_re.s, warped.r, warped.s, ensemble=True)
    rd_noise = rd_fn(pair_re.r)
    r_rd = torch.clamp(pair_re.r - rd_noise, 0.0, 1.0)
    s_rd = torch.clamp(i_ld / torch.clamp(r_rd, min=EPS), 0.0, S_MAX)
    _stage_finite(r_rd, "rd")
    mask = occlusion_mask(pair_re.r, warped.r, cfg.omega)
    losses = None
    if with_losses:
        def ld_fn(x):
            return nets.ld(x)

        losses = total_loss(
            img=img,
            i_ld=i_ld,
            ld_noise_fn=ld_fn,
            r_re=pair_re.r,
            s_re=pair_re.s,
            r_rd=r_rd,
            s_rd=s_rd,
            rd_noise_fn=rd_fn,
            warped_r=warped.r,
            mask=mask,
            y_high=cfg.y_high,
            mtc_levels=cfg.mtc_levels,
            ld_noise=ld_noise,
            rd_noise=rd_noise,
            include_mtc=not state.is_zero,
        )
    result = FrameResult(
        i_ld=i_ld, r0=aba.r0, r_re=pair_re.r, s_re=pair_re.s,
        r_rd=r_rd, s_rd=s_rd, flow=flow, mask=mask, losses=losses,
    )
    new_state = TemporalState(r_prev=r_rd.detach(), s_prev=s_rd.detach(), is_zero=False)
    return result, new_state


def write_loss_log(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def train(
    sequences: list[FrameSequence],
    cfg: RunConfig,
    steps: int,
    checkpoint_out: str | Path,
    nets: EnhancementNets | None = None,
) -> list[dict]:
    """Train the enhancement nets frame-by-frame over the given sequences.

    One optimizer step per frame, temporal state threaded within each
    sequence and reset at sequence boundaries; passes over the data repeat
    until ``steps`` optimizer steps have run. Writes ``ckpt_<step>.tpx`` and
    ``loss_log.csv`` into ``checkpoint_out`` and returns the per-step log.
    Deterministic for a fixed ``cfg.seed``.
    """
    if not sequences:
        raise DomainError("training needs at least one sequence")
    for seq in sequences:
        if len(seq) < 2:
            raise DomainError(f"sequence '{seq.name}' has {len(seq)} frame(s); need >= 2")
    cfg.validate()
    out_dir = Path(checkpoint_out)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    if nets is None:
        nets = EnhancementNets()
    est = make_estimator(cfg.flow_backend, cfg.flow_checkpoint)
    opt = torch.optim.AdamW(
        nets.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        weight_decay=cfg.weight_decay,
    )
    log: list[dict] = []
    step = 0
    last_good = copy.deepcopy(nets.state_dict())
    while step < steps:
        for seq in sequences:
            state = TemporalState.zero()
            for frame in seq:
                if step >= steps:
                    break
                try:
                    result, state = enhance_frame(
                        nets, frame, state, est, cfg,
                        with_losses=True, flow_downscale=cfg.flow_train_downscale,
                    )
                    total = result.losses.total
                    total_value = float(total.detach())
                except NumericalError as exc:
                    # an overflowing forward pass is divergence, same as a huge total
                    save_checkpoint_state(last_good, out_dir / f"ckpt_{step}.tpx")
                    write_loss_log(log, out_dir / "loss_log.csv")
                    raise DivergenceError(
                        f"training diverged at step {step} ({exc}); last good checkpoint saved"
                    ) from exc
                if not math.isfinite(total_value) or total_value > DIVERGENCE_LIMIT:
                    save_checkpoint_state(last_good, out_dir / f"ckpt_{step}.tpx")
                    write_loss_log(log, out_dir / "loss_log.csv")
                    raise DivergenceError(
                        f"training diverged at step {step} (total={total_value:g}); "
                        f"last good checkpoint saved"
                    )
                # these weights produced a finite loss; they are the rollback point
                last_good = copy.deepcopy(nets.state_dict())
                opt.zero_grad()
                total.backward()
                opt.step()
                row = {"step": step}
                row.update(result.losses.to_floats())
                log.append(row)
                step += 1
            if step >= steps:
                break
    save_checkpoint(nets, out_dir / f"ckpt_{steps}.tpx")
    write_loss_log(log, out_dir / "loss_log.csv")
    return log


def save_checkpoint_state(state_dict: dict, path: str | Path) -> None:
    nets = EnhancementNets()
    nets.load_state_dict(state_dict)
    save_checkpoint(nets, path)


def enhance_sequence(nets: EnhancementNets, seq: FrameSequence, est, cfg: RunConfig) -> FrameSequence:
    """Causal online inference: frames processed in order, state threaded forward."""
    out = []
    state = TemporalState.zero()
    with torch.no_grad():
        for frame in seq:
            result, state = enhance_frame(nets, frame, state, est, cfg)
            out.append(Frame(to_array(result.r_rd), index=frame.index))
    return FrameSequence(name=seq.name, frames=out, fps=seq.fps)


def _reversed_sequence(seq: FrameSequence) -> FrameSequence:
    frames = [
        Frame(f.pixels, index=len(seq) - 1 - f.index, path=f.path)
        for f in reversed(seq.frames)
    ]
    return FrameSequence(name=seq.name, frames=frames, fps=seq.fps)


def reverse_inference(nets: EnhancementNets, seq: FrameSequence, est, cfg: RunConfig) -> FrameSequence:
    """Offline inference: average an independent forward and backward pass.

    Both passes start from a fresh zero state; the output at each position is
    the exact arithmetic mean of the two directional outputs. Uses the same
    checkpoint as online mode; no retraining involved.
    """
    fwd = enhance_sequence(nets, seq, est, cfg)
    bwd = enhance_sequence(nets, _reversed_sequence(seq), est, cfg)
    frames = []
    n = len(seq)
    for t in range(n):
        merged = (fwd[t].pixels + bwd[n - 1 - t].pixels) * 0.5
        frames.append(Frame(merged, index=t))
    return FrameSequence(name=seq.name, frames=frames, fps=seq.fps)
