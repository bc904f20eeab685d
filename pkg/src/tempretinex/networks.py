"""The three enhancement subnetworks, geometric self-ensemble, and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, NumericalError, ShapeError

EPS = 1e-4
S_MAX = 2.0
FORMAT_TAG = "tempretinex-v1"


@dataclass
class RetinexPair:
    """A reflectance/illumination pair; both stored as (1, 3, H, W) tensors."""

    r: torch.Tensor
    s: torch.Tensor


def _conv_stack(channels: tuple[int, ...]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
        if i:
            layers.append(nn.LeakyReLU(0.2, inplace=True))
        layers.append(nn.Conv2d(cin, cout, 3, padding=1))
    # residual heads start at the identity solution
    nn.init.zeros_(layers[-1].weight)
    nn.init.zeros_(layers[-1].bias)
    return nn.Sequential(*layers)


class LdNet(nn.Module):
    """Predicts additive noise in the raw low-light frame (3 conv layers)."""

    def __init__(self):
        super().__init__()
        self.body = _conv_stack((3, 48, 48, 3))

    def forward(self, x):
        return self.body(x)


class ReNet(nn.Module):
    """Residual reflectance refinement over [r0 || warped previous reflectance]."""

    def __init__(self):
        super().__init__()
        self.body = _conv_stack((6, 48, 48, 3))

    def forward(self, x):
        return self.body(x)


class RdNet(nn.Module):
    """Predicts residual sensor noise from the stacked Retinex context (4 conv layers)."""

    def __init__(self):
        super().__init__()
        self.body = _conv_stack((8, 96, 96, 96, 3))

    def forward(self, x):
        return self.body(x)


class EnhancementNets(nn.Module):
    """Container for the three subnets, checkpointed as one unit."""

    def __init__(self):
        super().__init__()
        self.ld = LdNet()
        self.re = ReNet()
        self.rd = RdNet()


# (transform, inverse) pairs over (..., H, W); each inverse is exact
TRANSFORMS = (
    (lambda x: x, lambda x: x),
    (lambda x: torch.flip(x, (-1,)), lambda x: torch.flip(x, (-1,))),
    (lambda x: torch.flip(x, (-2,)), lambda x: torch.flip(x, (-2,))),
    (lambda x: torch.rot90(x, 1, (-2, -1)), lambda x: torch.rot90(x, -1, (-2, -1))),
)


def self_ensemble(apply, img: torch.Tensor) -> torch.Tensor:
    """Average ``apply`` over flips and a 90-degree rotation of its input.

    Weights are shared across the four branches, so no parameters are added.
    ``apply`` must preserve spatial dimensions (channel count may change).
    """
    outs = []
    for fwd, inv in TRANSFORMS:
        tx = fwd(img)
        y = apply(tx)
        if y.shape[-2:] != tx.shape[-2:]:
            raise ShapeError(
                f"self-ensemble branch changed spatial shape: {tuple(tx.shape[-2:])} "
                f"-> {tuple(y.shape[-2:])}"
            )
        outs.append(inv(y))
    # pairwise sum keeps the identity case bit-exact
    return (outs[0] + outs[1] + (outs[2] + outs[3])) * 0.25


def _check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values in {what}")
    return x


def ld_forward(net: LdNet, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the first denoising stage: returns (noise_pred, denoised frame)."""
    noise = _check_finite(net(img), "LD noise prediction")
    i_ld = torch.clamp(img - noise, 0.0, 1.0)
    return noise, i_ld


def re_forward(net: ReNet, r0: torch.Tensor, i_ld: torch.Tensor, warped_prev_r: torch.Tensor) -> RetinexPair:
    """Refine the initial reflectance and derive illumination by division."""
    update = _check_finite(net(torch.cat([r0, warped_prev_r], dim=1)), "RE update")
    r_re = torch.clamp(r0 + update, EPS, 1.0)
    s_re = torch.clamp(i_ld / r_re, 0.0, S_MAX)
    return RetinexPair(r=r_re, s=s_re)


def _flat_illumination(s: torch.Tensor) -> torch.Tensor:
    # illumination enters the denoiser as a single ratio channel
    return s.mean(dim=1, keepdim=True)


def rd_noise_closure(net: RdNet, s_re, warped_r, warped_s, ensemble: bool = True):
    """Build the second-stage denoiser as a function of reflectance alone.

    The returned callable accepts any (1, 3, h, w) tensor and stacks the
    illumination/temporal context alongside it, resized to match, so the same
    function serves full-resolution inference and the half-resolution noise
    losses.
    """
    s1 = _flat_illumination(s_re)
    ws1 = _flat_illumination(warped_s)

    def noise_fn(x: torch.Tensor) -> torch.Tensor:
        hw = x.shape[-2:]
        ctx = [s1, warped_r, ws1]
        if s1.shape[-2:] != hw:
            ctx = [
                F.interpolate(c, size=hw, mode="bilinear", align_corners=False) for c in ctx
            ]
        z = torch.cat([x, ctx[0], ctx[1], ctx[2]], dim=1)
        out = self_ensemble(net, z) if ensemble else net(z)
        return _check_finite(out, "RD noise prediction")

    return noise_fn


def rd_forward(
    net: RdNet,
    pair: RetinexPair,
    warped_prev: RetinexPair,
    i_ld: torch.Tensor,
    ensemble: bool = True,
) -> RetinexPair:
    """Second denoising stage; illumination is recomputed from the denoised output."""
    noise_fn = rd_noise_closure(net, pair.s, warped_prev.r, warped_prev.s, ensemble=ensemble)
    r_rd = torch.clamp(pair.r - noise_fn(pair.r), 0.0, 1.0)
    s_rd = torch.clamp(i_ld / torch.clamp(r_rd, min=EPS), 0.0, S_MAX)
    return RetinexPair(r=r_rd, s=s_rd)


def save_checkpoint(nets: EnhancementNets, path: str | Path) -> None:
    """Serialize all weights as named float32 arrays with a format tag."""
    arrays = {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in nets.state_dict().items()
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __format__=np.array(FORMAT_TAG), **arrays)


def load_checkpoint(path: str | Path, nets: EnhancementNets | None = None) -> EnhancementNets:
    """Restore weights saved by :func:`save_checkpoint` into fresh or given nets."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if "__format__" not in archive.files:
            raise CheckpointError(f"{path} has no format tag; not a checkpoint")
        tag = str(archive["__format__"])
        if tag != FORMAT_TAG:
            raise CheckpointError(f"{path}: unsupported format '{tag}' (expected {FORMAT_TAG})")
        state = {name: torch.from_numpy(archive[name]) for name in archive.files if name != "__format__"}
    if nets is None:
        nets = EnhancementNets()
    expected = set(nets.state_dict().keys())
    got = set(state.keys())
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise CheckpointError(f"{path}: weight names mismatch (missing {missing}, extra {extra})")
    try:
        nets.load_state_dict(state)
    except Exception as exc:
        raise CheckpointError(f"{path}: incompatible weight shapes: {exc}") from exc
    return nets
