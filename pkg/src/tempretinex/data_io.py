"""Frame/sequence containers, disk IO, synthetic sequences, and run configuration."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import (
    ConfigError,
    DomainError,
    IoError,
    NoFramesError,
    ShapeError,
    ShapeMismatchError,
)

MIN_SIDE = 16

# config keys may use the dotted spelling from older run files
_KEY_ALIASES = {
    "flow.backend": "flow_backend",
    "flow.checkpoint_path": "flow_checkpoint",
}


@dataclass
class Frame:
    """One video frame: float32 RGB pixels in [0, 1] plus its temporal index."""

    pixels: np.ndarray
    index: int = 0
    path: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"frame must be HxWx3, got {self.pixels.shape}")
        h, w = self.pixels.shape[:2]
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ShapeError(f"frame must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
        if not np.isfinite(self.pixels).all():
            raise DomainError("frame contains non-finite pixels")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DomainError("frame pixels must lie in [0, 1]")
        if self.index < 0:
            raise DomainError(f"frame index must be >= 0, got {self.index}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class FrameSequence:
    """An ordered, shape-consistent list of frames. Immutable by convention."""

    name: str
    frames: list[Frame] = field(default_factory=list)
    fps: float | None = None

    def __post_init__(self):
        shapes = {f.pixels.shape for f in self.frames}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"sequence '{self.name}' mixes resolutions: {sorted(shapes)}")
        for t, f in enumerate(self.frames):
            if f.index != t:
                raise DomainError(
                    f"sequence '{self.name}' indices must be consecutive from 0; "
                    f"position {t} holds index {f.index}"
                )

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, t: int) -> Frame:
        return self.frames[t]


@dataclass
class RunConfig:
    """All tunable knobs of a run. Defaults follow the reference training setup."""

    y_high: float = 0.3
    cdf_threshold: float = 0.99
    safety_factor: float = 0.8
    omega: float = 100.0
    learning_rate: float = 5e-5
    weight_decay: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    flow_train_downscale: int = 3
    mtc_levels: int = 4
    seed: int = 0
    flow_backend: str = "classical"
    flow_checkpoint: str = ""
    per_video: bool = False

    def validate(self) -> "RunConfig":
        if not 0.0 < self.y_high <= 1.0:
            raise ConfigError(f"y_high must be in (0, 1], got {self.y_high}")
        if not 0.0 < self.cdf_threshold <= 1.0:
            raise ConfigError(f"cdf_threshold must be in (0, 1], got {self.cdf_threshold}")
        if self.safety_factor <= 0.0:
            raise ConfigError(f"safety_factor must be > 0, got {self.safety_factor}")
        if self.omega <= 0.0:
            raise ConfigError(f"omega must be > 0, got {self.omega}")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {b}")
        if self.flow_train_downscale < 1:
            raise ConfigError(f"flow_train_downscale must be >= 1, got {self.flow_train_downscale}")
        # mtc_levels = 0 disables the temporal consistency term (ablation hook)
        if self.mtc_levels < 0:
            raise ConfigError(f"mtc_levels must be >= 0, got {self.mtc_levels}")
        if self.flow_backend not in ("classical", "zero", "external"):
            raise ConfigError(f"unknown flow backend '{self.flow_backend}'")
        return self

    def to_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **kwargs) -> "RunConfig":
        m = self.to_mapping()
        m.update(kwargs)
        return RunConfig(**m).validate()


def _parse_config_value(name: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key '{name}' expects {kind.__name__}, got '{raw}'") from exc


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    """Read a flat ``key = value`` config file on top of ``base`` (or defaults).

    Lines starting with ``#`` and blank lines are ignored. Unknown keys warn
    instead of failing so configs survive version skew.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = base if base is not None else RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    # dataclass field types arrive as strings under `from __future__ import annotations`
    kinds = {"float": float, "int": int, "str": str, "bool": bool}
    updates = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{stripped}'")
        key, _, value = stripped.partition("=")
        key = _KEY_ALIASES.get(key.strip(), key.strip())
        if key not in types:
            warnings.warn(f"{path}:{lineno}: unknown config key '{key}' ignored")
            continue
        updates[key] = _parse_config_value(key, value, kinds[str(types[key])])
    return cfg.replace(**updates)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.to_mapping().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def config_from_env(base: RunConfig | None = None) -> RunConfig:
    """Apply the config file named by TEMPRETINEX_CONFIG, if any."""
    env = os.environ.get("TEMPRETINEX_CONFIG", "")
    cfg = base if base is not None else RunConfig()
    if env:
        cfg = load_config(env, cfg)
    return cfg


def to_tensor(frame, dtype=None) -> torch.Tensor:
    """Coerce a Frame, HxWx3 array, or tensor to a (1, 3, H, W) torch tensor.

    Floating tensors keep their dtype unless one is forced, so 64-bit
    gradient probes survive round trips; everything else loads as float32.
    """
    if isinstance(frame, Frame):
        frame = frame.pixels
    if isinstance(frame, torch.Tensor):
        t = frame
        if t.ndim == 3:
            t = t.unsqueeze(0)
        if dtype is None:
            return t if t.is_floating_point() else t.to(torch.float32)
        return t.to(dtype)
    arr = np.asarray(frame)
    if arr.ndim != 3:
        raise ShapeError(f"expected HxWxC array, got shape {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).unsqueeze(0)
    return t.to(dtype or torch.float32)


def to_array(tensor: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_tensor`: (1, C, H, W) or (C, H, W) -> HxWxC float32."""
    t = tensor.detach()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ShapeError(f"expected batch size 1, got {t.shape[0]}")
        t = t[0]
    return t.permute(1, 2, 0).cpu().numpy().astype(np.float32)


def load_frame(path: str | Path, index: int = 0) -> Frame:
    """Load one 8- or 16-bit image as a normalized RGB frame.

    Parameters
    ----------
    path : str or Path
        Image file readable by OpenCV (PNG/JPG).
    index : int
        Temporal position to record on the frame.
    """
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IoError(f"cannot decode image: {path}")
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=2)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise IoError(f"unsupported bit depth {raw.dtype} in {path}")
    rgb = raw[:, :, ::-1].astype(np.float32) / scale
    return Frame(np.clip(rgb, 0.0, 1.0), index=index, path=str(path))


def save_frame(frame: Frame | np.ndarray, path: str | Path, format: str = "png8") -> None:
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float32)
    if format == "png8":
        scaled = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    elif format == "png16":
        scaled = np.rint(np.clip(pixels, 0.0, 1.0) * 65535.0).astype(np.uint16)
    else:
        raise ConfigError(f"unknown save format '{format}'")
    ok = cv2.imwrite(str(path), scaled[:, :, ::-1])
    if not ok:
        raise IoError(f"cannot write image: {path}")


def load_sequence(dir_path: str | Path, pattern: str = "*.png") -> FrameSequence:
    """Load every image matching ``pattern`` under ``dir_path``, sorted by filename.

    Frames are normalized by their bit-depth maximum and clamped to [0, 1].
    Raises NoFramesError when nothing matches and ShapeMismatchError when the
    matched frames disagree in resolution.
    """
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise NoFramesError(f"not a directory: {dir_path}")
    paths = sorted(dir_path.glob(pattern))
    if not paths:
        raise NoFramesError(f"no frames matching '{pattern}' in {dir_path}")
    frames = [load_frame(p, index=i) for i, p in enumerate(paths)]
    return FrameSequence(name=dir_path.name, frames=frames)


def save_sequence(seq: FrameSequence, dir_path: str | Path, format: str = "png8") -> int:
    """Write ``seq`` as ``<dir>/<%06d>.png`` files; returns the frame count."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for frame in seq:
        save_frame(frame, dir_path / f"{frame.index:06d}.png", format=format)
    return len(seq)


def discover_sequences(root: str | Path, pattern: str = "*.png") -> list[FrameSequence]:
    """Load a dataset tree ``<root>/<sequence_name>/<frames>``.

    A root that itself contains frames is treated as one sequence. Extends to
    JPG automatically when the default pattern matches nothing.
    """
    root = Path(root)
    if not root.is_dir():
        raise NoFramesError(f"not a directory: {root}")

    def _try_load(d: Path) -> FrameSequence | None:
        for pat in (pattern, "*.jpg", "*.jpeg"):
            try:
                return load_sequence(d, pat)
            except NoFramesError:
                continue
        return None

    direct = _try_load(root)
    if direct is not None:
        return [direct]
    found = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        seq = _try_load(sub)
        if seq is not None:
            found.append(seq)
    if not found:
        raise NoFramesError(f"no frame sequences under {root}")
    return found


def _scene_background(h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    checker = ((yy // 8 + xx // 8) % 2).astype(np.float32)
    ramp = (yy + xx).astype(np.float32) / float(h + w - 2)
    base = 0.25 + 0.2 * checker + 0.3 * ramp
    return np.stack([base, base * 0.95 + 0.02, base * 0.9 + 0.04], axis=2).astype(np.float32)


def _paint_square(img: np.ndarray, top: int, left: int, side: int, value) -> None:
    h, w = img.shape[:2]
    t0, l0 = max(0, top), max(0, left)
    t1, l1 = min(h, top + side), min(w, left + side)
    if t1 > t0 and l1 > l0:
        img[t0:t1, l0:l1] = value


def synth_sequence(
    kind: str,
    n_frames: int,
    brightness_scale: float,
    noise_sigma: float,
    seed: int,
    size: tuple[int, int] = (64, 64),
) -> tuple[FrameSequence, FrameSequence]:
    """Generate a (low-light, ground-truth) pair of synthetic sequences.

    The truth scene is a checkerboard plus diagonal ramp; ``pan`` adds one
    moving square, ``occlusion`` two squares crossing paths. The low-light
    companion is ``clamp(brightness_scale * truth + N(0, noise_sigma))``.
    Pure function of its arguments: identical inputs give identical arrays.
    """
    if kind not in ("static", "pan", "occlusion"):
        raise ConfigError(f"unknown synthetic kind '{kind}'")
    if n_frames < 2:
        raise ConfigError(f"synthetic sequences need >= 2 frames, got {n_frames}")
    if not 0.0 < brightness_scale <= 1.0:
        raise ConfigError(f"brightness_scale must be in (0, 1], got {brightness_scale}")
    if noise_sigma < 0.0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")
    h, w = size
    rng = np.random.default_rng(seed)
    bg = _scene_background(h, w)
    side = max(6, min(h, w) // 6)
    truth_frames, low_frames = [], []
    for t in range(n_frames):
        scene = bg.copy()
        if kind == "pan":
            _paint_square(scene, h // 4 + t, w // 8 + 2 * t, side, (0.85, 0.8, 0.75))
        elif kind == "occlusion":
            _paint_square(scene, h // 3, w // 8 + 3 * t, side, (0.85, 0.8, 0.75))
            _paint_square(scene, h // 3, w - w // 8 - side - 3 * t, side, (0.1, 0.15, 0.2))
        truth = np.clip(scene, 0.0, 1.0).astype(np.float32)
        noise = rng.normal(0.0, noise_sigma, truth.shape).astype(np.float32) if noise_sigma > 0 else 0.0
        low = np.clip(brightness_scale * truth + noise, 0.0, 1.0).astype(np.float32)
        truth_frames.append(Frame(truth, index=t))
        low_frames.append(Frame(low, index=t))
    return (
        FrameSequence(name=f"{kind}", frames=low_frames),
        FrameSequence(name=f"{kind}", frames=truth_frames),
    )
