"""Frame loading, resolution handling and training-clip sampling.

Frames are float32 tensors of shape ``(3, H, W)`` with values in ``[0, 1]``
and channel order R, G, B.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

MIN_SIDE = 16
ALIGN = 16
DEFAULT_FRAME_PATTERN = "f{:03d}.png"
MANIFEST_NAME = "manifest.txt"

SUPPORTED_SUFFIXES = {".png", ".bmp", ".ppm", ".tif", ".tiff"}


class FrameError(ValueError):
    """Raised for unreadable or malformed frames."""


class ResolutionError(ValueError):
    """Raised when a frame does not satisfy the multiple-of-16 constraint."""


@dataclass
class SequenceManifest:
    frame_paths: List[Path]
    height: int
    width: int
    gop: int = 10

    def __post_init__(self):
        if not self.frame_paths:
            raise ValueError("manifest needs at least one frame")
        if self.gop < 1:
            raise ValueError(f"GOP size must be >= 1, got {self.gop}")

    @property
    def count(self) -> int:
        return len(self.frame_paths)


@dataclass
class PaddedFrame:
    frame: torch.Tensor
    original_size: Tuple[int, int]  # (H, W) before padding

    def crop(self, frame: Optional[torch.Tensor] = None) -> torch.Tensor:
        h, w = self.original_size
        src = self.frame if frame is None else frame
        return src[..., :h, :w]


@dataclass
class TrainingClip:
    frames: List[torch.Tensor] = field(default_factory=list)
    window: Tuple[int, int, int] = (0, 0, 0)  # (top, left, side)

    def stacked(self) -> torch.Tensor:
        """Return the clip as a ``(T, 3, C, C)`` tensor."""
        return torch.stack(self.frames)


def check_frame(frame: torch.Tensor) -> None:
    if frame.dim() != 3 or frame.shape[0] != 3:
        raise FrameError(f"expected a (3, H, W) frame, got shape {tuple(frame.shape)}")
    h, w = frame.shape[-2:]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ResolutionError(f"frame {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}")
    if not torch.isfinite(frame).all() or frame.min() < 0 or frame.max() > 1:
        raise FrameError("frame values must lie in [0, 1]")


def load_frame(path) -> torch.Tensor:
    """Read an 8-bit RGB image and scale it to ``[0, 1]``.

    Raises:
        FileNotFoundError: if ``path`` does not exist.
        FrameError: for unsupported formats or images that are not RGB.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such frame: {path}")
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise FrameError(f"unsupported frame format {path.suffix!r} (lossless images only)")
    try:
        with Image.open(path) as img:
            mode = img.mode
            arr = np.asarray(img)
    except OSError as exc:
        raise FrameError(f"cannot decode {path}: {exc}") from exc
    if mode != "RGB" or arr.ndim != 3 or arr.shape[2] != 3:
        raise FrameError(f"{path} is not a 3-channel RGB image (mode {mode})")
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def to_uint8(frame: torch.Tensor) -> np.ndarray:
    """Quantize a ``(3, H, W)`` frame to an ``(H, W, 3)`` uint8 array."""
    arr = frame.detach().clamp(0, 1).mul(255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def save_frame(frame: torch.Tensor, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(frame), mode="RGB").save(path, format="PNG")


def padded_size(h: int, w: int, align: int = ALIGN) -> Tuple[int, int]:
    return math.ceil(h / align) * align, math.ceil(w / align) * align


def validate_or_pad(frame: torch.Tensor, policy: str = "reject") -> PaddedFrame:
    """Make sure both sides of ``frame`` are multiples of 16.

    Under ``policy="pad"`` the right and bottom edges are replicated up to
    the next multiple of 16; the original size is kept for cropping after
    decoding. Under ``policy="reject"`` a :class:`ResolutionError` names the
    offending dimension.
    """
    if policy not in ("reject", "pad"):
        raise ValueError(f"unknown padding policy {policy!r}")
    h, w = frame.shape[-2:]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ResolutionError(f"frame {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}")
    ph, pw = padded_size(h, w)
    if (ph, pw) == (h, w):
        return PaddedFrame(frame, (h, w))
    if policy == "reject":
        if w != pw:
            raise ResolutionError(f"width {w} not multiple of {ALIGN}")
        raise ResolutionError(f"height {h} not multiple of {ALIGN}")
    padded = F.pad(frame.unsqueeze(0), (0, pw - w, 0, ph - h), mode="replicate")[0]
    return PaddedFrame(padded, (h, w))


def _frame_regex(pattern: str) -> re.Pattern:
    head, _, tail = pattern.partition("{")
    _, _, tail = tail.partition("}")
    return re.compile(re.escape(head) + r"(\d+)" + re.escape(tail) + r"$")


def write_manifest(directory, height: int, width: int, count: int, gop: int) -> Path:
    path = Path(directory) / MANIFEST_NAME
    path.write_text(f"width {width}\nheight {height}\ncount {count}\ngop {gop}\n")
    return path


def read_manifest(directory, frame_pattern: str = DEFAULT_FRAME_PATTERN,
                  gop: Optional[int] = None) -> SequenceManifest:
    """Build a manifest for a folder of numbered frames.

    The sidecar ``manifest.txt`` (``key value`` lines for width, height,
    count and gop) is used when present; otherwise dimensions come from the
    first frame. An explicit ``gop`` argument overrides the sidecar.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such sequence directory: {directory}")
    rx = _frame_regex(frame_pattern)
    numbered = []
    for p in directory.iterdir():
        m = rx.match(p.name)
        if m:
            numbered.append((int(m.group(1)), p))
    numbered.sort()
    paths = [p for _, p in numbered]
    if not paths:
        raise FileNotFoundError(f"no frames matching {frame_pattern!r} in {directory}")

    meta = {}
    sidecar = directory / MANIFEST_NAME
    if sidecar.is_file():
        for line in sidecar.read_text().splitlines():
            parts = line.split()
            if len(parts) == 2:
                meta[parts[0]] = int(parts[1])
    if "width" in meta and "height" in meta:
        h, w = meta["height"], meta["width"]
    else:
        h, w = load_frame(paths[0]).shape[-2:]
    if "count" in meta and meta["count"] != len(paths):
        raise FrameError(f"manifest declares {meta['count']} frames, found {len(paths)}")
    g = gop if gop is not None else meta.get("gop", 10)
    return SequenceManifest(paths, int(h), int(w), int(g))


def load_sequence(manifest: SequenceManifest) -> List[torch.Tensor]:
    frames = []
    for p in manifest.frame_paths:
        f = load_frame(p)
        if tuple(f.shape[-2:]) != (manifest.height, manifest.width):
            raise FrameError(
                f"{p.name} is {f.shape[-2]}x{f.shape[-1]}, manifest says "
                f"{manifest.height}x{manifest.width}")
        frames.append(f)
    return frames


def sample_clips(frames: Sequence[torch.Tensor], clip_len: int = 2, crop: int = 256,
                 seed: int = 0) -> Iterator[TrainingClip]:
    """Yield an endless, seed-deterministic stream of random training clips.

    Each clip is ``clip_len`` consecutive frames cut to the same square
    window. The crop side is snapped down to a multiple of 16.
    """
    n = len(frames)
    if clip_len < 2:
        raise ValueError("clip_len must be at least 2")
    if clip_len > n:
        raise ValueError(f"clip_len {clip_len} exceeds sequence length {n}")
    h, w = frames[0].shape[-2:]
    if crop > min(h, w):
        raise ValueError(f"crop {crop} larger than frame {h}x{w}")
    side = (crop // ALIGN) * ALIGN
    if side < ALIGN:
        raise ValueError(f"crop {crop} is below the minimum of {ALIGN}")

    rng = random.Random(seed)
    while True:
        start = rng.randrange(n - clip_len + 1)
        top = rng.randrange(h - side + 1)
        left = rng.randrange(w - side + 1)
        clip = [f[:, top:top + side, left:left + side] for f in frames[start:start + clip_len]]
        yield TrainingClip(clip, (top, left, side))


def septuplet_frames(folder) -> List[torch.Tensor]:
    """Load a Vimeo-style septuplet folder (``im1.png`` ... ``im7.png``)."""
    return load_sequence(read_manifest(folder, frame_pattern="im{}.png"))


def synthetic_texture(height: int, width: int, seed: int = 0, smoothness: float = 4.0) -> torch.Tensor:
    """Smooth random RGB texture in ``[0, 1]`` (low-pass filtered noise)."""
    g = torch.Generator().manual_seed(seed)
    noise = torch.rand(1, 3, height, width, generator=g, dtype=torch.float64)
    radius = max(1, int(3 * smoothness))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-xs ** 2 / (2 * smoothness ** 2))
    k = k / k.sum()
    pad = (radius, radius, radius, radius)
    x = F.pad(noise, pad, mode="circular")
    x = F.conv2d(x, k.view(1, 1, 1, -1).repeat(3, 1, 1, 1), groups=3)
    x = F.conv2d(x, k.view(1, 1, -1, 1).repeat(3, 1, 1, 1), groups=3)
    x = x - x.amin(dim=(2, 3), keepdim=True)
    x = x / x.amax(dim=(2, 3), keepdim=True).clamp_min(1e-12)
    # snap to the 8-bit grid so the texture survives a PNG round trip
    return (x[0] * 255.0).round().div(255.0).float()


def translating_sequence(height: int = 64, width: int = 64, count: int = 2, dx: int = 2,
                         dy: int = 0, seed: int = 0, smoothness: float = 4.0,
                         noise: float = 0.0) -> List[torch.Tensor]:
    """Frames cut from one texture with a window moving ``(dx, dy)`` px per frame.

    Frame ``t+1`` at pixel ``p`` equals frame ``t`` at ``p + (dx, dy)``, so
    the backward-warping flow from frame ``t`` to ``t+1`` is exactly
    ``(dx, dy)`` wherever the source pixel is inside the frame. With
    ``noise > 0`` every frame also gets independent Gaussian noise of that
    standard deviation (then clipped and snapped to 8 bits), which no
    motion model can predict.
    """
    margin_x = abs(dx) * (count - 1)
    margin_y = abs(dy) * (count - 1)
    tex = synthetic_texture(height + margin_y, width + margin_x, seed, smoothness)
    x0 = margin_x if dx < 0 else 0
    y0 = margin_y if dy < 0 else 0
    g = torch.Generator().manual_seed(seed + 1)
    frames = []
    for t in range(count):
        top, left = y0 + dy * t, x0 + dx * t
        f = tex[:, top:top + height, left:left + width].contiguous()
        if noise > 0:
            f = f + noise * torch.randn(f.shape, generator=g)
            f = (f.clamp(0.0, 1.0) * 255.0).round() / 255.0
        frames.append(f)
    return frames


# parameters of the bundled desk-scale clip (see bundled_clip)
DESK_CLIP = dict(height=64, width=64, count=2, dx=3, dy=2, seed=0, smoothness=1.0, noise=0.02)
BUNDLED_CLIP_DIR = Path(__file__).parent / "data" / "shift_clip"


def bundled_clip() -> List[torch.Tensor]:
    """The shipped 64x64 two-frame clip translating by ``(DESK_CLIP["dx"], DESK_CLIP["dy"])``.

    It is the PNG rendering of ``translating_sequence(**DESK_CLIP)``: a
    constant true backward flow plus independent per-frame sensor noise.
    """
    return load_sequence(read_manifest(BUNDLED_CLIP_DIR))


def write_sequence(frames: Sequence[torch.Tensor], directory, gop: int = 10,
                   frame_pattern: str = DEFAULT_FRAME_PATTERN) -> SequenceManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames, start=1):
        save_frame(f, directory / frame_pattern.format(i))
    h, w = frames[0].shape[-2:]
    write_manifest(directory, h, w, len(frames), gop)
    return read_manifest(directory, frame_pattern)
