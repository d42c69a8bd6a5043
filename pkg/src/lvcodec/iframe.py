"""Pluggable intra (I-frame) codecs."""

from __future__ import annotations

import io
import os
import shutil
import subprocess
import tempfile
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
from PIL import Image

from .frames import to_uint8
from .model import BPG_QP

BPG_ENV = "LVCODEC_BPG_DIR"

# frame_type byte written in the container for each codec
FRAME_TYPE_P = 0
IFRAME_TYPES = {"lossless": 1, "bpg": 2}


class IFrameCodecUnavailable(RuntimeError):
    pass


class IFrameCodec:
    """Interface: ``encode`` returns the payload and the decoder-side reconstruction."""

    name = "abstract"

    def encode(self, frame: torch.Tensor, quality: Optional[int] = None) -> Tuple[bytes, torch.Tensor]:
        raise NotImplementedError

    def decode(self, data: bytes) -> torch.Tensor:
        raise NotImplementedError

    @property
    def frame_type(self) -> int:
        return IFRAME_TYPES[self.name]


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG", optimize=False, compress_level=9)
    return buf.getvalue()


def _from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


class LosslessCodec(IFrameCodec):
    """Stores the 8-bit frame as PNG; reconstruction is exact on 8-bit input."""

    name = "lossless"

    def encode(self, frame, quality=None):
        data = _png_bytes(to_uint8(frame))
        return data, self.decode(data)

    def decode(self, data):
        with Image.open(io.BytesIO(data)) as img:
            return _from_uint8(np.asarray(img.convert("RGB")))


class BpgCodec(IFrameCodec):
    """Adapter for the external ``bpgenc``/``bpgdec`` binaries.

    Binaries are looked up in ``$LVCODEC_BPG_DIR`` and then on ``PATH``.
    The reconstruction is produced by running the decoder on the payload,
    so it always matches what a decoder will see.
    """

    name = "bpg"

    def __init__(self, qp: int = 27, bin_dir: Optional[str] = None):
        self.qp = qp
        self.bin_dir = bin_dir or os.environ.get(BPG_ENV)

    @classmethod
    def for_lambda(cls, lam: float, bin_dir: Optional[str] = None) -> "BpgCodec":
        if float(lam) not in BPG_QP:
            raise ValueError(f"no BPG QP pairing for lambda {lam}; choose from {sorted(BPG_QP)}")
        return cls(BPG_QP[float(lam)], bin_dir)

    def _tool(self, name: str) -> str:
        if self.bin_dir:
            cand = Path(self.bin_dir) / name
            if cand.is_file():
                return str(cand)
        found = shutil.which(name)
        if found is None:
            raise IFrameCodecUnavailable(
                f"{name} not found; install BPG or set ${BPG_ENV} to its directory")
        return found

    def available(self) -> bool:
        try:
            self._tool("bpgenc")
            self._tool("bpgdec")
        except IFrameCodecUnavailable:
            return False
        return True

    def encode(self, frame, quality=None):
        qp = self.qp if quality is None else quality
        enc = self._tool("bpgenc")
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp) / "in.png", Path(tmp) / "out.bpg"
            src.write_bytes(_png_bytes(to_uint8(frame)))
            subprocess.run([enc, "-q", str(qp), "-f", "444", "-o", str(dst), str(src)],
                           check=True, capture_output=True)
            data = dst.read_bytes()
        return data, self.decode(data)

    def decode(self, data):
        dec = self._tool("bpgdec")
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp) / "in.bpg", Path(tmp) / "out.png"
            src.write_bytes(data)
            subprocess.run([dec, "-o", str(dst), str(src)], check=True, capture_output=True)
            with Image.open(dst) as img:
                return _from_uint8(np.asarray(img.convert("RGB")))


def make_iframe_codec(name: str, lam: Optional[float] = None) -> IFrameCodec:
    if name == "lossless":
        return LosslessCodec()
    if name == "bpg":
        return BpgCodec.for_lambda(lam) if lam is not None and float(lam) in BPG_QP else BpgCodec()
    raise IFrameCodecUnavailable(f"unknown I-frame codec {name!r}")


def codec_for_frame_type(frame_type: int, fallback: Optional[IFrameCodec] = None) -> IFrameCodec:
    if fallback is not None and fallback.frame_type == frame_type:
        return fallback
    for name, t in IFRAME_TYPES.items():
        if t == frame_type:
            return make_iframe_codec(name)
    raise IFrameCodecUnavailable(f"unknown I-frame type {frame_type}")
