"""Rate-distortion measurement of a model on one sequence, plus CSV reporting."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import torch
from torch import Tensor

from .codec import ContainerError, decode_sequence, encode_sequence, read_container
from .iframe import IFrameCodec
from .metrics import max_scales, msssim, psnr
from .model import CodecModel

CSV_FIELDS = ("sequence", "lambda", "metric", "bpp", "psnr_db", "msssim")


class VerificationError(RuntimeError):
    """Decoder output differs from the encoder's reconstruction (a codec bug)."""


@dataclass
class RdPoint:
    sequence: str
    lam: float
    metric: str
    bpp: float
    psnr_db: float
    msssim: float

    def row(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return {k: d[k] for k in CSV_FIELDS}


def frame_msssim(a: Tensor, b: Tensor) -> float:
    """MS-SSIM with as many scales as the frame allows (up to five)."""
    scales = max_scales(*a.shape[-2:])
    if scales == 0:
        return math.nan
    return float(msssim(a.double(), b.double(), scales))


def evaluate(frames: Sequence[Tensor], model: CodecModel, iframe_codec: IFrameCodec,
             gop: int = 10, sequence: str = "sequence", policy: str = "reject",
             container: Optional[bytes] = None) -> RdPoint:
    """Encode, decode and verify a sequence, then measure rate and quality.

    If ``container`` is given it is decoded instead of a fresh encoding; the
    frames are still re-encoded so the decoder output can be checked against
    the encoder's reconstructions. Metrics average over every frame,
    I-frames included, and bpp counts every byte of the container against
    the original (uncropped) frame size.

    Raises:
        VerificationError: if decoding fails or disagrees with the encoder.
    """
    enc = encode_sequence(frames, model, iframe_codec, gop=gop, policy=policy)
    data = enc.data if container is None else container
    try:
        decoded = decode_sequence(data, model, iframe_codec)
    except ContainerError as exc:
        raise VerificationError(f"container failed to decode: {exc}") from exc
    if len(decoded) != len(enc.recons):
        raise VerificationError(f"decoded {len(decoded)} frames, encoded {len(enc.recons)}")
    for t, (d, e) in enumerate(zip(decoded, enc.recons)):
        if not torch.equal(d, e):
            raise VerificationError(f"frame {t}: decoder output differs from encoder reconstruction")
    header, _ = read_container(data)
    bpp = 8 * len(data) / (header.frame_count * header.width * header.height)
    psnrs = [psnr(d, f) for d, f in zip(decoded, frames)]
    ssims = [frame_msssim(d, f) for d, f in zip(decoded, frames)]
    return RdPoint(sequence, model.lam, model.metric, bpp,
                   sum(psnrs) / len(psnrs), sum(ssims) / len(ssims))


def write_rd_csv(points: Iterable[RdPoint], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for p in points:
            writer.writerow(p.row())


def read_rd_csv(path) -> List[RdPoint]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
            raise ValueError(f"{path}: expected columns {','.join(CSV_FIELDS)}")
        return [RdPoint(r["sequence"], float(r["lambda"]), r["metric"], float(r["bpp"]),
                        float(r["psnr_db"]), float(r["msssim"])) for r in reader]
