"""P-frame coding, sequence coding and the container format.

Container layout (little-endian)::

    magic "ODVC" | u8 version | u16 W, u16 H (original) | u16 W, u16 H (padded)
    | u32 N | u16 GOP | u8 metric | f32 lambda | 32-byte model hash
    then N records: u8 frame_type | u32 len | payload | u32 crc32(payload)

``frame_type`` 0 is a P-frame; other values name the I-frame codec. A
P-frame payload is ``u32 mv_len | mv bytes | u32 res_len | res bytes``.
Both streams are range coded with the model's CDF tables in channel-major,
row-major order. The file must end exactly after the N-th record.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from .bottleneck import quantize, range_decode, range_encode
from .frames import ResolutionError, padded_size, validate_or_pad
from .iframe import FRAME_TYPE_P, IFrameCodec, codec_for_frame_type
from .model import CodecModel
from .rangecoder import StreamError
from .transforms import LATENT_CHANNELS

MAGIC = b"ODVC"
CONTAINER_VERSION = 1
HEADER = struct.Struct("<4sBHHHHIHBf32s")
RECORD_HEAD = struct.Struct("<BI")
U32 = struct.Struct("<I")
METRIC_CODES = {"mse": 0, "ms-ssim": 1}
DEFAULT_GOP = 10


class ContainerError(ValueError):
    """Malformed, truncated or corrupted container."""


class ModelMismatch(ContainerError):
    """The container was produced by a different model."""


@dataclass
class PFramePayload:
    motion: bytes
    residual: bytes
    latent_hw: Tuple[int, int]
    model_hash: bytes = b""

    @property
    def symbol_count(self) -> int:
        h, w = self.latent_hw
        return h * w * LATENT_CHANNELS

    def to_bytes(self) -> bytes:
        return U32.pack(len(self.motion)) + self.motion + U32.pack(len(self.residual)) + self.residual

    @classmethod
    def from_bytes(cls, data: bytes, latent_hw, model_hash: bytes = b"") -> "PFramePayload":
        try:
            (n_mv,) = U32.unpack_from(data, 0)
            mv = data[4:4 + n_mv]
            (n_res,) = U32.unpack_from(data, 4 + n_mv)
            res = data[8 + n_mv:8 + n_mv + n_res]
        except struct.error as exc:
            raise ContainerError("truncated P-frame payload") from exc
        if len(mv) != n_mv or len(res) != n_res or 8 + n_mv + n_res != len(data):
            raise ContainerError("P-frame payload lengths are inconsistent")
        return cls(mv, res, tuple(latent_hw), model_hash)


@dataclass
class ContainerHeader:
    width: int
    height: int
    padded_width: int
    padded_height: int
    frame_count: int
    gop: int
    metric: str
    lam: float
    model_hash: bytes
    version: int = CONTAINER_VERSION

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.width, self.height, self.padded_width,
                           self.padded_height, self.frame_count, self.gop,
                           METRIC_CODES[self.metric], self.lam, self.model_hash)

    @classmethod
    def unpack(cls, data: bytes) -> "ContainerHeader":
        if len(data) < HEADER.size:
            raise ContainerError("container is shorter than its header")
        magic, ver, w, h, pw, ph, n, g, metric, lam, digest = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}")
        if ver != CONTAINER_VERSION:
            raise ContainerError(f"unsupported container version {ver}")
        names = {v: k for k, v in METRIC_CODES.items()}
        if metric not in names:
            raise ContainerError(f"unknown metric code {metric}")
        return cls(w, h, pw, ph, n, g, names[metric], lam, digest, ver)


@dataclass
class FrameRecord:
    frame_type: int
    payload: bytes

    def pack(self) -> bytes:
        return RECORD_HEAD.pack(self.frame_type, len(self.payload)) + self.payload + \
            U32.pack(zlib.crc32(self.payload))


# -- P-frames -------------------------------------------------------------------

def _latent_to_symbols(latent: Tensor) -> np.ndarray:
    return quantize(latent, "test")[0].to(torch.int64).numpy()


def _symbols_to_latent(symbols: np.ndarray) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(symbols)).to(torch.float32).unsqueeze(0)


def _check_pair(ref: Tensor, raw: Tensor) -> None:
    if ref.shape != raw.shape:
        raise ValueError(f"reference {tuple(ref.shape)} and frame {tuple(raw.shape)} differ")
    h, w = raw.shape[-2:]
    if h % 16 or w % 16:
        raise ResolutionError(f"P-frames need sides that are multiples of 16, got {h}x{w}")


@torch.no_grad()
def encode_pframe(ref_com: Tensor, raw: Tensor, model: CodecModel,
                  trace: Optional[Dict[str, Tensor]] = None) -> Tuple[PFramePayload, Tensor]:
    """Code ``raw`` predictively from the reconstructed reference ``ref_com``.

    Both frames are ``(3, H, W)``. Returns the payload and the
    reconstruction a decoder will produce. If ``trace`` is a dict, every
    intermediate tensor of the coding chain is stored in it by name.
    """
    _check_pair(ref_com, raw)
    ref, x = ref_com.unsqueeze(0), raw.unsqueeze(0)
    tables = model.tables()
    v = model.flow_net(ref, x)
    m = model.mv_encoder(v)
    m_sym = _latent_to_symbols(m)
    m_hat = _symbols_to_latent(m_sym)
    v_hat, warped, x_bar = model.predict(ref, m_hat)
    r = x - x_bar
    y = model.res_encoder(r)
    y_sym = _latent_to_symbols(y)
    y_hat = _symbols_to_latent(y_sym)
    r_hat = model.res_decoder(y_hat)
    recon = model.reconstruct(x_bar, y_hat)
    payload = PFramePayload(range_encode(m_sym, tables["motion"]),
                            range_encode(y_sym, tables["residual"]),
                            tuple(m_sym.shape[-2:]), model.fingerprint())
    if trace is not None:
        trace.update(flow=v, flow_latent=m, flow_latent_hat=m_hat, flow_hat=v_hat,
                     warped=warped, mc=x_bar, residual=r, res_latent=y, res_latent_hat=y_hat,
                     res_hat=r_hat, recon=recon)
    return payload, recon[0]


@torch.no_grad()
def decode_pframe(ref_com: Tensor, payload: PFramePayload, model: CodecModel,
                  model_hash: Optional[bytes] = None) -> Tensor:
    """Rebuild a P-frame from its payload; bit-identical to the encoder's reconstruction.

    Raises:
        ModelMismatch: if the payload was produced by a different model.
        ContainerError: if a stream is corrupt or truncated.
    """
    expected = payload.model_hash or model_hash
    if expected and expected != model.fingerprint():
        raise ModelMismatch("payload was encoded with a different model (hash mismatch)")
    tables = model.tables()
    h, w = payload.latent_hw
    shape = (LATENT_CHANNELS, h, w)
    try:
        m_sym = range_decode(payload.motion, tables["motion"], shape)
        y_sym = range_decode(payload.residual, tables["residual"], shape)
    except StreamError as exc:
        raise ContainerError(str(exc)) from exc
    ref = ref_com.unsqueeze(0)
    _, _, x_bar = model.predict(ref, _symbols_to_latent(m_sym))
    return model.reconstruct(x_bar, _symbols_to_latent(y_sym))[0]


# -- sequences ------------------------------------------------------------------

def iframe_indices(count: int, gop: int) -> List[int]:
    return list(range(0, count, gop))


@dataclass
class EncodedSequence:
    data: bytes
    recons: List[Tensor]  # encoder-side reconstructions, cropped to the original size
    header: ContainerHeader
    record_sizes: List[int]

    @property
    def bits(self) -> int:
        return 8 * len(self.data)


def encode_sequence(frames: Sequence[Tensor], model: CodecModel, iframe_codec: IFrameCodec,
                    gop: int = DEFAULT_GOP, policy: str = "reject",
                    iframe_quality: Optional[int] = None,
                    on_pframe: Optional[Callable[[int, Tensor, Tensor], None]] = None) -> EncodedSequence:
    """Encode frames into a container.

    Frame 0 and every ``gop``-th frame are intra coded; the others are
    P-frames predicted from the previous reconstructed frame. With
    ``policy="pad"`` frames are edge-padded to multiples of 16 and the
    recorded original size is used to crop decoded frames.

    ``on_pframe(index, reference, raw)`` is called before each P-frame is
    coded, with the exact reference tensor used.
    """
    if not frames:
        raise ValueError("cannot encode an empty sequence")
    if gop < 1:
        raise ValueError(f"GOP size must be >= 1, got {gop}")
    h, w = frames[0].shape[-2:]
    padded = []
    for f in frames:
        if f.shape[-2:] != (h, w):
            raise ValueError("all frames must share one size")
        padded.append(validate_or_pad(f, policy).frame)
    ph, pw = padded[0].shape[-2:]
    header = ContainerHeader(w, h, pw, ph, len(frames), gop, model.metric, model.lam,
                             model.fingerprint())
    chunks = [header.pack()]
    recons, sizes = [], []
    ref = None
    for t, raw in enumerate(padded):
        if t % gop == 0:
            data, recon = iframe_codec.encode(raw, iframe_quality)
            record = FrameRecord(iframe_codec.frame_type, data)
        else:
            if on_pframe is not None:
                on_pframe(t, ref, raw)
            payload, recon = encode_pframe(ref, raw, model)
            record = FrameRecord(FRAME_TYPE_P, payload.to_bytes())
        packed = record.pack()
        chunks.append(packed)
        sizes.append(len(packed))
        recons.append(recon[..., :h, :w])
        ref = recon
    return EncodedSequence(b"".join(chunks), recons, header, sizes)


def read_container(data: bytes) -> Tuple[ContainerHeader, List[FrameRecord]]:
    header = ContainerHeader.unpack(data)
    pos = HEADER.size
    records = []
    for i in range(header.frame_count):
        if pos + RECORD_HEAD.size > len(data):
            raise ContainerError(f"container truncated before frame {i}")
        ftype, n = RECORD_HEAD.unpack_from(data, pos)
        pos += RECORD_HEAD.size
        payload = data[pos:pos + n]
        pos += n
        if len(payload) != n or pos + U32.size > len(data):
            raise ContainerError(f"container truncated inside frame {i}")
        (crc,) = U32.unpack_from(data, pos)
        pos += U32.size
        if zlib.crc32(payload) != crc:
            raise ContainerError(f"checksum mismatch in frame {i}")
        records.append(FrameRecord(ftype, payload))
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} unexpected trailing bytes after frame records")
    return header, records


def decode_sequence(data: bytes, model: CodecModel,
                    iframe_codec: Optional[IFrameCodec] = None) -> List[Tensor]:
    """Decode a container into frames of the original size."""
    header, records = read_container(data)
    if header.model_hash != model.fingerprint():
        raise ModelMismatch("container was encoded with a different model (hash mismatch)")
    if padded_size(header.height, header.width) != (header.padded_height, header.padded_width):
        raise ContainerError("padded size in header is inconsistent with the original size")
    latent_hw = (header.padded_height // 16, header.padded_width // 16)
    frames, ref = [], None
    for i, rec in enumerate(records):
        if rec.frame_type == FRAME_TYPE_P:
            if ref is None:
                raise ContainerError("first frame of a container must be an I-frame")
            payload = PFramePayload.from_bytes(rec.payload, latent_hw, header.model_hash)
            recon = decode_pframe(ref, payload, model)
        else:
            recon = codec_for_frame_type(rec.frame_type, iframe_codec).decode(rec.payload)
            if tuple(recon.shape[-2:]) != (header.padded_height, header.padded_width):
                raise ContainerError(f"I-frame {i} has the wrong size")
        frames.append(recon[..., :header.height, :header.width])
        ref = recon
    return frames
