"""Factorized entropy model: quantization, likelihoods, rates and CDF tables."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .rangecoder import TOTAL, RangeDecoder, RangeEncoder, StreamError

LIKELIHOOD_FLOOR = 1e-9
TAIL_MASS = 1e-9
MAX_SUPPORT = 4096
ESCAPE_BITS = 32


def quantize(latent: Tensor, mode: str = "test", generator: Optional[torch.Generator] = None) -> Tensor:
    """Round (``test``) or add uniform noise in [-0.5, 0.5) (``train``).

    Test-mode rounding is half-away-from-zero.
    """
    if mode == "test":
        return torch.sign(latent) * torch.floor(latent.abs() + 0.5)
    if mode == "train":
        if generator is None:
            raise ValueError("train-mode quantization needs a random generator")
        noise = torch.rand(latent.shape, generator=generator, dtype=latent.dtype,
                           device=latent.device) - 0.5
        return latent + noise
    raise ValueError(f"unknown quantization mode {mode!r}")


class FactorizedPrior(nn.Module):
    """Per-channel univariate density built from a monotone scalar network.

    The cumulative logit for channel ``c`` is a chain of ``len(filters) + 1``
    stages; each stage maps its width-``k`` input through
    ``softplus(matrix) @ x + bias`` and, except for the last, adds
    ``tanh(factor) * tanh(x)``. Softplus weights and ``|tanh(factor)| < 1``
    keep the chain nondecreasing, so ``sigmoid`` of it is a valid CDF.
    """

    def __init__(self, channels: int, filters: Sequence[int] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cdf(self, x: Tensor) -> Tensor:
        """Cumulative logits for ``x`` of shape ``(C, 1, N)``."""
        for i, matrix in enumerate(self.matrices):
            x = torch.matmul(F.softplus(matrix), x) + self.biases[i]
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i]) * torch.tanh(x)
        return x

    def cdf(self, x: Tensor) -> Tensor:
        """CDF values for ``x`` of shape ``(C, N)``."""
        return torch.sigmoid(self.logits_cdf(x.unsqueeze(1))).squeeze(1)

    def _bin_mass(self, v: Tensor) -> Tensor:
        # v: (C, N); mass of [v - 0.5, v + 0.5] computed on the flatter sigmoid side
        lower = self.logits_cdf((v - 0.5).unsqueeze(1))
        upper = self.logits_cdf((v + 0.5).unsqueeze(1))
        sign = -torch.sign(lower + upper).detach()
        mass = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return mass.squeeze(1)

    def forward(self, latent_hat: Tensor) -> Tensor:
        return likelihood(latent_hat, self)


def likelihood(latent_hat: Tensor, prior: FactorizedPrior, floor: float = LIKELIHOOD_FLOOR) -> Tensor:
    """Probability of every element's unit bin, clamped to ``[floor, 1]``.

    ``latent_hat`` is ``(B, C, H, W)``; the result has the same shape.
    """
    b, c, h, w = latent_hat.shape
    if c != prior.channels:
        raise ValueError(f"prior has {prior.channels} channels, latent has {c}")
    v = latent_hat.transpose(0, 1).reshape(c, -1)
    p = prior._bin_mass(v)
    p = p.reshape(c, b, h, w).transpose(0, 1)
    return torch.clamp(p, floor, 1.0)


@dataclass
class RateEstimate:
    total_bits: Tensor
    log_likelihoods: Tensor

    def bpp(self, num_pixels: int) -> Tensor:
        return self.total_bits / num_pixels


def rate_bits(p: Tensor) -> RateEstimate:
    if (p <= 0).any():
        raise ValueError("probabilities must be strictly positive")
    logp = torch.log2(p)
    return RateEstimate(-logp.sum(), logp)


@dataclass
class CdfTable:
    """Integer coding tables, one per channel.

    ``cdfs[c]`` has ``n + 2`` entries for ``n`` in-support symbols
    ``offsets[c] .. offsets[c] + n - 1`` followed by an escape symbol; it
    starts at 0, is strictly increasing and ends at ``2**16``.
    """

    offsets: List[int]
    cdfs: List[List[int]]

    @property
    def channels(self) -> int:
        return len(self.cdfs)

    def support(self, c: int):
        n = len(self.cdfs[c]) - 2
        return self.offsets[c], self.offsets[c] + n - 1

    def masses(self, c: int) -> np.ndarray:
        return np.diff(np.asarray(self.cdfs[c], dtype=np.int64))

    @classmethod
    def from_pmfs(cls, pmfs: Sequence[np.ndarray], offsets: Sequence[int],
                  escape_masses: Optional[Sequence[float]] = None) -> "CdfTable":
        cdfs = []
        for i, pmf in enumerate(pmfs):
            esc = 0.0 if escape_masses is None else float(escape_masses[i])
            freq = quantize_pmf(np.append(np.asarray(pmf, dtype=np.float64), esc))
            cdfs.append([0] + np.cumsum(freq).tolist())
        return cls([int(o) for o in offsets], cdfs)

    def validate(self) -> None:
        for c, cdf in enumerate(self.cdfs):
            if cdf[0] != 0 or cdf[-1] != TOTAL:
                raise ValueError(f"channel {c}: CDF must run from 0 to {TOTAL}")
            if any(b <= a for a, b in zip(cdf, cdf[1:])):
                raise ValueError(f"channel {c}: CDF is not strictly increasing")


def quantize_pmf(pmf: np.ndarray, total: int = TOTAL) -> np.ndarray:
    """Integer frequencies summing to ``total``, each at least 1.

    Starts from rounded ``pmf * total`` and moves single units to or from the
    entries whose rounding error is largest until the sum is exact.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.size
    if n > total:
        raise ValueError(f"{n} symbols do not fit a {total}-count table")
    ideal = pmf / pmf.sum() * total
    freq = np.maximum(1, np.round(ideal)).astype(np.int64)
    diff = total - int(freq.sum())
    while diff > 0:
        i = int(np.argmax(ideal - freq))
        freq[i] += 1
        diff -= 1
    while diff < 0:
        err = np.where(freq > 1, freq - ideal, -np.inf)
        i = int(np.argmax(err))
        freq[i] -= 1
        diff += 1
    return freq


def _bisect_quantile(prior: FactorizedPrior, target_logit: float, iters: int = 80) -> np.ndarray:
    c = prior.channels
    lo = torch.full((c,), -1.0, dtype=torch.float64)
    hi = torch.full((c,), 1.0, dtype=torch.float64)

    def logits(x):
        return prior.logits_cdf(x.view(c, 1, 1)).view(c)

    for _ in range(64):
        below = logits(lo) > target_logit
        if not below.any():
            break
        lo = torch.where(below, lo * 2, lo)
    for _ in range(64):
        above = logits(hi) < target_logit
        if not above.any():
            break
        hi = torch.where(above, hi * 2, hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        go_right = logits(mid) < target_logit
        lo = torch.where(go_right, mid, lo)
        hi = torch.where(go_right, hi, mid)
    return (0.5 * (lo + hi)).numpy()


@torch.no_grad()
def build_cdf_tables(prior: FactorizedPrior, tail_mass: float = TAIL_MASS,
                     max_support: int = MAX_SUPPORT) -> CdfTable:
    """Quantize a trained prior into per-channel 16-bit coding tables.

    The support of each channel is the integer range whose lower and upper
    tails each hold at most ``tail_mass``; that tail mass is carried by the
    escape symbol.

    Raises:
        ValueError: if some channel needs more than ``max_support`` symbols.
    """
    prior64 = _as_double(prior)
    t = math.log(tail_mass) - math.log1p(-tail_mass)
    x_lo = _bisect_quantile(prior64, t)
    x_hi = _bisect_quantile(prior64, -t)
    offsets, widths, pmfs, escapes = [], [], [], []
    for c in range(prior.channels):
        s_min = int(math.floor(x_lo[c] + 0.5))
        s_max = int(math.ceil(x_hi[c] - 0.5))
        width = s_max - s_min + 1
        if width > max_support:
            raise ValueError(f"channel {c}: support of {width} symbols exceeds {max_support}")
        offsets.append(s_min)
        widths.append(width)
    n = max(widths)
    grid = torch.arange(n, dtype=torch.float64).unsqueeze(0) + torch.tensor(offsets, dtype=torch.float64).unsqueeze(1)
    mass = prior64._bin_mass(grid).numpy()
    edges = torch.tensor([[o - 0.5 for o in offsets], [o + w - 0.5 for o, w in zip(offsets, widths)]],
                         dtype=torch.float64).t().contiguous()
    cdf_edges = prior64.cdf(edges).numpy()
    for c in range(prior.channels):
        pmfs.append(mass[c, :widths[c]])
        escapes.append(cdf_edges[c, 0] + (1.0 - cdf_edges[c, 1]))
    return CdfTable.from_pmfs(pmfs, offsets, escapes)


def _as_double(prior: FactorizedPrior) -> FactorizedPrior:
    if prior.matrices[0].dtype == torch.float64:
        return prior
    clone = FactorizedPrior(prior.channels, prior.filters)
    clone.load_state_dict(prior.state_dict())
    return clone.double()


def _zigzag(v: int) -> int:
    return (v << 1) if v >= 0 else ((-v << 1) - 1)


def _unzigzag(z: int) -> int:
    return (z >> 1) if not z & 1 else -((z + 1) >> 1)


def range_encode(symbols, tables: CdfTable) -> bytes:
    """Entropy-code an integer ``(C, H, W)`` array, channel-major then row-major.

    Values outside a channel's support are sent as the escape symbol
    followed by a 32-bit zigzag-coded raw value (two uniform 16-bit chunks).
    """
    arr = np.asarray(symbols, dtype=np.int64)
    if arr.ndim != 3 or arr.shape[0] != tables.channels:
        raise ValueError(f"symbols of shape {arr.shape} do not match {tables.channels} channel tables")
    enc = RangeEncoder()
    for c in range(arr.shape[0]):
        cdf = tables.cdfs[c]
        off = tables.offsets[c]
        esc = len(cdf) - 2
        for v in arr[c].ravel().tolist():
            s = v - off
            if 0 <= s < esc:
                enc.encode(cdf[s], cdf[s + 1] - cdf[s])
            else:
                enc.encode(cdf[esc], cdf[esc + 1] - cdf[esc])
                z = _zigzag(v)
                if z >> ESCAPE_BITS:
                    raise ValueError(f"symbol {v} does not fit the escape code")
                enc.encode_bits(z >> 16)
                enc.encode_bits(z & 0xFFFF)
    return enc.finish()


def range_decode(data: bytes, tables: CdfTable, shape) -> np.ndarray:
    """Inverse of :func:`range_encode` for an array of the given ``(C, H, W)`` shape."""
    c_n, h, w = shape
    if c_n != tables.channels:
        raise ValueError(f"shape {shape} does not match {tables.channels} channel tables")
    dec = RangeDecoder(data)
    out = np.empty((c_n, h * w), dtype=np.int64)
    for c in range(c_n):
        cdf = tables.cdfs[c]
        off = tables.offsets[c]
        esc = len(cdf) - 2
        row = out[c]
        for i in range(h * w):
            s = dec.decode(cdf)
            if s == esc:
                z = (dec.decode_bits() << 16) | dec.decode_bits()
                row[i] = _unzigzag(z)
            else:
                row[i] = s + off
    return out.reshape(c_n, h, w)


__all__ = [
    "CdfTable", "FactorizedPrior", "RateEstimate", "StreamError", "build_cdf_tables",
    "likelihood", "quantize", "quantize_pmf", "range_decode", "range_encode", "rate_bits",
]
