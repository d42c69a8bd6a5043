"""Multi-symbol range coder over 16-bit frequency tables.

The coder keeps a 32-bit range and a 33-bit ``low`` register and resolves
carries with a pending-byte cache (the scheme used by LZMA). Stream layout:

* the encoder emits one byte per renormalization shift plus five flush
  bytes; the first byte is always the initial zero cache byte;
* a decoder primes ``code`` with the first five bytes and then reads one
  byte per renormalization shift, so a valid stream is consumed exactly.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class StreamError(ValueError):
    """Raised when a stream is truncated or inconsistent with its tables."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            temp = self.cache
            out = self.out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low << 8) & MASK32

    def encode(self, start: int, size: int) -> None:
        """Code the interval ``[start, start + size)`` out of ``TOTAL``."""
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int = PRECISION) -> None:
        """Code ``value`` uniformly over ``[0, 2**nbits)``, ``nbits <= 16``."""
        r = self.range >> nbits
        self.low += r * value
        self.range = r
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._next()) & MASK32

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise StreamError("range-coded stream is truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _normalize(self) -> None:
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8

    def decode(self, cdf: Sequence[int]) -> int:
        """Decode one symbol index against cumulative table ``cdf``."""
        r = self.range >> PRECISION
        v = self.code // r
        if v >= TOTAL:
            raise StreamError("range decoder state out of bounds (corrupt stream)")
        s = bisect_right(cdf, v) - 1
        lo = cdf[s]
        self.code -= r * lo
        self.range = r * (cdf[s + 1] - lo)
        self._normalize()
        return s

    def decode_bits(self, nbits: int = PRECISION) -> int:
        r = self.range >> nbits
        v = self.code // r
        if v >> nbits:
            raise StreamError("range decoder state out of bounds (corrupt stream)")
        self.code -= r * v
        self.range = r
        self._normalize()
        return v
