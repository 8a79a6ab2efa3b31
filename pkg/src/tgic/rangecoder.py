"""32-bit range coder over fixed-precision cumulative frequency tables.

The encoder keeps ``low`` in a 32-bit window and propagates carries into the
bytes it has already emitted; the decoder works on ``code - low`` so it never
needs to see a carry.  Renormalisation keeps ``range >= 2**24``, so with
16-bit tables every coding step has at least 8 bits of headroom.

The final flush writes a single byte: any value in ``[low, low + range)``
identifies the stream, and one aligned to ``2**24`` always exists.  Because
the decoder mirrors every renormalisation shift it knows the exact payload
length to expect, which is how truncated or padded payloads are rejected.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DecodingError, EncodingError, InputError

PRECISION = 16

_TOP = 1 << 32
_MASK = _TOP - 1
_BOT = 1 << 24


@dataclass(frozen=True)
class CDFTable:
    """Quantized cumulative frequencies for a contiguous integer alphabet.

    ``cdf`` has ``size + 1`` entries, starts at 0 and ends at
    ``2**precision``.  Symbol ``offset + i`` owns ``[cdf[i], cdf[i + 1])``.
    """

    cdf: tuple[int, ...]
    offset: int = 0
    precision: int = PRECISION

    def __post_init__(self):
        cdf = self.cdf
        if len(cdf) < 2:
            raise ConfigurationError("CDF table needs at least one symbol")
        if cdf[0] != 0 or cdf[-1] != 1 << self.precision:
            raise ConfigurationError(
                f"CDF must span [0, 2**{self.precision}], got [{cdf[0]}, {cdf[-1]}]"
            )
        if any(b <= a for a, b in zip(cdf, cdf[1:])):
            raise ConfigurationError("CDF must be strictly increasing")

    @property
    def size(self) -> int:
        return len(self.cdf) - 1

    @property
    def counts(self) -> list[int]:
        return [b - a for a, b in zip(self.cdf, self.cdf[1:])]

    def contains(self, symbol: int) -> bool:
        return self.offset <= symbol < self.offset + self.size

    def cost_bits(self, symbol: int) -> float:
        """Ideal code length of ``symbol`` under the quantized table."""
        i = symbol - self.offset
        return self.precision - float(np.log2(self.cdf[i + 1] - self.cdf[i]))


def quantize_pmf(probs: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Quantize rows of probabilities to integer counts summing to ``2**precision``.

    Each row is normalised, rounded to the nearest count and floored at one
    count per symbol; the remaining deficit or surplus goes to the row's
    largest-mass symbol.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if p.ndim != 2:
        raise InputError("probabilities must be a vector or a matrix of rows")
    total = 1 << precision
    n = p.shape[1]
    if n > total:
        raise ConfigurationError(
            f"alphabet of {n} symbols does not fit {precision}-bit precision"
        )
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InputError("probabilities must be finite and non-negative")
    sums = p.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise InputError("probability row has zero total mass")
    counts = np.rint(p / sums * total).astype(np.int64)
    np.maximum(counts, 1, out=counts)
    deficit = total - counts.sum(axis=1)
    rows = np.arange(p.shape[0])
    big = np.argmax(p, axis=1)
    counts[rows, big] += deficit
    for r in np.nonzero(counts[rows, big] < 1)[0]:
        counts[r] = _spread_surplus(p[r], counts[r], big[r], total)
    return counts


def _spread_surplus(p, counts, big, total):
    # Floors pushed the largest symbol below one count: take the surplus from
    # symbols in decreasing-mass order instead.
    counts = counts.copy()
    counts[big] = 1
    surplus = counts.sum() - total
    for i in np.argsort(-p, kind="stable"):
        take = min(surplus, counts[i] - 1)
        counts[i] -= take
        surplus -= take
        if surplus == 0:
            break
    return counts


def build_cdf_table(probs: Sequence[float], offset: int = 0,
                    precision: int = PRECISION) -> CDFTable:
    counts = quantize_pmf(np.asarray(probs, dtype=np.float64), precision)[0]
    cdf = np.concatenate([[0], np.cumsum(counts)])
    return CDFTable(tuple(int(c) for c in cdf), offset, precision)


def uniform_table(size: int, offset: int = 0, precision: int = PRECISION) -> CDFTable:
    return build_cdf_table(np.full(size, 1.0 / size), offset, precision)


class RangeEncoder:
    """Single-stream encoder; not shareable between threads."""

    def __init__(self):
        self._out = bytearray()
        self._low = 0
        self._range = _MASK
        self._done = False

    def encode(self, start: int, freq: int, precision: int = PRECISION) -> None:
        """Narrow the interval to ``[start, start + freq) / 2**precision``."""
        r = self._range >> precision
        low = self._low + r * start
        if low > _MASK:
            low &= _MASK
            self._carry()
        rng = r * freq
        out = self._out
        while rng < _BOT:
            out.append(low >> 24)
            low = (low << 8) & _MASK
            rng <<= 8
        self._low = low
        self._range = rng

    def encode_symbol(self, symbol: int, table: CDFTable) -> None:
        i = symbol - table.offset
        cdf = table.cdf
        self.encode(cdf[i], cdf[i + 1] - cdf[i], table.precision)

    def _carry(self) -> None:
        out = self._out
        i = len(out) - 1
        while i >= 0 and out[i] == 0xFF:
            out[i] = 0
            i -= 1
        if i < 0:
            raise EncodingError("carry propagated past the start of the stream")
        out[i] += 1

    def finish(self) -> bytes:
        if not self._done:
            v = (self._low + (_BOT - 1)) & ~(_BOT - 1)
            if v > _MASK:
                v &= _MASK
                self._carry()
            self._out.append(v >> 24)
            self._done = True
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, payload: bytes):
        self._data = payload
        self._pos = 0
        self._range = _MASK
        diff = 0
        for _ in range(4):
            diff = (diff << 8) | self._next_byte()
        self._diff = diff

    def _next_byte(self) -> int:
        pos = self._pos
        self._pos = pos + 1
        if pos < len(self._data):
            return self._data[pos]
        return 0

    def decode_index(self, cdf: Sequence[int], precision: int = PRECISION) -> int:
        """Return the index ``i`` with ``cdf[i] <= target < cdf[i + 1]``."""
        r = self._range >> precision
        target = self._diff // r
        if target >= cdf[-1]:
            raise DecodingError("code value outside the table; payload is corrupt")
        i = bisect_right(cdf, target) - 1
        diff = self._diff - r * cdf[i]
        rng = r * (cdf[i + 1] - cdf[i])
        while rng < _BOT:
            diff = (diff << 8) | self._next_byte()
            rng <<= 8
        self._diff = diff
        self._range = rng
        return i

    def decode_symbol(self, table: CDFTable) -> int:
        return table.offset + self.decode_index(table.cdf, table.precision)

    def finish(self) -> None:
        """Check that the payload had exactly the length the encoder produced."""
        # 4 preload bytes + one per shift were read; the encoder wrote one per
        # shift + one flush byte.
        expected = self._pos - 3
        if len(self._data) < expected:
            raise DecodingError(
                f"payload truncated: {len(self._data)} bytes, expected {expected}"
            )
        if len(self._data) > expected:
            raise DecodingError(
                f"payload has {len(self._data) - expected} trailing bytes"
            )


def _check_tables(n: int, tables: Sequence[CDFTable]) -> None:
    if len(tables) != n:
        raise ConfigurationError(f"{n} symbols but {len(tables)} tables")


def encode_symbols(symbols: Sequence[int], tables: Sequence[CDFTable]) -> bytes:
    _check_tables(len(symbols), tables)
    enc = RangeEncoder()
    for pos, (s, table) in enumerate(zip(symbols, tables)):
        s = int(s)
        if not table.contains(s):
            raise EncodingError(
                f"symbol {s} at position {pos} outside alphabet "
                f"[{table.offset}, {table.offset + table.size})"
            )
        enc.encode_symbol(s, table)
    return enc.finish()


def decode_symbols(payload: bytes, tables: Sequence[CDFTable], n: int) -> list[int]:
    _check_tables(n, tables)
    dec = RangeDecoder(payload)
    out = [dec.decode_symbol(t) for t in tables]
    dec.finish()
    return out


def ideal_bits(symbols: Sequence[int], tables: Sequence[CDFTable]) -> float:
    """Sum of ``-log2`` quantized probabilities, the coder's reference rate."""
    return float(sum(t.cost_bits(int(s)) for s, t in zip(symbols, tables)))
