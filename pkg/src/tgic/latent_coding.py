"""CDF tables for the quantized latents and escape-aware symbol coding.

Every table covers a window of likely values plus one escape symbol.  An
escaped value is followed by its raw index in a uniform table over
``[-bound, bound]``, so coding stays lossless for any clamped latent while
the window keeps per-symbol table overhead negligible.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

from .errors import DecodingError, EncodingError
from .rangecoder import CDFTable, RangeDecoder, RangeEncoder, quantize_pmf, uniform_table

SCALE_GRID = np.exp(np.linspace(math.log(0.01), math.log(64.0), 64))
_LOG_STEP = math.log(SCALE_GRID[1] / SCALE_GRID[0])
TAIL_SIGMAS = 6.0
PRIOR_PMF_FLOOR = 1e-10


def scale_index(scale: np.ndarray) -> np.ndarray:
    """Nearest grid point in the log domain, clipped to the grid ends."""
    s = np.asarray(scale, dtype=np.float64)
    idx = np.rint((np.log(np.maximum(s, 1e-300)) - math.log(SCALE_GRID[0])) / _LOG_STEP)
    return np.clip(idx, 0, len(SCALE_GRID) - 1).astype(np.int64)


def _tables_from_rows(probs: np.ndarray, offsets: np.ndarray) -> list[CDFTable]:
    counts = quantize_pmf(probs)
    cdf = np.zeros((counts.shape[0], counts.shape[1] + 1), dtype=np.int64)
    np.cumsum(counts, axis=1, out=cdf[:, 1:])
    rows = cdf.tolist()
    return [CDFTable(tuple(r), int(o)) for r, o in zip(rows, offsets)]


def gaussian_tables(mean: np.ndarray, scale: np.ndarray) -> list[CDFTable]:
    """One windowed table per element of ``mean``/``scale`` (flattened, C order).

    The scale is snapped to :data:`SCALE_GRID`; the window is centred on the
    rounded mean and spans ``TAIL_SIGMAS`` grid scales either side.
    """
    mu = np.asarray(mean, dtype=np.float64).ravel()
    idx = scale_index(np.asarray(scale).ravel())
    center = np.floor(mu + 0.5)
    tables: list[CDFTable | None] = [None] * mu.size
    for s in np.unique(idx):
        sel = np.nonzero(idx == s)[0]
        sigma = SCALE_GRID[s]
        half = int(math.ceil(TAIL_SIGMAS * sigma)) + 1
        m = mu[sel, None]
        c = center[sel, None]
        k = c + np.arange(-half, half + 1)[None, :]
        v = np.abs(k - m)
        p = ndtr((0.5 - v) / sigma) - ndtr((-0.5 - v) / sigma)
        esc = ndtr((c - half - 0.5 - m) / sigma) + ndtr((m - c - half - 0.5) / sigma)
        rows = np.concatenate([p, esc], axis=1)
        for i, t in zip(sel, _tables_from_rows(rows, (c[:, 0] - half))):
            tables[i] = t
    return tables  # type: ignore[return-value]


def prior_channel_tables(pmf: np.ndarray, bound: int) -> list[CDFTable]:
    """Per-channel windowed tables from a (C, 2*bound+1) pmf over ``[-bound, bound]``."""
    tables = []
    for row in pmf:
        live = np.nonzero(row > PRIOR_PMF_FLOOR)[0]
        lo, hi = (live[0], live[-1]) if live.size else (bound, bound)
        window = row[lo:hi + 1]
        esc = max(1.0 - float(window.sum()), 0.0)
        tables.append(_tables_from_rows(np.append(window, esc)[None], np.array([lo - bound]))[0])
    return tables


class LatentCoder:
    """Codes integer latents against windowed tables with escapes."""

    def __init__(self, bound: int):
        self.bound = bound
        self.raw = uniform_table(2 * bound + 1, -bound)

    def _split(self, v: int, table: CDFTable) -> tuple[int, bool]:
        i = v - table.offset
        esc = table.size - 1
        if 0 <= i < esc:
            return i, False
        if not -self.bound <= v <= self.bound:
            raise EncodingError(f"latent value {v} outside [-{self.bound}, {self.bound}]")
        return esc, True

    def encode(self, values, tables: list[CDFTable]) -> bytes:
        values = np.asarray(values).ravel().tolist()
        if len(values) != len(tables):
            raise EncodingError(f"{len(values)} values but {len(tables)} tables")
        enc = RangeEncoder()
        raw = self.raw
        for pos, (v, t) in enumerate(zip(values, tables)):
            v = int(v)
            try:
                i, escaped = self._split(v, t)
            except EncodingError as exc:
                raise EncodingError(f"position {pos}: {exc}") from None
            enc.encode(t.cdf[i], t.cdf[i + 1] - t.cdf[i])
            if escaped:
                enc.encode_symbol(v, raw)
        return enc.finish()

    def decode(self, payload: bytes, tables: list[CDFTable]) -> np.ndarray:
        dec = RangeDecoder(payload)
        out = np.empty(len(tables), dtype=np.int64)
        raw = self.raw
        for pos, t in enumerate(tables):
            i = dec.decode_index(t.cdf)
            out[pos] = dec.decode_symbol(raw) if i == t.size - 1 else t.offset + i
        dec.finish()
        return out

    def cost_bits(self, values, tables: list[CDFTable]) -> float:
        """Ideal length under the quantized tables, escapes included."""
        total = 0.0
        raw_bits = self.raw.cost_bits(0)
        for v, t in zip(np.asarray(values).ravel().tolist(), tables):
            i, escaped = self._split(int(v), t)
            total += t.precision - math.log2(t.cdf[i + 1] - t.cdf[i])
            if escaped:
                total += raw_bits
        return total


def check_decoded_range(values: np.ndarray, bound: int) -> None:
    if values.size and (values.min() < -bound or values.max() > bound):
        raise DecodingError("decoded latent outside the clamp range")
