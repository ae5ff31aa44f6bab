"""Reference range coder over 16-bit integer CDF tables.

Classic carryless byte-renormalizing coder on 32-bit registers: bytes are
released once the top byte of low and high agree, and the range is clipped
to the next 2^16 boundary on underflow. The 4-byte flush plus 16-bit CDF
precision keeps worst-case overhead within the documented bound (32 bits +
~1% of the symbol count). The accelerated backend must reproduce these
byte streams exactly; this file is the behavioral definition.
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .errors import CoderError, SymbolRangeError
from .entropy import CdfTable

_TOP = 1 << 24
_BOTTOM = 1 << 16
_MASK = 0xFFFFFFFF


@dataclass
class SymbolPlan:
    """Symbols to code plus, per symbol, the index of the CdfTable it uses."""

    symbols: np.ndarray
    table_indexes: np.ndarray

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        self.table_indexes = np.asarray(self.table_indexes, dtype=np.int64)
        if self.symbols.shape != self.table_indexes.shape or self.symbols.ndim != 1:
            raise ValueError("symbols and table_indexes must be 1-D and equal length")

    def __len__(self) -> int:
        return len(self.symbols)


class RangeEncoder:
    """Streaming encoder; feed (symbol, table) pairs, then finish()."""

    def __init__(self):
        self._low = 0
        self._range = _MASK
        self._out = bytearray()

    def encode(self, symbol: int, table: CdfTable):
        i = symbol - table.offset
        if not 0 <= i < table.num_symbols:
            raise SymbolRangeError(
                len(self._out), symbol, table.offset, table.offset + table.num_symbols - 1
            )
        cdf = table.cdf
        self._encode_span(int(cdf[i]), int(cdf[i + 1]))

    def _encode_span(self, cum_lo: int, cum_hi: int):
        low, rng, out = self._low, self._range, self._out
        r = rng >> 16
        low += cum_lo * r
        rng = (cum_hi - cum_lo) * r
        while True:
            if (low ^ (low + rng)) < _TOP:
                out.append((low >> 24) & 0xFF)
                low = (low << 8) & _MASK
                rng <<= 8
            elif rng < _BOTTOM:
                rng = ((-low) & (_BOTTOM - 1)) << 8
                out.append((low >> 24) & 0xFF)
                low = (low << 8) & _MASK
            else:
                break
        self._low, self._range = low, rng

    def finish(self) -> bytes:
        low = self._low
        for _ in range(4):
            self._out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
        return bytes(self._out)


class RangeDecoder:
    """Mirror of RangeEncoder over a byte payload."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._low = 0
        self._range = _MASK
        self._state = 0
        for _ in range(4):
            self._state = (self._state << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise CoderError("truncated range-coded stream")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode(self, table: CdfTable) -> int:
        low, rng, state = self._low, self._range, self._state
        r = rng >> 16
        value = (state - low) // r
        if value > 0xFFFF:
            value = 0xFFFF
        cdf = table.cdf
        i = int(np.searchsorted(cdf, value, side="right")) - 1
        cum_lo = int(cdf[i])
        cum_hi = int(cdf[i + 1])
        low += cum_lo * r
        rng = (cum_hi - cum_lo) * r
        while True:
            if (low ^ (low + rng)) < _TOP:
                state = ((state << 8) | self._next_byte()) & _MASK
                low = (low << 8) & _MASK
                rng <<= 8
            elif rng < _BOTTOM:
                rng = ((-low) & (_BOTTOM - 1)) << 8
                state = ((state << 8) | self._next_byte()) & _MASK
                low = (low << 8) & _MASK
            else:
                break
        self._low, self._range, self._state = low, rng, state
        return i + table.offset


def _cdf_lists(tables: list[CdfTable]) -> list[list[int]]:
    # plain int lists make bisect_right (C implementation) fast
    return [t.cdf.tolist() for t in tables]


def rc_encode(plan: SymbolPlan, tables: list[CdfTable]) -> bytes:
    """Encode a symbol plan; deterministic byte string."""
    enc = RangeEncoder()
    spans = _cdf_lists(tables)
    offsets = [t.offset for t in tables]
    sizes = [t.num_symbols for t in tables]
    symbols = plan.symbols.tolist()
    indexes = plan.table_indexes.tolist()
    encode_span = enc._encode_span
    for pos, (s, ti) in enumerate(zip(symbols, indexes)):
        i = s - offsets[ti]
        if not 0 <= i < sizes[ti]:
            raise SymbolRangeError(pos, s, offsets[ti], offsets[ti] + sizes[ti] - 1)
        cdf = spans[ti]
        encode_span(cdf[i], cdf[i + 1])
    return enc.finish()


def rc_decode(
    data: bytes, table_indexes: np.ndarray, tables: list[CdfTable], n: int
) -> np.ndarray:
    """Decode n symbols; table_indexes must match the encoding plan."""
    table_indexes = np.asarray(table_indexes, dtype=np.int64)
    if len(table_indexes) != n:
        raise ValueError("table_indexes length must equal n")
    dec = RangeDecoder(data)
    spans = _cdf_lists(tables)
    offsets = [t.offset for t in tables]
    out = np.empty(n, dtype=np.int64)

    low, rng, state = dec._low, dec._range, dec._state
    pos = dec._pos
    payload = data
    end = len(payload)
    for j, ti in enumerate(table_indexes.tolist()):
        cdf = spans[ti]
        r = rng >> 16
        value = (state - low) // r
        if value > 0xFFFF:
            value = 0xFFFF
        i = bisect_right(cdf, value) - 1
        cum_lo = cdf[i]
        low += cum_lo * r
        rng = (cdf[i + 1] - cum_lo) * r
        while True:
            if (low ^ (low + rng)) < _TOP:
                if pos >= end:
                    raise CoderError("truncated range-coded stream")
                state = ((state << 8) | payload[pos]) & _MASK
                pos += 1
                low = (low << 8) & _MASK
                rng <<= 8
            elif rng < _BOTTOM:
                rng = ((-low) & (_BOTTOM - 1)) << 8
                if pos >= end:
                    raise CoderError("truncated range-coded stream")
                state = ((state << 8) | payload[pos]) & _MASK
                pos += 1
                low = (low << 8) & _MASK
            else:
                break
        out[j] = i + offsets[ti]
    return out


def plan_cost_bits(plan: SymbolPlan, tables: list[CdfTable]) -> float:
    """Cross-entropy of the plan under its own tables: sum of -log2 p_table."""
    total = 0.0
    for s, ti in zip(plan.symbols.tolist(), plan.table_indexes.tolist()):
        total += -np.log2(tables[ti].symbol_prob(s))
    return float(total)
