"""Range coder, frequency-table quantization and the adaptive order-0 model.

The coder is a byte-oriented range coder with carry propagation (cache byte
plus a count of pending 0xFF bytes). The arithmetic window is 48 bits wide and
renormalizes one byte at a time whenever the range drops below 2**40. See
``docs/bitstream.md`` for the byte-exact contract.
"""

from __future__ import annotations

import math
from itertools import repeat
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation, CorruptStreamError, NumericError, StreamUnderflowError

__all__ = [
    "FREQ_BITS",
    "FREQ_TOTAL",
    "NUM_OCC_SYMBOLS",
    "FreqTable",
    "quantize_distribution",
    "quantize_distributions",
    "RangeEncoder",
    "RangeDecoder",
    "encode_symbols",
    "decode_symbols",
    "AdaptiveModel",
    "encode_adaptive",
    "decode_adaptive",
    "ideal_bits",
]

FREQ_BITS = 16
FREQ_TOTAL = 1 << FREQ_BITS
NUM_OCC_SYMBOLS = 255

_WINDOW_BITS = 48
_TOP = 1 << _WINDOW_BITS
_MASK = _TOP - 1
_BOT = 1 << (_WINDOW_BITS - 8)
_SHIFT = _WINDOW_BITS - 8
_FF_TOP = 0xFF << _SHIFT
_WINDOW_BYTES = _WINDOW_BITS // 8
# rows per vectorized block of adaptive-model intervals
_BLOCK = 1 << 15
_QUANT_ROWS = 4096


@dataclass(frozen=True)
class FreqTable:
    """Integer frequencies over an alphabet whose index 0 is symbol ``first``."""

    freq: np.ndarray
    first: int = 1

    @property
    def total(self) -> int:
        return int(self.freq.sum())

    @property
    def cum(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.freq)))

    def interval(self, symbol: int):
        i = symbol - self.first
        if not 0 <= i < len(self.freq):
            raise ContractViolation(f"symbol {symbol} outside the table alphabet")
        c = self.cum
        return int(c[i]), int(self.freq[i]), int(c[-1])

    def cost_bits(self, symbol: int) -> float:
        _, f, t = self.interval(symbol)
        return -math.log2(f / t)


def _apportion(p: np.ndarray, s: np.ndarray, budget: int) -> np.ndarray:
    n, a = p.shape
    scaled = p * (budget / s)
    base = scaled.astype(np.int64)  # floor, the values are non-negative
    frac = np.subtract(scaled, base, out=scaled)
    rem = budget - base.sum(axis=1)
    # threshold = rem-th largest fraction; everything at or above it wins,
    # and rows where ties overshoot keep only the lowest-index ties
    kth = np.clip(a - rem, 0, a - 1)
    thr = np.empty((n, 1))
    for k in np.unique(kth):
        rows = np.flatnonzero(kth == k)
        thr[rows, 0] = np.partition(frac[rows], k, axis=1)[:, k]
    bonus = frac >= thr
    for i in np.flatnonzero(bonus.sum(axis=1) != rem):
        above = frac[i] > thr[i, 0]
        tie = ~above & bonus[i]
        bonus[i] = above | (tie & (np.cumsum(tie) <= rem[i] - above.sum()))
    base += bonus
    freq = base + 1
    return freq


def quantize_distributions(probs: np.ndarray, total: int = FREQ_TOTAL) -> np.ndarray:
    """Largest-remainder apportionment of each row to ``total`` with floor 1.

    Every symbol first gets 1; the remaining ``total - A`` units are split
    proportionally, leftovers going to the largest fractional parts with ties
    resolved toward the lower index.
    """
    p = np.asarray(probs, dtype=np.float64)
    squeeze = p.ndim == 1
    p = np.atleast_2d(p)
    n, a = p.shape
    budget = total - a
    if budget < 0:
        raise ContractViolation("alphabet larger than the frequency total")
    s = p.sum(axis=1, keepdims=True)
    # any nan or inf in a row makes its sum non-finite
    if not np.all(np.isfinite(s)):
        raise NumericError("distribution contains non-finite values")
    if p.size and p.min() < 0:
        raise ContractViolation("probabilities must be non-negative")
    if np.any(s <= 0):
        raise ContractViolation("each distribution needs positive mass")
    freq = np.empty((n, a), dtype=np.int64)
    # row chunks keep the temporaries cache-sized
    for lo in range(0, n, _QUANT_ROWS):
        hi = min(n, lo + _QUANT_ROWS)
        freq[lo:hi] = _apportion(p[lo:hi], s[lo:hi], budget)
    return freq[0] if squeeze else freq


def quantize_distribution(probs: Sequence[float]) -> FreqTable:
    return FreqTable(quantize_distributions(np.asarray(probs, dtype=np.float64)))


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self._cache = 0
        self._pending = 1
        self._skip_first = True
        self.out = bytearray()

    def _emit(self, b: int) -> None:
        if self._skip_first:
            # the leading cache byte is the integer part of the code value: always 0
            assert b == 0
            self._skip_first = False
            return
        self.out.append(b)

    def _shift_low(self) -> None:
        low = self.low
        if (low & _MASK) < _FF_TOP or low >> _WINDOW_BITS:
            carry = low >> _WINDOW_BITS
            b = self._cache
            while self._pending:
                self._emit((b + carry) & 0xFF)
                b = 0xFF
                self._pending -= 1
            self._cache = (low >> _SHIFT) & 0xFF
        self._pending += 1
        self.low = (low << 8) & _MASK

    def encode(self, cum: int, freq: int, total: int) -> None:
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        while self.range < _BOT:
            self.range <<= 8
            self._shift_low()

    def encode_many(self, cums, freqs, totals) -> None:
        """``encode`` over parallel sequences; ``totals`` may be a scalar."""
        cums = np.asarray(cums).tolist()
        freqs = np.asarray(freqs).tolist()
        totals = repeat(int(totals)) if np.isscalar(totals) else np.asarray(totals).tolist()
        low, rng = self.low, self.range
        for c, f, t in zip(cums, freqs, totals):
            r = rng // t
            low += r * c
            rng = r * f
            while rng < _BOT:
                rng <<= 8
                self.low = low
                self._shift_low()
                low = self.low
        self.low, self.range = low, rng

    def finish(self) -> bytes:
        """Flush the shortest byte string that pins a value inside the final
        interval; the decoder supplies the missing tail as zero bytes."""
        low, hi = self.low, self.low + self.range
        for k in range(_WINDOW_BYTES + 1):
            g = 1 << (_WINDOW_BITS - 8 * k)
            v = -(-low // g) * g
            if v < hi:
                break
        carry = v >> _WINDOW_BITS
        b = self._cache
        while self._pending:
            self._emit((b + carry) & 0xFF)
            b = 0xFF
            self._pending -= 1
        v &= _MASK
        for i in range(k):
            self._emit((v >> (_SHIFT - 8 * i)) & 0xFF)
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK
        self.code = 0
        self._r = 0
        for _ in range(_WINDOW_BYTES):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        p = self.pos
        self.pos = p + 1
        if p < len(self.data):
            return self.data[p]
        if p >= len(self.data) + _WINDOW_BYTES:
            raise StreamUnderflowError("range decoder ran past the end of the stream")
        return 0

    def target(self, total: int) -> int:
        """Cumulative-frequency value the next symbol's interval must contain."""
        self._r = self.range // total
        v = self.code // self._r
        if v >= total:
            raise CorruptStreamError("range decoder state is outside the table")
        return v

    def consume(self, cum: int, freq: int) -> None:
        r = self._r
        self.code -= r * cum
        self.range = r * freq
        while self.range < _BOT:
            self.code = ((self.code << 8) | self._next()) & _MASK
            self.range <<= 8

    def check_end(self) -> None:
        """Raise if bytes remain that no symbol consumed."""
        if self.pos < len(self.data):
            raise CorruptStreamError(
                f"{len(self.data) - self.pos} trailing bytes after the last symbol")
        if self.pos > len(self.data) + _WINDOW_BYTES:
            raise StreamUnderflowError("stream shorter than its symbols require")


TableProvider = Callable[[int, List[int]], FreqTable]


def encode_symbols(symbols: Sequence[int], provider: TableProvider) -> bytes:
    """Code ``symbols``; ``provider(i, history)`` sees only ``history[:i]``."""
    enc = RangeEncoder()
    history: List[int] = []
    for i, s in enumerate(symbols):
        cum, f, t = provider(i, history).interval(int(s))
        enc.encode(cum, f, t)
        history.append(int(s))
    return enc.finish()


def decode_symbols(data: bytes, provider: TableProvider, count: int) -> List[int]:
    dec = RangeDecoder(data)
    history: List[int] = []
    for i in range(count):
        table = provider(i, history)
        cum = table.cum
        v = dec.target(int(cum[-1]))
        j = int(np.searchsorted(cum, v, side="right")) - 1
        dec.consume(int(cum[j]), int(table.freq[j]))
        history.append(j + table.first)
    dec.check_end()
    return history


def ideal_bits(freqs: np.ndarray, totals) -> float:
    """Sum of ``-log2(f / total)`` over coded symbols."""
    f = np.asarray(freqs, dtype=np.float64)
    t = np.broadcast_to(np.asarray(totals, dtype=np.float64), f.shape)
    return float(-(np.log2(f) - np.log2(t)).sum())


def _earlier_smaller(key: np.ndarray, width: int) -> np.ndarray:
    """``#{j < i : key[j] < key[i]}`` for small integer keys in ``[0, width)``."""
    k = len(key)
    le = np.zeros((k + 1, width), dtype=np.int64)
    le[np.arange(1, k + 1), key] = 1
    np.cumsum(le, axis=1, out=le)  # row j+1: key[j] <= column
    np.cumsum(le, axis=0, out=le)  # row i: over j < i
    out = np.zeros(k, dtype=np.int64)
    pos = key > 0
    out[pos] = le[np.flatnonzero(pos), key[pos] - 1]
    return out


def _earlier_counts(sym: np.ndarray, alphabet: int):
    """Per position: earlier symbols that are smaller, and earlier equal ones.

    Symbols split into a high and a low nibble so the prefix tables are 16
    wide instead of ``alphabet`` wide.
    """
    k = len(sym)
    order = np.argsort(sym, kind="stable")
    ss = sym[order]
    same = np.empty(k, dtype=np.int64)
    same[order] = np.arange(k) - np.searchsorted(ss, ss)
    hi, lo = sym >> 4, sym & 15
    below = _earlier_smaller(hi, (alphabet + 15) >> 4)
    # same high nibble, smaller low nibble: work inside each high group
    by_hi = np.argsort(hi, kind="stable")
    hs, ls = hi[by_hi], lo[by_hi]
    le = np.zeros((k + 1, 16), dtype=np.int64)
    le[np.arange(1, k + 1), ls] = 1
    np.cumsum(le, axis=1, out=le)
    np.cumsum(le, axis=0, out=le)
    gstart = np.searchsorted(hs, hs)
    r = np.arange(k)
    pos = ls > 0
    inner = np.zeros(k, dtype=np.int64)
    inner[pos] = le[r[pos], ls[pos] - 1] - le[gstart[pos], ls[pos] - 1]
    below[by_hi] += inner
    return below, same


class AdaptiveModel:
    """Order-0 model: counts start at 1, grow by 1 per coded symbol and are
    halved (rounding up) once the total would exceed ``limit``.

    Cumulative counts live in a Fenwick tree so each lookup is O(log A).
    """

    def __init__(self, alphabet: int = NUM_OCC_SYMBOLS, first: int = 1, limit: int = FREQ_TOTAL):
        self.alphabet = alphabet
        self.first = first
        self.limit = limit
        self.counts = [1] * alphabet
        self.total = alphabet
        self._size = 1 << (alphabet - 1).bit_length()
        self._rebuild()

    def _rebuild(self) -> None:
        tree = [0] * (self._size + 1)
        for i, c in enumerate(self.counts):
            j = i + 1
            while j <= self._size:
                tree[j] += c
                j += j & -j
        self._tree = tree

    def _prefix(self, i: int) -> int:
        """Sum of counts[0:i]."""
        s = 0
        t = self._tree
        while i > 0:
            s += t[i]
            i &= i - 1
        return s

    def interval(self, symbol: int):
        i = symbol - self.first
        if not 0 <= i < self.alphabet:
            raise ContractViolation(f"symbol {symbol} outside the model alphabet")
        return self._prefix(i), self.counts[i], self.total

    def find(self, target: int):
        """Index whose cumulative interval contains ``target``."""
        pos = 0
        rem = target
        t = self._tree
        step = self._size
        while step:
            nxt = pos + step
            if nxt <= self._size and t[nxt] <= rem:
                pos = nxt
                rem -= t[nxt]
            step >>= 1
        # pos is the count of symbols whose cumulative end is <= target
        return pos, target - rem

    def update(self, symbol: int) -> None:
        i = symbol - self.first
        if self.total + 1 > self.limit:
            self.counts = [(c + 1) // 2 for c in self.counts]
            self.total = sum(self.counts)
            self._rebuild()
        self.counts[i] += 1
        self.total += 1
        j = i + 1
        while j <= self._size:
            self._tree[j] += 1
            j += j & -j

    def cost_bits(self, symbol: int) -> float:
        return -math.log2(self.counts[symbol - self.first] / self.total)

    def intervals(self, symbols) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(cum, freq, total)`` of every symbol in turn, advancing the model
        past all of them; same result as alternating ``interval`` and
        ``update``, computed in blocks between rescales."""
        idx = np.asarray(symbols, dtype=np.int64).reshape(-1) - self.first
        if len(idx) and (idx.min() < 0 or idx.max() >= self.alphabet):
            raise ContractViolation("symbol outside the model alphabet")
        n = len(idx)
        cum, freq, tot = (np.empty(n, dtype=np.int64) for _ in range(3))
        counts = np.array(self.counts, dtype=np.int64)
        total = self.total
        i = 0
        while i < n:
            room = self.limit - total
            if room <= 0:
                # the next update rescales; take it one symbol at a time
                j = idx[i]
                cum[i], freq[i], tot[i] = counts[:j].sum(), counts[j], total
                counts = (counts + 1) // 2
                counts[j] += 1
                total = int(counts.sum())
                i += 1
                continue
            k = min(n - i, room, _BLOCK)
            sym = idx[i:i + k]
            rows = np.arange(k)
            below, same = _earlier_counts(sym, self.alphabet)
            base_cum = np.concatenate(([0], np.cumsum(counts)))
            freq[i:i + k] = counts[sym] + same
            cum[i:i + k] = base_cum[sym] + below
            tot[i:i + k] = total + rows
            counts = counts + np.bincount(sym, minlength=self.alphabet)
            total += k
            i += k
        self.counts = counts.tolist()
        self.total = int(total)
        self._rebuild()
        return cum, freq, tot

    def encode_many(self, enc: RangeEncoder, symbols) -> float:
        """Code a run of symbols; returns their ideal cost in bits."""
        cum, freq, tot = self.intervals(symbols)
        enc.encode_many(cum, freq, tot)
        return float(-(np.log2(freq) - np.log2(tot)).sum()) if len(freq) else 0.0

    def decode_many(self, dec: "RangeDecoder", count: int) -> List[int]:
        out = []
        tree, counts, size = self._tree, self.counts, self._size
        alphabet, limit, first = self.alphabet, self.limit, self.first
        data, n_data = dec.data, len(dec.data)
        for _ in range(count):
            # dec.target / dec.consume, inlined
            r = dec.range // self.total
            v = dec.code // r
            if v >= self.total:
                raise CorruptStreamError("range decoder state is outside the table")
            pos, rem, step = 0, v, size >> 1
            while step:
                nxt = pos + step
                if tree[nxt] <= rem:
                    pos = nxt
                    rem -= tree[nxt]
                step >>= 1
            if pos >= alphabet:
                raise CorruptStreamError("adaptive model decoded an out-of-alphabet symbol")
            code = dec.code - r * (v - rem)
            rng = r * counts[pos]
            while rng < _BOT:
                p = dec.pos
                if p < n_data:
                    byte = data[p]
                elif p < n_data + _WINDOW_BYTES:
                    byte = 0
                else:
                    raise StreamUnderflowError("range decoder ran past the end of the stream")
                dec.pos = p + 1
                code = ((code << 8) | byte) & _MASK
                rng <<= 8
            dec.code, dec.range = code, rng
            if self.total + 1 > limit:
                self.update(pos + first)
                tree, counts = self._tree, self.counts
            else:
                counts[pos] += 1
                self.total += 1
                j = pos + 1
                while j <= size:
                    tree[j] += 1
                    j += j & -j
            out.append(pos + first)
        return out

    def encode(self, enc: RangeEncoder, symbol: int) -> float:
        cum, f, t = self.interval(symbol)
        enc.encode(cum, f, t)
        self.update(symbol)
        return -math.log2(f / t)

    def decode(self, dec: RangeDecoder) -> int:
        v = dec.target(self.total)
        i, cum = self.find(v)
        if i >= self.alphabet:
            raise CorruptStreamError("adaptive model decoded an out-of-alphabet symbol")
        dec.consume(cum, self.counts[i])
        s = i + self.first
        self.update(s)
        return s


def encode_adaptive(symbols: Sequence[int], alphabet: int = NUM_OCC_SYMBOLS, first: int = 1) -> bytes:
    enc = RangeEncoder()
    model = AdaptiveModel(alphabet, first)
    for s in symbols:
        model.encode(enc, int(s))
    return enc.finish()


def decode_adaptive(data: bytes, count: int, alphabet: int = NUM_OCC_SYMBOLS, first: int = 1,
                    dec: Optional[RangeDecoder] = None) -> List[int]:
    own = dec is None
    dec = dec or RangeDecoder(data)
    model = AdaptiveModel(alphabet, first)
    out = [model.decode(dec) for _ in range(count)]
    if own:
        dec.check_end()
    return out
