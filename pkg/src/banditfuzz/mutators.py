"""Deterministic mutation stage, stacked havoc mutations and splicing."""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from typing import Callable, Iterator

ARITH_MAX = 35
HAVOC_STACK_POW2 = 7
HAVOC_BLOCK_MAX = 32
MAX_INPUT_LEN = 1 << 20
WINDOW_LEN = 128

INTERESTING_8 = (-128, -1, 0, 1, 16, 32, 64, 100, 127)
INTERESTING_16 = INTERESTING_8 + (-32768, -129, 128, 255, 256, 512, 1000, 1024, 4096, 32767)
INTERESTING_32 = INTERESTING_16 + (
    -2147483648, -100663046, -32769, 32768, 65535, 65536, 100663045, 2147483647,
)

_PACK = {
    (2, "<"): struct.Struct("<H"),
    (2, ">"): struct.Struct(">H"),
    (4, "<"): struct.Struct("<I"),
    (4, ">"): struct.Struct(">I"),
}


@dataclass
class MutationBuffer:
    """Bytes under mutation, optionally confined to a window of the buffer.

    With a window set, mutations stay inside ``[offset, offset + 128)`` clipped to
    the buffer length, and the length never changes.
    """

    data: bytearray
    window: tuple[int, int] | None = None

    def __post_init__(self):
        if not isinstance(self.data, bytearray):
            self.data = bytearray(self.data)
        if self.window is not None:
            offset, length = self.window
            if offset < 0 or length <= 0:
                raise ValueError(f"bad window {self.window}")

    @property
    def bounds(self) -> tuple[int, int]:
        if self.window is None:
            return 0, len(self.data)
        offset, length = self.window
        return offset, min(offset + length, len(self.data))


# -- deterministic stage -------------------------------------------------------


def _flip_bit(buf: bytearray, bit: int) -> None:
    buf[bit >> 3] ^= 128 >> (bit & 7)


def _bitflips(data: bytes, width: int) -> Iterator[bytes]:
    nbits = len(data) * 8
    buf = bytearray(data)
    for start in range(nbits - width + 1):
        for b in range(start, start + width):
            _flip_bit(buf, b)
        yield bytes(buf)
        for b in range(start, start + width):
            _flip_bit(buf, b)


def _byteflips(data: bytes, width: int) -> Iterator[bytes]:
    buf = bytearray(data)
    for i in range(len(data) - width + 1):
        for j in range(i, i + width):
            buf[j] ^= 0xFF
        yield bytes(buf)
        for j in range(i, i + width):
            buf[j] ^= 0xFF


def _put_word(buf: bytearray, i: int, width: int, value: int, order: str) -> None:
    if width == 1:
        buf[i] = value & 0xFF
    else:
        _PACK[width, order].pack_into(buf, i, value & ((1 << (8 * width)) - 1))


def _get_word(buf: bytes, i: int, width: int, order: str) -> int:
    if width == 1:
        return buf[i]
    return _PACK[width, order].unpack_from(buf, i)[0]


def _orders(width: int) -> tuple[str, ...]:
    return ("<",) if width == 1 else ("<", ">")


def _arith(data: bytes, width: int) -> Iterator[bytes]:
    buf = bytearray(data)
    mask = (1 << (8 * width)) - 1
    for i in range(len(data) - width + 1):
        orig = bytes(buf[i:i + width])
        for order in _orders(width):
            cur = _get_word(buf, i, width, order)
            for delta in range(1, ARITH_MAX + 1):
                for value in ((cur + delta) & mask, (cur - delta) & mask):
                    _put_word(buf, i, width, value, order)
                    yield bytes(buf)
                buf[i:i + width] = orig


def _interesting(data: bytes, width: int, table: tuple[int, ...]) -> Iterator[bytes]:
    buf = bytearray(data)
    for i in range(len(data) - width + 1):
        orig = bytes(buf[i:i + width])
        seen = set()
        for value in table:
            for order in _orders(width):
                _put_word(buf, i, width, value, order)
                chunk = bytes(buf[i:i + width])
                if chunk != orig and chunk not in seen:
                    seen.add(chunk)
                    yield bytes(buf)
                buf[i:i + width] = orig


def deterministic_mutants(data: bytes) -> Iterator[tuple[str, bytes]]:
    """Yield ``(stage, mutant)`` for every deterministic-stage mutant of ``data``.

    Stages in order: walking bit flips (flip1/2/4), walking byte flips
    (flip8/16/32), arithmetic +/-1..35 on 8/16/32-bit words in both byte orders
    (arith8/16/32), interesting-value substitution (int8/16/32). Interesting values
    that leave the word unchanged, or repeat a value already tried at that offset,
    are skipped.
    """
    data = bytes(data)
    for width in (1, 2, 4):
        for m in _bitflips(data, width):
            yield f"flip{width}", m
    for width in (1, 2, 4):
        for m in _byteflips(data, width):
            yield f"flip{8 * width}", m
    for width in (1, 2, 4):
        for m in _arith(data, width):
            yield f"arith{8 * width}", m
    for width, table in ((1, INTERESTING_8), (2, INTERESTING_16), (4, INTERESTING_32)):
        for m in _interesting(data, width, table):
            yield f"int{8 * width}", m


def deterministic_stage(data: bytes, execute: Callable[[bytes], object]) -> int:
    """Run ``execute`` on every deterministic mutant; returns the number executed."""
    n = 0
    for _, mutant in deterministic_mutants(data):
        execute(mutant)
        n += 1
    return n


# -- havoc -----------------------------------------------------------------------

# Primitives draw from ``rand`` (a bound ``Random.random``) and scale the float by
# hand: ``int(rand() * n)`` is several times cheaper than randrange, and havoc makes
# dozens of draws per input.


def _h_flip_bit(data, lo, hi, rand):
    _flip_bit(data, lo * 8 + int(rand() * ((hi - lo) * 8)))


def _h_interesting(width, table):
    n_values = len(table)

    def op(data, lo, hi, rand):
        if hi - lo < width:
            return
        i = lo + int(rand() * (hi - lo - width + 1))
        order = "<" if width == 1 or rand() < 0.5 else ">"
        _put_word(data, i, width, table[int(rand() * n_values)], order)
    return op


def _h_random_byte(data, lo, hi, rand):
    # xor with 1..255 so the byte always changes
    data[lo + int(rand() * (hi - lo))] ^= 1 + int(rand() * 255)


def _h_arith_byte(data, lo, hi, rand):
    i = lo + int(rand() * (hi - lo))
    delta = 1 + int(rand() * ARITH_MAX)
    if rand() < 0.5:
        delta = -delta
    data[i] = (data[i] + delta) & 0xFF


def _h_delete_block(data, lo, hi, rand):
    n = len(data)
    if n < 2:
        return
    length = 1 + int(rand() * min(HAVOC_BLOCK_MAX, n - 1))
    start = int(rand() * (n - length + 1))
    del data[start:start + length]


def _h_clone_block(data, lo, hi, rand):
    n = len(data)
    length = 1 + int(rand() * min(HAVOC_BLOCK_MAX, max(1, n)))
    if n + length > MAX_INPUT_LEN:
        return
    at = int(rand() * (n + 1))
    if n and rand() < 0.75:
        src = int(rand() * (n - min(length, n) + 1))
        block = bytes(data[src:src + length])
    else:
        block = bytes([int(rand() * 256)]) * length
    data[at:at] = block


HAVOC_PRIMITIVES = {
    "flip_bit": _h_flip_bit,
    "interesting_8": _h_interesting(1, INTERESTING_8),
    "interesting_16": _h_interesting(2, INTERESTING_16),
    "interesting_32": _h_interesting(4, INTERESTING_32),
    "random_byte": _h_random_byte,
    "arith_byte": _h_arith_byte,
    "delete_block": _h_delete_block,
    "clone_block": _h_clone_block,
}
_RESIZING = ("delete_block", "clone_block")
_IN_PLACE = tuple(k for k in HAVOC_PRIMITIVES if k not in _RESIZING)
_ALL = tuple(HAVOC_PRIMITIVES)
_IN_PLACE_OPS = tuple(HAVOC_PRIMITIVES[k] for k in _IN_PLACE)
_ALL_OPS = tuple(HAVOC_PRIMITIVES[k] for k in _ALL)
_CLONE = _ALL.index("clone_block")


def havoc_step(buf: MutationBuffer, rng: random.Random) -> list[str]:
    """Apply a stack of 2**k (k in 1..7) random primitives; returns their names in order."""
    rand = rng.random
    data = buf.data
    if buf.window is not None:
        names, ops = _IN_PLACE, _IN_PLACE_OPS
        lo, hi = buf.bounds
        k = len(ops)
        picks = [int(rand() * k) for _ in range(2 << int(rand() * HAVOC_STACK_POW2))]
        if hi > lo:
            for j in picks:
                ops[j](data, lo, hi, rand)
        return [names[j] for j in picks]

    names, ops = _ALL, _ALL_OPS
    k = len(ops)
    picks = [int(rand() * k) for _ in range(2 << int(rand() * HAVOC_STACK_POW2))]
    # only clone can grow an empty buffer
    for j in picks:
        hi = len(data)
        if hi or j == _CLONE:
            ops[j](data, 0, hi, rand)
    return [names[j] for j in picks]


# -- splicing ------------------------------------------------------------------------


def splice(a: bytes, b: bytes, rng: random.Random) -> bytes | None:
    """Crossover of ``a`` and ``b``, or ``None`` when the pair cannot be spliced.

    The crossover point is drawn uniformly from (first difference, last difference]
    so the result differs from both parents; the result always has ``len(b)`` bytes.
    """
    if len(a) < 2 or len(b) < 2:
        return None
    n = min(len(a), len(b))
    first = last = -1
    for i in range(n):
        if a[i] != b[i]:
            if first < 0:
                first = i
            last = i
    if first < 0 or last == first:
        return None
    cut = rng.randint(first + 1, last)
    return bytes(a[:cut]) + bytes(b[cut:])
