"""Edge-coverage bitmaps: hit-count bucketing, virgin-bit bookkeeping, trace checksums.

A raw trace is the 64 KiB array of saturating per-edge hit counts written by one
execution. It must be classified exactly once before it can be compared against
the virgin map or hashed; :class:`ClassifiedTrace` marks that distinction so a
raw array cannot be fed to :func:`has_new_bits` by mistake.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np
import xxhash

MAP_SIZE = 1 << 16

# xxh64 seed; frozen by a golden test in tests/test_coverage.py
HASH_SEED = 0xA5B35705


def _build_count_class_lookup() -> np.ndarray:
    lut = np.zeros(256, dtype=np.uint8)
    lut[1] = 0x01
    lut[2] = 0x02
    lut[3] = 0x04
    lut[4:8] = 0x08
    lut[8:16] = 0x10
    lut[16:32] = 0x20
    lut[32:128] = 0x40
    lut[128:256] = 0x80
    lut.setflags(write=False)
    return lut


COUNT_CLASS_LOOKUP = _build_count_class_lookup()
_BYTE_OFFSETS = np.arange(8)


def _nonzero_bytes(arr: np.ndarray) -> np.ndarray:
    # scan 8-byte words first; traces are sparse
    words = np.flatnonzero(arr.view(np.uint64))
    if words.size == 0:
        return words
    cand = (words[:, None] * 8 + _BYTE_OFFSETS).ravel()
    return cand[arr[cand] != 0]


class NewBits(IntEnum):
    NO_NEW = 0
    NEW_COUNT = 1
    NEW_EDGE = 2


class ClassifiedTrace:
    """A bucketed trace. Construct through :func:`classify_counts`."""

    __slots__ = ("bits", "_nonzero")

    def __init__(self, bits: np.ndarray, nonzero: np.ndarray | None = None):
        if bits.shape != (MAP_SIZE,) or bits.dtype != np.uint8:
            raise ValueError(f"trace must be a uint8 array of length {MAP_SIZE}")
        bits = np.ascontiguousarray(bits)
        self.bits = bits
        self._nonzero = nonzero

    @classmethod
    def from_buckets(cls, bits) -> "ClassifiedTrace":
        """Wrap an array that already holds bucket masks (0 or a single set bit)."""
        arr = np.asarray(bits, dtype=np.uint8)
        nz = arr[arr != 0]
        if np.any(nz & (nz - 1)):
            raise ValueError("classified trace bytes must be zero or a single bucket bit")
        return cls(arr.copy())

    @property
    def nonzero(self) -> np.ndarray:
        """Indices of covered map bytes, ascending."""
        if self._nonzero is None:
            self._nonzero = _nonzero_bytes(self.bits)
        return self._nonzero

    def __array__(self, dtype=None, copy=None):
        return self.bits if dtype is None else self.bits.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, ClassifiedTrace):
            return NotImplemented
        return bool(np.array_equal(self.bits, other.bits))

    __hash__ = None


def classify_counts(raw_trace, edges=None) -> ClassifiedTrace:
    """Replace every raw hit count with its power-of-two bucket mask.

    ``edges``, if given, must list exactly the nonzero positions of ``raw_trace``
    (in any order); it replaces the scan over the whole map.
    """
    raw = np.ascontiguousarray(raw_trace, dtype=np.uint8)
    if raw.shape != (MAP_SIZE,):
        raise ValueError(f"raw trace must have length {MAP_SIZE}, got {raw.shape}")
    if edges is None:
        idx = _nonzero_bytes(raw)
    else:
        idx = np.array(sorted(edges), dtype=np.intp)
    out = np.zeros(MAP_SIZE, dtype=np.uint8)
    out[idx] = COUNT_CLASS_LOOKUP[raw[idx]]
    return ClassifiedTrace(out, idx)


def _require_classified(trace) -> ClassifiedTrace:
    if not isinstance(trace, ClassifiedTrace):
        raise TypeError("expected a ClassifiedTrace; run classify_counts on raw traces first")
    return trace


def has_new_bits(classified: ClassifiedTrace, virgin: np.ndarray) -> NewBits:
    """Compare a classified trace with the virgin map, clearing newly seen bits in place."""
    classified = _require_classified(classified)
    idx = classified.nonzero
    if idx.size == 0:
        return NewBits.NO_NEW
    cur = classified.bits[idx]
    vir = virgin[idx]
    fresh = cur & vir
    hit = fresh != 0
    if not hit.any():
        return NewBits.NO_NEW
    verdict = NewBits.NEW_EDGE if np.any(vir[hit] == 0xFF) else NewBits.NEW_COUNT
    virgin[idx] = vir & ~cur
    return verdict


def count_bytes(classified: ClassifiedTrace) -> int:
    return int(_require_classified(classified).nonzero.size)


def hash_trace(classified: ClassifiedTrace) -> int:
    """64-bit xxh64 checksum of the classified map."""
    return xxhash.xxh64_intdigest(_require_classified(classified).bits.tobytes(), seed=HASH_SEED)


def new_virgin_map() -> np.ndarray:
    return np.full(MAP_SIZE, 0xFF, dtype=np.uint8)


class CoverageMap:
    """Owns the virgin map and the most recently classified trace of one campaign."""

    def __init__(self):
        self.virgin_bits = new_virgin_map()
        self.trace_bits = ClassifiedTrace(np.zeros(MAP_SIZE, dtype=np.uint8))

    def observe(self, raw_trace, edges=None) -> tuple[ClassifiedTrace, NewBits]:
        self.trace_bits = classify_counts(raw_trace, edges)
        return self.trace_bits, has_new_bits(self.trace_bits, self.virgin_bits)

    @property
    def virgin_bytes_covered(self) -> int:
        """Number of map bytes with at least one bucket bit seen."""
        return int(np.count_nonzero(self.virgin_bits != 0xFF))
