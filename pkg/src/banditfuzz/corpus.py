"""The test-case queue: top-rated bookkeeping, culling, skip heuristics and the output directory."""

from __future__ import annotations

import os
import random
from dataclasses import dataclass, field
from pathlib import Path

from .coverage import MAP_SIZE, ClassifiedTrace, NewBits, count_bytes, hash_trace

SKIP_PENDING_FAVORED = 0.99
SKIP_NONFAV_FUZZED = 0.95
SKIP_NONFAV_NEW = 0.75


class PersistenceError(RuntimeError):
    """The output directory could not be written; fatal for a campaign."""


@dataclass(eq=False)
class TestCase:
    id: int
    data: bytes
    exec_us: int
    bitmap_size: int
    checksum: int
    depth: int = 0
    favored: bool = False
    was_fuzzed: bool = False
    minimized_trace: ClassifiedTrace | None = field(default=None, repr=False)
    top_rated_count: int = 0

    __test__ = False  # not a pytest class

    @property
    def length(self) -> int:
        return len(self.data)


def fav_factor(tc: TestCase) -> int:
    """Cost of a test case for top-rated selection; lower is better."""
    return tc.exec_us * len(tc.data)


class OutputDir:
    """queue/, crashes/ and hangs/ under the campaign output directory.

    Files hold the raw input bytes only and are named ``id:%06d``. Crashes and hangs
    are de-duplicated by the checksum of their classified trace.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.queue_dir = self.root / "queue"
        self.crash_dir = self.root / "crashes"
        self.hang_dir = self.root / "hangs"
        self._seen = {"crashes": set(), "hangs": set()}
        self._counts = {"crashes": 0, "hangs": 0}

    def create(self) -> None:
        if self.root.exists() and any(self.root.iterdir()):
            raise FileExistsError(f"output directory {self.root} is not empty")
        for d in (self.queue_dir, self.crash_dir, self.hang_dir):
            d.mkdir(parents=True, exist_ok=True)

    def _write(self, path: Path, data: bytes) -> None:
        try:
            path.write_bytes(data)
        except OSError as exc:
            raise PersistenceError(f"cannot write {path}: {exc}") from exc

    def save_queue_entry(self, tc: TestCase) -> None:
        self._write(self.queue_dir / f"id:{tc.id:06d}", tc.data)

    def save_fault(self, kind: str, data: bytes, checksum: int) -> bool:
        """Store a crash or hang if its trace checksum is new. Returns True if stored."""
        if checksum in self._seen[kind]:
            return False
        self._seen[kind].add(checksum)
        n = self._counts[kind]
        self._counts[kind] = n + 1
        self._write(self.root / kind / f"id:{n:06d}", data)
        return True

    @property
    def crashes_unique(self) -> int:
        return self._counts["crashes"]

    @property
    def hangs_unique(self) -> int:
        return self._counts["hangs"]


class Queue:
    """Ordered test cases plus the per-map-byte top-rated table."""

    def __init__(self, output: OutputDir | None = None):
        self.entries: list[TestCase] = []
        self.top_rated: list[TestCase | None] = [None] * MAP_SIZE
        self._rated: set[int] = set()
        self.pending_favored = 0
        self.output = output
        self._total_exec_us = 0
        self._total_bitmap = 0

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def avg_exec_us(self) -> float:
        return self._total_exec_us / len(self.entries)

    @property
    def avg_bitmap_size(self) -> float:
        return self._total_bitmap / len(self.entries)

    def add(self, data: bytes, exec_us: int, classified: ClassifiedTrace, depth: int = 0) -> TestCase:
        """Append a test case, update top-rated and persist it."""
        tc = TestCase(
            id=len(self.entries),
            data=bytes(data),
            exec_us=max(1, int(exec_us)),
            bitmap_size=count_bytes(classified),
            checksum=hash_trace(classified),
            depth=depth,
        )
        self.entries.append(tc)
        self._total_exec_us += tc.exec_us
        self._total_bitmap += tc.bitmap_size
        self.update_top_rated(tc, classified)
        if self.output is not None:
            self.output.save_queue_entry(tc)
        return tc

    def add_if_interesting(
        self,
        data: bytes,
        exec_us: int,
        classified: ClassifiedTrace,
        verdict: NewBits,
        parent: TestCase | None,
    ) -> bool:
        if verdict is NewBits.NO_NEW:
            return False
        depth = 0 if parent is None else parent.depth + 1
        self.add(data, exec_us, classified, depth)
        return True

    def update_top_rated(self, tc: TestCase, classified: ClassifiedTrace) -> None:
        factor = fav_factor(tc)
        top = self.top_rated
        for i in classified.nonzero.tolist():
            inc = top[i]
            if inc is not None:
                if factor >= fav_factor(inc):
                    continue
                inc.top_rated_count -= 1
                if inc.top_rated_count == 0:
                    inc.minimized_trace = None
            else:
                self._rated.add(i)
            top[i] = tc
            tc.top_rated_count += 1
        if tc.top_rated_count > 0:
            tc.minimized_trace = classified

    def cull(self) -> None:
        """Re-mark a favored subset whose traces cover every top-rated map byte."""
        for e in self.entries:
            e.favored = False
        covered = bytearray(MAP_SIZE)
        for i in sorted(self._rated):
            if covered[i]:
                continue
            tc = self.top_rated[i]
            tc.favored = True
            for j in tc.minimized_trace.nonzero.tolist():
                covered[j] = 1
        self.pending_favored = sum(1 for e in self.entries if e.favored and not e.was_fuzzed)

    def mark_fuzzed(self, tc: TestCase) -> None:
        if tc.was_fuzzed:
            return
        tc.was_fuzzed = True
        if tc.favored:
            self.pending_favored -= 1

    def should_skip(self, tc: TestCase, rng: random.Random) -> bool:
        if tc.favored:
            return False
        if self.pending_favored > 0:
            p = SKIP_PENDING_FAVORED
        elif tc.was_fuzzed:
            p = SKIP_NONFAV_FUZZED
        else:
            p = SKIP_NONFAV_NEW
        return rng.random() < p
