"""Target execution: the trace contract, in-process toy targets and a subprocess adapter.

Every adapter fills a 65536-byte region of saturating per-edge hit counts. In-process
targets are plain Python callables that report edges through a :class:`TraceRecorder`;
a crash is signalled by raising :class:`TargetCrash`, anything else escaping the
target is an adapter fault and ends the campaign.
"""

from __future__ import annotations

import os
import subprocess
import tempfile
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .coverage import MAP_SIZE

DEFAULT_TIMEOUT_MS = 1000

# the wall-clock deadline is polled once per this many edge hits
_DEADLINE_POLL = 1024


class Verdict(Enum):
    OK = "ok"
    CRASH = "crash"
    HANG = "hang"


@dataclass
class ExecResult:
    verdict: Verdict
    raw_trace: np.ndarray
    exec_us: int
    # edge hits recorded; in-process targets only, 0 otherwise
    steps: int = 0
    # distinct edges hit, when the adapter knows them; saves a full-map scan
    edges: list[int] | None = None


class TargetCrash(Exception):
    """Raised by an in-process target to model abnormal termination."""


class AdapterError(RuntimeError):
    """Fault in the execution machinery itself, not in the target."""


class _Timeout(BaseException):
    # BaseException so a target's own ``except Exception`` cannot swallow it
    pass


class TraceRecorder:
    """Receives edge hits from an in-process target during one execution."""

    __slots__ = ("trace", "edges", "steps", "_deadline", "_max_steps", "_next_poll")

    def __init__(self, deadline: float | None = None, max_steps: int | None = None):
        self.trace = bytearray(MAP_SIZE)
        self.edges = []  # distinct edges in first-hit order
        self.steps = 0
        self._deadline = deadline
        self._max_steps = max_steps
        self._next_poll = _DEADLINE_POLL

    def hit(self, edge: int) -> None:
        t = self.trace
        c = t[edge]
        if c == 0:
            self.edges.append(edge)
            t[edge] = 1
        elif c < 255:
            t[edge] = c + 1
        self.steps += 1
        if self.steps >= self._next_poll:
            self._next_poll += _DEADLINE_POLL
            self._check_budget()

    def _check_budget(self) -> None:
        if self._max_steps is not None and self.steps > self._max_steps:
            raise _Timeout
        if self._deadline is not None and time.perf_counter() > self._deadline:
            raise _Timeout


class TargetAdapter:
    """Deterministic mapping from input bytes to an execution result."""

    name: str = "target"
    in_process: bool = True

    def run(self, data: bytes, recorder: TraceRecorder) -> None:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class InProcessTarget(TargetAdapter):
    def __init__(self, name: str, func: Callable[[bytes, TraceRecorder], None], doc: str = ""):
        self.name = name
        self._func = func
        self.__doc__ = doc

    def run(self, data, recorder):
        self._func(data, recorder)


def run_target(
    adapter: TargetAdapter,
    data: bytes,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
    virtual_clock: bool = False,
) -> ExecResult:
    """Execute ``adapter`` once on ``data``.

    With ``virtual_clock`` an in-process run is charged one microsecond per edge hit
    (plus one) instead of its measured wall time, and the hang budget becomes
    ``timeout_ms * 1000`` edge hits. This makes whole campaigns reproducible.
    """
    if timeout_ms <= 0:
        raise ValueError("timeout must be positive")
    if not adapter.in_process:
        return adapter.execute(data, timeout_ms)

    if virtual_clock:
        recorder = TraceRecorder(max_steps=timeout_ms * 1000)
    else:
        recorder = TraceRecorder(deadline=time.perf_counter() + timeout_ms / 1000.0)
    verdict = Verdict.OK
    start = time.perf_counter()
    try:
        adapter.run(data, recorder)
    except TargetCrash:
        verdict = Verdict.CRASH
    except _Timeout:
        verdict = Verdict.HANG
    except Exception as exc:
        raise AdapterError(f"{adapter.name}: adapter fault: {exc!r}") from exc
    elapsed = time.perf_counter() - start

    if virtual_clock:
        exec_us = recorder.steps + 1
    else:
        exec_us = max(1, int(elapsed * 1e6))
    raw = np.frombuffer(recorder.trace, dtype=np.uint8)
    return ExecResult(verdict, raw, exec_us, recorder.steps, recorder.edges)


class SubprocessTarget(TargetAdapter):
    """External instrumented binary.

    The target is run as ``[path, input_file]`` and must write exactly 65536 raw count
    bytes to the file named by ``$TRACE_OUT``. Death by signal is a crash; exceeding
    the timeout is a hang.
    """

    in_process = False

    def __init__(self, path: str | os.PathLike):
        self.path = str(path)
        self.name = Path(self.path).name
        self._workdir = tempfile.mkdtemp(prefix="banditfuzz-")
        self._input = os.path.join(self._workdir, "cur_input")
        self._trace = os.path.join(self._workdir, "trace")

    def execute(self, data: bytes, timeout_ms: int) -> ExecResult:
        with open(self._input, "wb") as f:
            f.write(data)
        if os.path.exists(self._trace):
            os.unlink(self._trace)
        env = dict(os.environ, TRACE_OUT=self._trace)
        start = time.perf_counter()
        try:
            proc = subprocess.run(
                [self.path, self._input],
                env=env,
                stdin=subprocess.DEVNULL,
                stdout=subprocess.DEVNULL,
                stderr=subprocess.DEVNULL,
                timeout=timeout_ms / 1000.0,
            )
        except subprocess.TimeoutExpired:
            verdict = Verdict.HANG
        except OSError as exc:
            raise AdapterError(f"cannot execute {self.path}: {exc}") from exc
        else:
            verdict = Verdict.CRASH if proc.returncode < 0 else Verdict.OK
        exec_us = max(1, int((time.perf_counter() - start) * 1e6))

        raw = np.zeros(MAP_SIZE, dtype=np.uint8)
        try:
            blob = Path(self._trace).read_bytes()
        except FileNotFoundError:
            blob = None
        if blob is not None:
            if len(blob) != MAP_SIZE:
                raise AdapterError(f"trace file has {len(blob)} bytes, expected {MAP_SIZE}")
            raw = np.frombuffer(blob, dtype=np.uint8).copy()
        elif verdict is Verdict.OK:
            raise AdapterError(f"{self.path} exited normally without writing $TRACE_OUT")
        return ExecResult(verdict, raw, exec_us)


# -- bundled toy targets -----------------------------------------------------

MAGIC4 = b"FUZZ"
CHAIN16 = b"bandit-lstm-afl!"
SPIN_TRIGGER = ord("!")


def _magic_compare(data: bytes, rec: TraceRecorder, magic: bytes) -> None:
    # edge 0: entry; edge 1+i: byte i matched; edge 100+i: mismatch at byte i
    rec.hit(0)
    for i, want in enumerate(magic):
        if i >= len(data) or data[i] != want:
            rec.hit(100 + i)
            return
        rec.hit(1 + i)
    raise TargetCrash(f"magic {magic!r} matched")


def _magic4(data, rec):
    _magic_compare(data, rec, MAGIC4)


def _chain16(data, rec):
    _magic_compare(data, rec, CHAIN16)


def _spinner(data, rec):
    # edge 0: entry; edge 1: spin loop (never exits); edge 2: per-byte loop;
    # edges 8..15: top three bits of the first byte
    rec.hit(0)
    if not data:
        return
    if data[0] == SPIN_TRIGGER:
        while True:
            rec.hit(1)
    rec.hit(8 + (data[0] >> 5))
    for _ in data:
        rec.hit(2)


_BUNDLED = {
    "magic4": (
        _magic4,
        "Byte-at-a-time check of the 4-byte magic 'FUZZ'; crashes on a full match. "
        "Edges: 0 entry, 1..4 matched byte i-1, 100..103 mismatch at byte i-100.",
    ),
    "chain16": (
        _chain16,
        "Sixteen sequential byte comparisons against 'bandit-lstm-afl!'; crashes when all "
        "match. Edges: 0 entry, 1..16 matched byte i-1, 100..115 mismatch at byte i-100.",
    ),
    "spinner": (
        _spinner,
        "Hangs when the first byte is '!'. Edges: 0 entry, 1 spin loop, 2 one hit per "
        "input byte (saturates at 255), 8..15 first byte's top three bits.",
    ),
}


def bundled_targets() -> list[TargetAdapter]:
    return [InProcessTarget(name, func, doc) for name, (func, doc) in _BUNDLED.items()]


def resolve_target(spec: str) -> TargetAdapter:
    """A bundled target by name, otherwise a path to an external binary."""
    if spec in _BUNDLED:
        func, doc = _BUNDLED[spec]
        return InProcessTarget(spec, func, doc)
    path = Path(spec)
    if not path.is_file() or not os.access(path, os.X_OK):
        raise ValueError(f"unknown target {spec!r}: not a bundled target or executable file")
    return SubprocessTarget(path)
