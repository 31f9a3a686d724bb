"""Energy assignment: heuristic performance score and the contextual-bandit multiplier.

One call to :func:`fuzz_one` spends a test case's energy. In baseline mode that is
the deterministic stage (once per case) followed by whole-input havoc. In bandit
modes a coin with ``fuzzing_prob`` chooses between whole-input havoc at the
heuristic energy and windowed havoc on a 128-byte state whose energy is scaled by a
multiplier picked epsilon-greedily from the policy.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from enum import Enum
from typing import Protocol

import numpy as np

from .corpus import Queue, TestCase
from .mutators import WINDOW_LEN, MutationBuffer, deterministic_stage, havoc_step, splice
from .policy import encode

ACTIONS = (0.50, 0.75, 1.0, 1.25, 1.50)

MIN_PERF_SCORE = 16
MAX_PERF_SCORE = 16384
# share of a whole-input havoc round run on a spliced base
SPLICE_SHARE = 0.25


class Mode(Enum):
    BASELINE = "baseline"
    TRAIN = "train"
    TEST = "test"


@dataclass
class SchedulerConfig:
    fuzzing_prob: float = 0.4
    epsilon: float = 0.1
    mode: Mode = Mode.BASELINE
    skip_deterministic: bool = False

    def __post_init__(self):
        self.mode = Mode(self.mode)
        for name in ("fuzzing_prob", "epsilon"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def deterministic_enabled(self) -> bool:
        return self.mode is Mode.BASELINE and not self.skip_deterministic


@dataclass(frozen=True)
class BanditState:
    bytes: bytes
    source_id: int
    offset: int


@dataclass
class EnergyDecision:
    state: BanditState
    action_index: int
    base_energy: int
    final_energy: int
    interesting: int = 0
    total: int = 0
    reward: float = 0.0
    explored: bool = False

    @property
    def multiplier(self) -> float:
        return ACTIONS[self.action_index]


class Executor(Protocol):
    """What :func:`fuzz_one` needs from the campaign."""

    rng: random.Random
    queue: Queue

    def execute(self, data: bytes, parent: TestCase) -> bool:
        """Run one mutant; True if it was enqueued as interesting."""


def _speed_factor(exec_us: float, avg: float) -> float:
    if exec_us * 4 <= avg:
        return 3.0
    if exec_us * 2 <= avg:
        return 2.0
    if exec_us <= avg:
        return 1.5
    if exec_us <= 2 * avg:
        return 1.0
    if exec_us <= 5 * avg:
        return 0.5
    return 0.1


def _bitmap_factor(size: float, avg: float) -> float:
    if size >= 2 * avg:
        return 3.0
    if size >= 1.5 * avg:
        return 2.0
    if size >= avg:
        return 1.5
    return 1.0


def _depth_factor(depth: int) -> int:
    if depth <= 3:
        return 1
    if depth <= 7:
        return 2
    if depth <= 13:
        return 3
    if depth <= 25:
        return 4
    return 5


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def performance_score(tc: TestCase, avg_exec_us: float, avg_bitmap_size: float) -> int:
    """Heuristic havoc energy from speed, coverage and depth relative to campaign averages."""
    if not (avg_exec_us > 0 and avg_bitmap_size > 0):
        raise ValueError("campaign averages must be positive")
    score = 100.0 * _speed_factor(tc.exec_us, avg_exec_us) \
        * _bitmap_factor(tc.bitmap_size, avg_bitmap_size) * _depth_factor(tc.depth)
    return min(MAX_PERF_SCORE, max(MIN_PERF_SCORE, round_half_away(score)))


def extract_state(tc: TestCase, rng: random.Random) -> BanditState:
    """128 bytes from a uniformly random offset, zero-padded past the end of the input."""
    n = len(tc.data)
    if n == 0:
        return BanditState(bytes(WINDOW_LEN), tc.id, 0)
    offset = rng.randrange(n)
    chunk = tc.data[offset:offset + WINDOW_LEN]
    return BanditState(chunk + bytes(WINDOW_LEN - len(chunk)), tc.id, offset)


def select_action(state: BanditState, model, epsilon: float, rng: random.Random) -> tuple[int, bool]:
    """Epsilon-greedy: uniform action with probability epsilon, else the policy's argmax."""
    if rng.random() < epsilon:
        return rng.randrange(len(ACTIONS)), True
    probs, _ = model.forward(encode(state.bytes))
    return int(np.argmax(probs)), False


def scaled_energy(base_energy: int, action_index: int) -> int:
    return max(1, round_half_away(base_energy * ACTIONS[action_index]))


def compute_reward(interesting: int, total: int) -> float:
    if total < 1 or not 0 <= interesting <= total:
        raise ValueError(f"bad episode counters {interesting}/{total}")
    return interesting / total


def _whole_input_havoc(tc: TestCase, energy: int, fx: Executor) -> None:
    rng = fx.rng
    n_splice = int(energy * SPLICE_SHARE) if len(fx.queue) > 1 else 0
    base = tc.data
    for i in range(energy):
        if i == energy - n_splice:
            other = fx.queue.entries[rng.randrange(len(fx.queue))]
            spliced = splice(tc.data, other.data, rng) if other is not tc else None
            if spliced is not None:
                base = spliced
        buf = MutationBuffer(bytearray(base))
        havoc_step(buf, rng)
        fx.execute(bytes(buf.data), tc)


def fuzz_one(tc: TestCase, config: SchedulerConfig, model, fx: Executor) -> EnergyDecision | None:
    """Spend ``tc``'s energy. Returns the bandit episode, or None for whole-input rounds."""
    q = fx.queue
    base_energy = performance_score(tc, q.avg_exec_us, q.avg_bitmap_size)

    if config.mode is Mode.BASELINE:
        if config.deterministic_enabled and not tc.was_fuzzed:
            deterministic_stage(tc.data, lambda d: fx.execute(d, tc))
        _whole_input_havoc(tc, base_energy, fx)
        return None

    rng = fx.rng
    if rng.random() < config.fuzzing_prob:
        _whole_input_havoc(tc, base_energy, fx)
        return None

    state = extract_state(tc, rng)
    action, explored = select_action(state, model, config.epsilon, rng)
    energy = scaled_energy(base_energy, action)
    decision = EnergyDecision(state, action, base_energy, energy, explored=explored)

    interesting = total = 0
    window = (state.offset, WINDOW_LEN)
    for _ in range(energy):
        buf = MutationBuffer(bytearray(tc.data), window)
        if buf.data:
            havoc_step(buf, rng)
        if fx.execute(bytes(buf.data), tc):
            interesting += 1
        total += 1

    if config.mode is Mode.TRAIN:
        decision.interesting = interesting
        decision.total = total
        decision.reward = compute_reward(interesting, total)
        model.update(encode(state.bytes), action, decision.reward)
    return decision
