import random

import numpy as np
import pytest

from banditfuzz.corpus import Queue
from banditfuzz.coverage import MAP_SIZE, classify_counts


def make_trace(*edges, count=1):
    raw = np.zeros(MAP_SIZE, dtype=np.uint8)
    raw[list(edges)] = count
    return classify_counts(raw)


class FixedModel:
    """Policy stand-in with constant probabilities; records updates."""

    def __init__(self, probs=(0.1, 0.1, 0.1, 0.6, 0.1)):
        self.probs = np.asarray(probs, dtype=float)
        self.updates = []

    def forward(self, m):
        assert m.shape == (128, 8)
        return self.probs, None

    def update(self, m, action, reward):
        self.updates.append((m.copy(), action, reward))
        return 0.0


class StubExecutor:
    """Campaign stand-in: records every executed mutant, declares some interesting."""

    def __init__(self, seed=0, data=b"seed-data" * 4, interesting=lambda d: False):
        self.rng = random.Random(seed)
        self.queue = Queue()
        self.tc = self.queue.add(data, 100, make_trace(1, 2))
        self.interesting = interesting
        self.executed = []

    def execute(self, data, parent):
        self.executed.append(data)
        return bool(self.interesting(data))


@pytest.fixture
def stub():
    return StubExecutor()
