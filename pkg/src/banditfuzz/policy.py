"""Recurrent energy-multiplier policy.

A byte window is unrolled into a ``(T, 8)`` bit matrix (MSB first), run through a
single-layer LSTM, and the final hidden state is mapped by a dense softmax head to
a distribution over the five multipliers. Training is plain REINFORCE: one SGD step
on ``-log(pi[a]) * reward`` per observed bandit episode.

The estimator follows scikit-learn conventions: hyper-parameters in ``__init__``,
learned state in trailing-underscore attributes, ``fit``/``partial_fit`` for
training and ``predict``/``predict_proba`` for inference. ``X`` is always a 2-D
array of byte values, one window per row.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

log = logging.getLogger(__name__)

INPUT_SIZE = 8
HIDDEN_SIZE = 100
N_ACTIONS = 5
LOG_EPS = 1e-12

MODEL_MAGIC = b"BFZM"
MODEL_VERSION = 1


def encode(state) -> np.ndarray:
    """Bit matrix of a byte window: row i holds byte i, most significant bit first."""
    arr = np.frombuffer(bytes(state), dtype=np.uint8) if isinstance(state, (bytes, bytearray)) \
        else np.asarray(state, dtype=np.uint8)
    return np.unpackbits(arr[:, None], axis=1).astype(np.float64)


def _check_windows(X) -> np.ndarray:
    if isinstance(X, (bytes, bytearray)):
        X = [X]
    if len(X) and isinstance(X[0], (bytes, bytearray)):
        X = np.array([np.frombuffer(bytes(x), dtype=np.uint8) for x in X])
    X = check_array(X, dtype=None, ensure_min_features=1)
    if X.dtype != np.uint8:
        if np.any((X < 0) | (X > 255)) or np.any(X != np.round(X)):
            raise ValueError("windows must hold byte values in 0..255")
        X = X.astype(np.uint8)
    return X


class ByteWindowEncoder(TransformerMixin, BaseEstimator):
    """Stateless transformer from ``(n, T)`` byte windows to ``(n, T, 8)`` bit tensors."""

    def fit(self, X, y=None):
        X = _check_windows(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = _check_windows(X)
        return np.unpackbits(X[:, :, None], axis=2).astype(np.float64)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LSTMPolicy(ClassifierMixin, BaseEstimator):
    """LSTM + softmax policy over energy multipliers.

    Parameters
    ----------
    hidden_size : int
        Recurrent units.
    n_actions : int
        Size of the action space.
    learning_rate : float
        SGD step size.
    grad_clip : float or None
        Global gradient-norm ceiling; clipped steps are counted in ``n_clipped_``.
    random_state : int, numpy Generator or None
        Seed for parameter initialisation.
    """

    def __init__(self, hidden_size=HIDDEN_SIZE, n_actions=N_ACTIONS, learning_rate=0.001,
                 grad_clip=5.0, random_state=None):
        self.hidden_size = hidden_size
        self.n_actions = n_actions
        self.learning_rate = learning_rate
        self.grad_clip = grad_clip
        self.random_state = random_state

    # -- parameters ---------------------------------------------------------------

    def initialize(self):
        """Draw fresh parameters. LSTM weights U(+-1/sqrt(H)), head weights U(+-0.05),
        zero biases except the forget gate (1.0)."""
        rng = np.random.default_rng(self.random_state)
        H, D, A = self.hidden_size, INPUT_SIZE, self.n_actions
        s = 1.0 / np.sqrt(H)
        self.W_ = rng.uniform(-s, s, size=(4 * H, D))
        self.U_ = rng.uniform(-s, s, size=(4 * H, H))
        self.b_ = np.zeros(4 * H)
        self.b_[H:2 * H] = 1.0
        self.V_ = rng.uniform(-0.05, 0.05, size=(H, A))
        self.c_ = np.zeros(A)
        self.update_count_ = 0
        self.n_clipped_ = 0
        self.classes_ = np.arange(A)
        return self

    def _params(self):
        return [self.W_, self.U_, self.b_, self.V_, self.c_]

    # -- forward / backward -------------------------------------------------------

    def forward(self, m: np.ndarray):
        """Action probabilities for one encoded ``(T, 8)`` matrix, plus the BPTT cache."""
        H = self.hidden_size
        T = m.shape[0]
        xw = m @ self.W_.T + self.b_
        U = self.U_
        gates = np.empty((T, 4 * H))
        cs = np.zeros((T + 1, H))
        hs = np.zeros((T + 1, H))
        h = hs[0]
        c = cs[0]
        for t in range(T):
            z = xw[t] + U @ h
            a = gates[t]
            a[:2 * H] = _sigmoid(z[:2 * H])
            a[2 * H:3 * H] = np.tanh(z[2 * H:3 * H])
            a[3 * H:] = _sigmoid(z[3 * H:])
            c = a[H:2 * H] * c + a[:H] * a[2 * H:3 * H]
            h = a[3 * H:] * np.tanh(c)
            cs[t + 1] = c
            hs[t + 1] = h
        logits = h @ self.V_ + self.c_
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError(
                f"non-finite activations in policy forward pass (after {self.update_count_} updates)")
        e = np.exp(logits - logits.max())
        probs = e / e.sum()
        return probs, (m, gates, cs, hs, logits, probs)

    def loss_and_gradients(self, m, action: int, reward: float):
        """``-log(pi[action] + 1e-12) * reward`` and its gradients w.r.t. W, U, b, V, c."""
        probs, (x, gates, cs, hs, _, _) = self.forward(m)
        H = self.hidden_size
        T = x.shape[0]
        pa = probs[action]
        loss = -np.log(pa + LOG_EPS) * reward

        onehot = np.zeros(self.n_actions)
        onehot[action] = 1.0
        dlogits = -reward * pa / (pa + LOG_EPS) * (onehot - probs)
        dV = np.outer(hs[T], dlogits)
        dc_head = dlogits
        dh = self.V_ @ dlogits
        dcell = np.zeros(H)
        dz = np.empty((T, 4 * H))
        UT = self.U_.T
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, g, o = a[:H], a[H:2 * H], a[2 * H:3 * H], a[3 * H:]
            tc = np.tanh(cs[t + 1])
            dct = dcell + dh * o * (1.0 - tc * tc)
            d = dz[t]
            d[:H] = dct * g * i * (1.0 - i)
            d[H:2 * H] = dct * cs[t] * f * (1.0 - f)
            d[2 * H:3 * H] = dct * i * (1.0 - g * g)
            d[3 * H:] = dh * tc * o * (1.0 - o)
            dcell = dct * f
            dh = UT @ d
        dW = dz.T @ x
        dU = dz.T @ hs[:T]
        db = dz.sum(axis=0)
        return loss, [dW, dU, db, dV, dc_head]

    def update(self, m, action: int, reward: float) -> float:
        """One REINFORCE SGD step on a single encoded episode; returns the loss."""
        check_is_fitted(self, "W_")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action index {action} out of range")
        if reward == 0:
            self.update_count_ += 1
            return 0.0
        loss, grads = self.loss_and_gradients(m, action, reward)
        if not (np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads)):
            log.warning("skipping policy update %d: non-finite gradient", self.update_count_)
            return float(loss)
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.grad_clip:
                self.n_clipped_ += 1
                scale = self.grad_clip / norm
                grads = [g * scale for g in grads]
        lr = self.learning_rate
        for p, g in zip(self._params(), grads):
            p -= lr * g
        self.update_count_ += 1
        return float(loss)

    # -- estimator API --------------------------------------------------------------

    def partial_fit(self, X, y, sample_weight=None):
        """One SGD step per row: window ``X[k]``, action ``y[k]``, reward ``sample_weight[k]``."""
        X = _check_windows(X)
        y = np.asarray(y, dtype=int)
        if y.shape != (X.shape[0],):
            raise ValueError("y must hold one action index per window")
        rewards = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, float)
        if np.any((rewards < 0) | (rewards > 1)):
            raise ValueError("rewards must lie in [0, 1]")
        if not hasattr(self, "W_"):
            self.initialize()
        for row, a, r in zip(X, y, rewards):
            self.update(encode(row), int(a), float(r))
        return self

    def fit(self, X, y, sample_weight=None):
        self.initialize()
        return self.partial_fit(X, y, sample_weight)

    def predict_proba(self, X):
        check_is_fitted(self, "W_")
        X = _check_windows(X)
        return np.array([self.forward(encode(row))[0] for row in X])

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


# -- persistence ------------------------------------------------------------------


class ModelFormatError(ValueError):
    pass


def save(model: LSTMPolicy, path) -> None:
    """Write the binary model file: magic, version, dims, float64 tensors, update count.

    Tensor order: input weights (4H x 8), recurrent weights (4H x H), gate biases (4H),
    head weights (H x A), head bias (A); gate blocks ordered input, forget, cell,
    output; everything row-major little-endian.
    """
    check_is_fitted(model, "W_")
    if not all(np.all(np.isfinite(p)) for p in model._params()):
        raise ValueError("refusing to save a model with non-finite parameters")
    parts = [MODEL_MAGIC, struct.pack("<4I", MODEL_VERSION, INPUT_SIZE, model.hidden_size,
                                      model.n_actions)]
    parts += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model._params()]
    parts.append(struct.pack("<Q", model.update_count_))
    Path(path).write_bytes(b"".join(parts))


def load(path, hidden_size: int | None = HIDDEN_SIZE, learning_rate: float = 0.001,
         grad_clip: float | None = 5.0) -> LSTMPolicy:
    """Read a model file. ``hidden_size=None`` accepts any recurrent width."""
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ModelFormatError(f"{path}: unexpected end of model file")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic (not a model file)")
    (version,) = struct.unpack("<I", take(4))
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    d, h, a = struct.unpack("<3I", take(12))
    if d != INPUT_SIZE:
        raise ModelFormatError(f"{path}: dimension mismatch: input={d} (expected {INPUT_SIZE})")
    if hidden_size is not None and h != hidden_size:
        raise ModelFormatError(f"{path}: dimension mismatch: hidden={h} (expected {hidden_size})")
    if a != N_ACTIONS:
        raise ModelFormatError(f"{path}: dimension mismatch: actions={a} (expected {N_ACTIONS})")

    def tensor(*shape):
        n = int(np.prod(shape))
        return np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    model = LSTMPolicy(hidden_size=h, n_actions=a, learning_rate=learning_rate, grad_clip=grad_clip)
    model.W_ = tensor(4 * h, d)
    model.U_ = tensor(4 * h, h)
    model.b_ = tensor(4 * h)
    model.V_ = tensor(h, a)
    model.c_ = tensor(a)
    (model.update_count_,) = struct.unpack("<Q", take(8))
    if pos != len(blob):
        raise ModelFormatError(f"{path}: trailing data after model")
    model.n_clipped_ = 0
    model.classes_ = np.arange(a)
    return model
