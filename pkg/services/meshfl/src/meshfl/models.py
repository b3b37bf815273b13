"""Small classifiers trained by the workers, on flat float64 weight vectors."""

from __future__ import annotations

from typing import Protocol

import numpy as np

from .errors import ConfigError

LOGISTIC = "logistic"
MLP = "mlp"
SYNTHETIC_PAYLOAD = "synthetic-payload"
MODEL_KINDS = (LOGISTIC, MLP, SYNTHETIC_PAYLOAD)


class Model(Protocol):
    dim: int

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float: ...

    def gradient(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def predict(self, w: np.ndarray, X: np.ndarray) -> np.ndarray: ...

    def init_weights(self, rng: np.random.Generator) -> np.ndarray: ...


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _cross_entropy(log_probs: np.ndarray, y: np.ndarray) -> float:
    return float(-log_probs[np.arange(len(y)), y].mean())


def _output_delta(log_probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    delta = np.exp(log_probs)
    delta[np.arange(len(y)), y] -= 1.0
    return delta / len(y)


class SoftmaxRegression:
    """Multinomial logistic regression; weights are W (d×C) then b (C)."""

    def __init__(self, d: int, n_classes: int):
        self.d = d
        self.n_classes = n_classes
        self.dim = d * n_classes + n_classes

    def _unpack(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        split = self.d * self.n_classes
        return w[:split].reshape(self.d, self.n_classes), w[split:]

    def logits(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        W, b = self._unpack(w)
        return X @ W + b

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        return _cross_entropy(_log_softmax(self.logits(w, X)), y)

    def gradient(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        delta = _output_delta(_log_softmax(self.logits(w, X)), y)
        return np.concatenate([(X.T @ delta).ravel(), delta.sum(axis=0)])

    def predict(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        return self.logits(w, X).argmax(axis=1)

    def init_weights(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, 0.01, self.dim)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


class TwoLayerPerceptron:
    """One hidden softplus layer; weights are W1, b1, W2, b2 flattened in that order."""

    def __init__(self, d: int, n_classes: int, hidden: int = 32):
        if hidden < 1:
            raise ConfigError("hidden must be at least 1")
        self.d = d
        self.n_classes = n_classes
        self.hidden = hidden
        self._shapes = [(d, hidden), (hidden,), (hidden, n_classes), (n_classes,)]
        self._sizes = [int(np.prod(s)) for s in self._shapes]
        self.dim = sum(self._sizes)

    def _unpack(self, w: np.ndarray) -> list[np.ndarray]:
        parts, offset = [], 0
        for shape, size in zip(self._shapes, self._sizes):
            parts.append(w[offset : offset + size].reshape(shape))
            offset += size
        return parts

    def _forward(self, w: np.ndarray, X: np.ndarray):
        W1, b1, W2, b2 = self._unpack(w)
        z1 = X @ W1 + b1
        a1 = _softplus(z1)
        return z1, a1, _log_softmax(a1 @ W2 + b2), W2

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        return _cross_entropy(self._forward(w, X)[2], y)

    def gradient(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        z1, a1, log_probs, W2 = self._forward(w, X)
        delta2 = _output_delta(log_probs, y)
        delta1 = (delta2 @ W2.T) * _sigmoid(z1)
        return np.concatenate(
            [(X.T @ delta1).ravel(), delta1.sum(axis=0), (a1.T @ delta2).ravel(), delta2.sum(axis=0)]
        )

    def predict(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        return self._forward(w, X)[2].argmax(axis=1)

    def init_weights(self, rng: np.random.Generator) -> np.ndarray:
        W1 = rng.normal(0.0, np.sqrt(2.0 / (self.d + self.hidden)), (self.d, self.hidden))
        W2 = rng.normal(0.0, np.sqrt(2.0 / (self.hidden + self.n_classes)), (self.hidden, self.n_classes))
        return np.concatenate([W1.ravel(), np.zeros(self.hidden), W2.ravel(), np.zeros(self.n_classes)])


def proximal_penalty(w: np.ndarray, w_global: np.ndarray, rho: float) -> float:
    diff = w - w_global
    return float(rho * diff @ diff)


def proximal_gradient(w: np.ndarray, w_global: np.ndarray, rho: float) -> np.ndarray:
    return 2.0 * rho * (w - w_global)


def build_model(kind: str, d: int, n_classes: int, hidden: int = 32) -> Model:
    if kind in (LOGISTIC, SYNTHETIC_PAYLOAD):
        return SoftmaxRegression(d, n_classes)
    if kind == MLP:
        return TwoLayerPerceptron(d, n_classes, hidden)
    raise ConfigError(f"Unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
