"""
Small feedforward networks with hand-written backpropagation.

Hidden layers use ReLU; the output layer is sigmoid, softmax or identity.
Everything is plain numpy and deterministic for a given seed.

Within a fixed ReLU activation pattern a network is affine in its input,
which :func:`region_weights` exposes explicitly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ContractError, DivergenceError

ACTIVATIONS = ("relu", "sigmoid", "softmax", "identity")
OUTPUT_ACTIVATIONS = ("sigmoid", "softmax", "identity")
LOSSES = ("bce", "ce")

PROB_CLIP = 1e-12


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "softmax":
        return softmax(z)
    return z


@dataclass
class DenseLayer:
    """Affine map ``W @ x + b`` followed by an activation."""

    weights: np.ndarray
    biases: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float, ndmin=2)
        self.biases = np.array(self.biases, dtype=float).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.weights.shape[0] != self.biases.shape[0]:
            raise ContractError(
                f"weights {self.weights.shape} inconsistent with biases {self.biases.shape}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ContractError("layer parameters must be finite")

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]

    def copy(self):
        return DenseLayer(self.weights.copy(), self.biases.copy(), self.activation)


@dataclass
class FeedforwardNet:
    """A stack of :class:`DenseLayer` objects.

    Hidden layers must be ReLU and the last layer sigmoid, softmax or identity.
    """

    layers: list
    input_dim: int = field(default=None)

    def __post_init__(self):
        if not self.layers:
            raise ContractError("network needs at least one layer")
        if self.input_dim is None:
            self.input_dim = self.layers[0].n_in
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.n_in != prev:
                raise ContractError(
                    f"layer {i} expects {layer.n_in} inputs, previous layer gives {prev}"
                )
            prev = layer.n_out
        for layer in self.layers[:-1]:
            if layer.activation != "relu":
                raise ContractError("hidden layers must use relu")
        if self.layers[-1].activation not in OUTPUT_ACTIVATIONS:
            raise ContractError("output layer must be sigmoid, softmax or identity")

    @property
    def output_dim(self):
        return self.layers[-1].n_out

    @property
    def hidden_sizes(self):
        return [layer.n_out for layer in self.layers[:-1]]

    @property
    def n_hidden_units(self):
        return int(sum(self.hidden_sizes))

    @property
    def output_activation(self):
        return self.layers[-1].activation

    def copy(self):
        return FeedforwardNet([layer.copy() for layer in self.layers], self.input_dim)

    def _check_input(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ContractError(
                f"expected inputs of dimension {self.input_dim}, got shape {X.shape}"
            )
        if not np.all(np.isfinite(X)):
            raise ContractError("inputs must be finite")
        return X

    def forward_batch(self, X):
        """Run a batch through the net.

        Returns ``(outputs, logits, hidden)`` where ``hidden`` lists the
        pre-activations of every hidden layer.
        """
        A = self._check_input(X)
        hidden = []
        for layer in self.layers[:-1]:
            Z = A @ layer.weights.T + layer.biases
            hidden.append(Z)
            A = np.maximum(Z, 0.0)
        last = self.layers[-1]
        logits = A @ last.weights.T + last.biases
        return _activate(logits, last.activation), logits, hidden

    def predict(self, X):
        return self.forward_batch(X)[0]

    def logits(self, X):
        return self.forward_batch(X)[1]

    def hidden_representation(self, X):
        """Post-ReLU activations of the last hidden layer (inputs if there is none)."""
        _, _, hidden = self.forward_batch(X)
        if not hidden:
            return self._check_input(X)
        return np.maximum(hidden[-1], 0.0)

    def patterns(self, X):
        """Boolean activation patterns, one row per input; zero counts as inactive."""
        _, _, hidden = self.forward_batch(X)
        if not hidden:
            return np.zeros((np.atleast_2d(X).shape[0], 0), dtype=bool)
        return np.concatenate([Z > 0 for Z in hidden], axis=1)

    # serialization

    def to_dict(self):
        return {
            "input_dim": int(self.input_dim),
            "layers": [
                {
                    "rows": int(layer.n_out),
                    "cols": int(layer.n_in),
                    "weights": [float(v) for v in layer.weights.ravel()],
                    "biases": [float(v) for v in layer.biases],
                    "activation": layer.activation,
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data):
        layers = []
        for entry in data["layers"]:
            w = np.asarray(entry["weights"], dtype=float)
            if w.size != entry["rows"] * entry["cols"]:
                raise ContractError("weight list length does not match rows*cols")
            layers.append(
                DenseLayer(w.reshape(entry["rows"], entry["cols"]), entry["biases"], entry["activation"])
            )
        return cls(layers, int(data["input_dim"]))

    def to_json(self):
        # float repr is the shortest string that round-trips exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 1000
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0
    target_loss: float = 0.0

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ContractError("learning_rate must be positive")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ContractError("epochs must be a positive integer")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ContractError("batch_size must be a positive integer")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must be in [0, 1)")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ContractError("seed must be a 64-bit unsigned integer")
        if not self.target_loss >= 0:
            raise ContractError("target_loss must be nonnegative")

    def to_dict(self):
        return {
            "learning_rate": self.learning_rate,
            "epochs": int(self.epochs),
            "batch_size": int(self.batch_size),
            "momentum": self.momentum,
            "seed": int(self.seed),
            "target_loss": self.target_loss,
        }


def init_net(input_dim: int, hidden: Sequence[int], output_dim: int,
             output_activation: str = "sigmoid", seed: int = 0) -> FeedforwardNet:
    """Glorot-uniform initialised network with zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [int(input_dim), *[int(h) for h in hidden], int(output_dim)]
    if any(s < 1 for s in sizes):
        raise ContractError(f"layer sizes must be positive, got {sizes}")
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = math.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        act = output_activation if i == len(sizes) - 2 else "relu"
        layers.append(DenseLayer(w, np.zeros(n_out), act))
    return FeedforwardNet(layers, sizes[0])


def zero_net(input_dim, hidden, output_dim, output_activation="sigmoid"):
    sizes = [int(input_dim), *[int(h) for h in hidden], int(output_dim)]
    layers = [
        DenseLayer(np.zeros((o, i)), np.zeros(o),
                   output_activation if k == len(sizes) - 2 else "relu")
        for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:]))
    ]
    return FeedforwardNet(layers, sizes[0])


def forward(net: FeedforwardNet, x):
    """Single-vector forward pass returning ``(output, pattern, logit)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ContractError("forward expects a single vector; use forward_batch for batches")
    out, logit, hidden = net.forward_batch(x)
    if hidden:
        pattern = np.concatenate([Z[0] > 0 for Z in hidden])
    else:
        pattern = np.zeros(0, dtype=bool)
    return out[0], pattern, logit[0]


def region_weights(net: FeedforwardNet, pattern, cls: int = 0):
    """Affine form ``(W, b)`` of logit ``cls`` on the region with ``pattern``.

    For every input whose activation pattern equals ``pattern``,
    ``logit[cls] == W @ x + b``.
    """
    pattern = np.asarray(pattern, dtype=bool).ravel()
    if pattern.size != net.n_hidden_units:
        raise ContractError(
            f"pattern has {pattern.size} bits, network has {net.n_hidden_units} hidden units"
        )
    if not 0 <= cls < net.output_dim:
        raise ContractError(f"class index {cls} out of range")
    A = np.eye(net.input_dim)
    c = np.zeros(net.input_dim)
    offset = 0
    for layer in net.layers[:-1]:
        mask = pattern[offset:offset + layer.n_out].astype(float)
        offset += layer.n_out
        A = mask[:, None] * (layer.weights @ A)
        c = mask * (layer.weights @ c + layer.biases)
    last = net.layers[-1]
    return last.weights[cls] @ A, float(last.weights[cls] @ c + last.biases[cls])


def loss_value(net, X, T, loss="bce"):
    out, _, _ = net.forward_batch(X)
    return _loss(out, np.asarray(T, dtype=float).reshape(out.shape), loss)


def _loss(out, T, loss):
    p = np.clip(out, PROB_CLIP, 1.0 - PROB_CLIP)
    if loss == "bce":
        per = -(T * np.log(p) + (1.0 - T) * np.log(1.0 - p)).sum(axis=1)
    else:
        per = -(T * np.log(p)).sum(axis=1)
    return float(per.mean())


def _check_loss(net, loss):
    if loss not in LOSSES:
        raise ContractError(f"unknown loss {loss!r}")
    act = net.output_activation
    if loss == "bce" and act != "sigmoid":
        raise ContractError("bce loss requires a sigmoid output layer")
    if loss == "ce" and act != "softmax":
        raise ContractError("ce loss requires a softmax output layer")


def loss_and_gradients(net: FeedforwardNet, X, T, loss="bce"):
    """Mean loss over the batch and its gradient for every layer.

    Returns ``(loss, [(dW, db), ...])`` in layer order.
    """
    _check_loss(net, loss)
    X = net._check_input(X)
    out, _, hidden = net.forward_batch(X)
    T = np.asarray(T, dtype=float).reshape(out.shape)
    n = X.shape[0]
    value = _loss(out, T, loss)

    # sigmoid+bce and softmax+ce share the same logit gradient
    delta = (out - T) / n
    acts = [X] + [np.maximum(Z, 0.0) for Z in hidden]
    grads = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        grads.append((delta.T @ acts[i], delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ layer.weights) * (hidden[i - 1] > 0)
    grads.reverse()
    return value, grads


def train(net: FeedforwardNet, X, T, loss="bce", cfg: TrainConfig | None = None):
    """Mini-batch gradient descent with momentum.

    The input network is left untouched; a trained copy is returned together
    with the loss history (entry 0 is the loss before any update, then one
    entry per epoch on the full data). Training stops after ``cfg.epochs``
    or once the loss drops to ``cfg.target_loss``.
    """
    cfg = cfg or TrainConfig()
    _check_loss(net, loss)
    X = net._check_input(X)
    T = np.asarray(T, dtype=float).reshape(X.shape[0], net.output_dim)
    if np.any(T < 0) or np.any(T > 1):
        raise ContractError("targets must lie in [0, 1]")

    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity = [(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in net.layers]
    n = X.shape[0]
    bs = min(int(cfg.batch_size), n)

    history = [loss_value(net, X, T, loss)]
    if not math.isfinite(history[0]):
        raise DivergenceError(0, history[0])
    if history[0] <= cfg.target_loss:
        return net, history

    for epoch in range(1, int(cfg.epochs) + 1):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, grads = loss_and_gradients(net, X[idx], T[idx], loss)
            for layer, (vw, vb), (gw, gb) in zip(net.layers, velocity, grads):
                vw *= cfg.momentum
                vw -= cfg.learning_rate * gw
                vb *= cfg.momentum
                vb -= cfg.learning_rate * gb
                layer.weights += vw
                layer.biases += vb
        current = loss_value(net, X, T, loss)
        if not math.isfinite(current) or not all(
            np.all(np.isfinite(l.weights)) for l in net.layers
        ):
            raise DivergenceError(epoch, current)
        history.append(current)
        if current <= cfg.target_loss:
            break
    return net, history
