"""Dense feed-forward networks over flat weight vectors.

A network is its architecture plus one flat float64 weight vector in
canonical ascending (layer, cell, edge) order, 0-based. There are no
biases anywhere. Hidden layers may apply an activation; the output
layer never does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Input or weight vector does not match the architecture."""


class DivergenceError(RuntimeError):
    """A gradient or weight vector went non-finite."""


class Activation(Enum):
    LINEAR = "linear"
    GELU = "gelu"


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    """Analytic derivative of the exact GELU: Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.GELU:
        return gelu(z)
    return z


def _activate_grad(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.GELU:
        return gelu_grad(z)
    return np.ones_like(z)


class Position(NamedTuple):
    """0-based (layer, cell, edge) coordinates of one weight."""

    layer: int
    cell: int
    edge: int


@dataclass(frozen=True)
class NetworkArchitecture:
    """Layer widths plus the hidden-layer activation. Bias-free."""

    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.LINEAR

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ShapeError("need at least an input and an output layer")
        if any(s <= 0 for s in self.layer_sizes):
            raise ShapeError(f"layer sizes must be positive: {self.layer_sizes}")

    @property
    def num_weight_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def weight_count(self) -> int:
        sizes = self.layer_sizes
        return sum(sizes[l] * sizes[l + 1] for l in range(len(sizes) - 1))

    def layer_shape(self, layer: int) -> tuple[int, int]:
        """(cells, edges) of weight layer `layer`, i.e. (fan_out, fan_in)."""
        return self.layer_sizes[layer + 1], self.layer_sizes[layer]

    def layer_offsets(self) -> list[int]:
        """Flat-index offset of each weight layer, plus the total at the end."""
        offs = [0]
        for l in range(self.num_weight_layers):
            out, inp = self.layer_shape(l)
            offs.append(offs[-1] + out * inp)
        return offs


def position_of(arch: NetworkArchitecture, i: int) -> Position:
    """Inverse of the canonical flat ordering."""
    if not 0 <= i < arch.weight_count:
        raise IndexError(f"weight index {i} out of range for {arch.weight_count} weights")
    rest = i
    for layer in range(arch.num_weight_layers):
        out, inp = arch.layer_shape(layer)
        n = out * inp
        if rest < n:
            return Position(layer, rest // inp, rest % inp)
        rest -= n
    raise AssertionError("unreachable")


def flat_index(arch: NetworkArchitecture, pos: Position) -> int:
    """Canonical flat index of a (layer, cell, edge) position."""
    out, inp = arch.layer_shape(pos.layer)
    if not (0 <= pos.cell < out and 0 <= pos.edge < inp):
        raise IndexError(f"position {pos} invalid for layer shape {(out, inp)}")
    return arch.layer_offsets()[pos.layer] + pos.cell * inp + pos.edge


def all_positions(arch: NetworkArchitecture) -> np.ndarray:
    """(weight_count, 3) array of (layer, cell, edge) rows in flat order."""
    rows = np.empty((arch.weight_count, 3), dtype=np.float64)
    i = 0
    for layer in range(arch.num_weight_layers):
        out, inp = arch.layer_shape(layer)
        for cell in range(out):
            for edge in range(inp):
                rows[i] = (layer, cell, edge)
                i += 1
    return rows


@dataclass
class Network:
    """Architecture plus flat weights; `diverged` flags non-finite results."""

    arch: NetworkArchitecture
    weights: np.ndarray
    diverged: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.arch.weight_count,):
            raise ShapeError(
                f"expected {self.arch.weight_count} weights, got shape {self.weights.shape}"
            )

    def layer_matrices(self) -> list[np.ndarray]:
        """Per-layer (cells, edges) views into the flat vector."""
        offs = self.arch.layer_offsets()
        return [
            self.weights[offs[l] : offs[l + 1]].reshape(self.arch.layer_shape(l))
            for l in range(self.arch.num_weight_layers)
        ]

    def copy(self) -> "Network":
        return Network(self.arch, self.weights.copy(), self.diverged)


def init_weights(arch: NetworkArchitecture, rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-sqrt(1/fan_in) per layer."""
    parts = []
    for l in range(arch.num_weight_layers):
        out, inp = arch.layer_shape(l)
        bound = math.sqrt(1.0 / inp)
        parts.append(rng.uniform(-bound, bound, size=out * inp))
    return np.concatenate(parts)


def new_network(arch: NetworkArchitecture, rng: np.random.Generator) -> Network:
    return Network(arch, init_weights(arch, rng))


def forward_batch(net: Network, xs: np.ndarray) -> np.ndarray:
    """Evaluate a (batch, inputs) matrix to a (batch, outputs) matrix."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != net.arch.layer_sizes[0]:
        raise ShapeError(
            f"expected inputs of size {net.arch.layer_sizes[0]}, got shape {xs.shape}"
        )
    a = xs
    mats = net.layer_matrices()
    last = len(mats) - 1
    for l, w in enumerate(mats):
        z = a @ w.T
        a = _activate(z, net.arch.activation) if l < last else z
    return a


def forward(net: Network, x: Sequence[float]) -> np.ndarray:
    """Single-input forward pass; returns the output vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a flat input vector, got shape {x.shape}")
    return forward_batch(net, x[None, :])[0]


def _stack_batch(net: Network, batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2:
        xs, ys = batch
    else:
        pairs = list(batch)
        if not pairs:
            raise ValueError("empty batch")
        xs = [p[0] for p in pairs]
        ys = [p[1] for p in pairs]
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    if len(xs) == 0:
        raise ValueError("empty batch")
    if xs.shape[1] != net.arch.layer_sizes[0] or ys.shape[1] != net.arch.layer_sizes[-1]:
        raise ShapeError(f"batch shapes {xs.shape}/{ys.shape} do not match architecture")
    return xs, ys


def mse_loss(net: Network, batch) -> float:
    xs, ys = _stack_batch(net, batch)
    out = forward_batch(net, xs)
    return float(np.mean((out - ys) ** 2))


def gradient(net: Network, batch) -> np.ndarray:
    """d(mean squared error)/d(weights), flat, canonical order.

    The MSE is the mean over every (sample, output component) entry.
    """
    xs, ys = _stack_batch(net, batch)
    mats = net.layer_matrices()
    last = len(mats) - 1

    acts = [xs]  # post-activation value entering each layer
    zs: list[np.ndarray] = []
    a = xs
    for l, w in enumerate(mats):
        z = a @ w.T
        zs.append(z)
        a = _activate(z, net.arch.activation) if l < last else z
        acts.append(a)

    out = acts[-1]
    g = 2.0 * (out - ys) / out.size  # dL/d(output)
    grads = [np.empty(0)] * len(mats)
    for l in range(last, -1, -1):
        dz = g if l == last else g * _activate_grad(zs[l], net.arch.activation)
        grads[l] = dz.T @ acts[l]
        if l > 0:
            g = dz @ mats[l]
    return np.concatenate([gw.ravel() for gw in grads])


@dataclass
class OptimizerState:
    """Classical (Polyak) momentum SGD state."""

    learning_rate: float
    momentum: float
    velocity: np.ndarray

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.velocity = np.asarray(self.velocity, dtype=np.float64)

    @classmethod
    def fresh(cls, learning_rate: float, momentum: float, n: int) -> "OptimizerState":
        return cls(learning_rate, momentum, np.zeros(n))


def sgd_step(net: Network, grad: np.ndarray, state: OptimizerState) -> tuple[Network, OptimizerState]:
    """velocity <- momentum*velocity + grad; weights <- weights - lr*velocity."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.weights.shape or state.velocity.shape != net.weights.shape:
        raise ShapeError("gradient/velocity length does not match weights")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    velocity = state.momentum * state.velocity + grad
    weights = net.weights - state.learning_rate * velocity
    return (
        Network(net.arch, weights),
        OptimizerState(state.learning_rate, state.momentum, velocity),
    )
