"""Particle networks: 5-input/1-output nets that learn to reproduce themselves.

A particle sees one weight at a time as (value, layer, cell, edge, 0) and is
trained to output that value back (self-replication). Feeding (0,0,0,0,x)
instead makes it act like a plain scalar weight on x. Particle internals are
strictly linear; any non-linearity lives at the organism's cell sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .net import (
    Activation,
    Network,
    NetworkArchitecture,
    OptimizerState,
    all_positions,
    forward,
    forward_batch,
    init_weights,
)

DEFAULT_PARTICLE_LAYERS = (5, 3, 3, 1)
DEFAULT_ZERO_THRESHOLD = 1e-6
DEFAULT_DIVERGE_THRESHOLD = 1e3


class ParticleType(Enum):
    SR = "sr"  # non-trivial self-replicator
    F = "f"  # serves only the shared task
    ZERO = "zero"  # trivial all-(near-)zero fixpoint
    DIVERGED = "diverged"


@dataclass(frozen=True)
class FixpointMargin:
    """Max per-weight drift allowed for a self-application to count as a fixpoint."""

    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class ParticleNetwork:
    net: Network

    def __post_init__(self):
        sizes = self.net.arch.layer_sizes
        if sizes[0] != 5 or sizes[-1] != 1:
            raise ValueError(f"particles map R^5 -> R, got layer sizes {sizes}")
        if self.net.arch.activation is not Activation.LINEAR:
            raise ValueError("particle internals must be linear")

    @property
    def weights(self) -> np.ndarray:
        return self.net.weights

    def copy(self) -> "ParticleNetwork":
        return ParticleNetwork(self.net.copy())


def particle_arch(layer_sizes=DEFAULT_PARTICLE_LAYERS) -> NetworkArchitecture:
    return NetworkArchitecture(tuple(layer_sizes), Activation.LINEAR)


def new_particle(rng: np.random.Generator, layer_sizes=DEFAULT_PARTICLE_LAYERS) -> ParticleNetwork:
    arch = particle_arch(layer_sizes)
    return ParticleNetwork(Network(arch, init_weights(arch, rng)))


def zero_particle(layer_sizes=DEFAULT_PARTICLE_LAYERS) -> ParticleNetwork:
    arch = particle_arch(layer_sizes)
    return ParticleNetwork(Network(arch, np.zeros(arch.weight_count)))


@lru_cache(maxsize=None)
def _replication_inputs_cached(layer_sizes: tuple[int, ...]) -> np.ndarray:
    arch = NetworkArchitecture(layer_sizes)
    inputs = np.zeros((arch.weight_count, 5))
    inputs[:, 1:4] = all_positions(arch)
    return inputs


def replication_inputs(arch: NetworkArchitecture) -> np.ndarray:
    """(weight_count, 5) rows (0, layer, cell, edge, 0); slot 0 takes the value."""
    return _replication_inputs_cached(arch.layer_sizes).copy()


def apply_replicative(n: ParticleNetwork, m) -> Network:
    """Feed every weight of m (with its position) through n; same architecture out."""
    target = m.net if isinstance(m, ParticleNetwork) else m
    inputs = replication_inputs(target.arch)
    inputs[:, 0] = target.weights
    out = forward_batch(n.net, inputs)[:, 0]
    diverged = not bool(np.all(np.isfinite(out)))
    if diverged:
        out = np.nan_to_num(out, nan=0.0, posinf=np.inf, neginf=-np.inf)
    return Network(target.arch, out, diverged=diverged)


def apply_auxiliary(n: ParticleNetwork, x: float) -> float:
    """Evaluate n at (0,0,0,0,x): the particle acting as a plain weight."""
    return float(forward(n.net, np.array([0.0, 0.0, 0.0, 0.0, float(x)]))[0])


def extract_weight(n: ParticleNetwork) -> float:
    """The scalar this (linear) particle multiplies its task input by."""
    return apply_auxiliary(n, 1.0)


def self_train_step(
    n: ParticleNetwork, opt: OptimizerState
) -> tuple[ParticleNetwork, OptimizerState, float]:
    """One pass of per-sample SGD toward reproducing the current weights.

    Targets and inputs are snapshotted at the start of the pass; the samples
    are visited in canonical weight order. Returns the mean squared
    replication error observed over the pass.
    """
    stack = ParticleStack(
        n.net.arch, n.weights[None, :].copy(), opt.learning_rate, opt.momentum,
        velocity=opt.velocity[None, :].copy(),
    )
    loss = stack.self_train_pass()[0]
    new_net = Network(n.net.arch, stack.weights[0].copy())
    new_opt = OptimizerState(opt.learning_rate, opt.momentum, stack.velocity[0].copy())
    return ParticleNetwork(new_net), new_opt, float(loss)


def is_eps_fixpoint(n: ParticleNetwork, margin: FixpointMargin = FixpointMargin()) -> bool:
    """True iff self-application moves no weight by epsilon or more."""
    applied = apply_replicative(n, n)
    if applied.diverged:
        return False
    return bool(np.max(np.abs(applied.weights - n.weights)) < margin.epsilon)


def classify(
    n: ParticleNetwork,
    margin: FixpointMargin = FixpointMargin(),
    zero_threshold: float = DEFAULT_ZERO_THRESHOLD,
    diverge_threshold: float = DEFAULT_DIVERGE_THRESHOLD,
) -> ParticleType:
    """Diverged > Zero > SR > F, in that precedence."""
    w = n.weights
    if not np.all(np.isfinite(w)) or np.any(np.abs(w) > diverge_threshold):
        return ParticleType.DIVERGED
    if np.all(np.abs(w) < zero_threshold):
        return ParticleType.ZERO
    if is_eps_fixpoint(n, margin):
        return ParticleType.SR
    return ParticleType.F


def perturb(n: ParticleNetwork, sigma: float, rng: np.random.Generator) -> ParticleNetwork:
    """Add independent N(0, sigma^2) noise to every weight."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return n.copy()
    noisy = n.weights + rng.normal(0.0, sigma, size=n.weights.shape)
    return ParticleNetwork(Network(n.net.arch, noisy))


def self_application_chain(
    n: ParticleNetwork,
    margin: FixpointMargin = FixpointMargin(),
    max_steps: int = 100,
    diverge_threshold: float = DEFAULT_DIVERGE_THRESHOLD,
) -> tuple[int, int]:
    """Iterate n <- n applied to itself.

    Returns (steps_sr, steps_to_divergence): how many initial steps in a row
    moved every weight by less than epsilon, and the step at which the
    iterate diverged (max_steps if it never did).
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    steps_sr = 0
    sr_unbroken = True
    cur = n.weights.copy()
    arch = n.net.arch
    for step in range(1, max_steps + 1):
        nxt = apply_replicative(ParticleNetwork(Network(arch, cur)), ParticleNetwork(Network(arch, cur)))
        bad = nxt.diverged or np.any(np.abs(nxt.weights) > diverge_threshold)
        if bad:
            return steps_sr, step
        if sr_unbroken and np.max(np.abs(nxt.weights - cur)) < margin.epsilon:
            steps_sr += 1
        else:
            sr_unbroken = False
        cur = nxt.weights
    return steps_sr, max_steps


class ParticleStack:
    """Same-architecture particles trained and applied in lockstep.

    Holds a (particles, weight_count) matrix plus per-particle momentum
    buffers; every operation is vectorized across the particle axis. The
    flat rows stay the single source of truth (layer matrices are views).
    """

    def __init__(self, arch, weights, learning_rate=0.004, momentum=0.9, velocity=None):
        if arch.layer_sizes[0] != 5 or arch.layer_sizes[-1] != 1:
            raise ValueError("particle stacks are for 5->1 architectures")
        self.arch = arch
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != arch.weight_count:
            raise ValueError(f"weights must be (particles, {arch.weight_count})")
        self.learning_rate = learning_rate
        self.momentum = momentum
        if velocity is None:
            velocity = np.zeros_like(self.weights)
        self.velocity = np.ascontiguousarray(velocity, dtype=np.float64)
        self._offsets = arch.layer_offsets()
        self._base_inputs = _replication_inputs_cached(arch.layer_sizes)

    @property
    def count(self) -> int:
        return self.weights.shape[0]

    def _layer_views(self, mat: np.ndarray) -> list[np.ndarray]:
        views = []
        for l in range(self.arch.num_weight_layers):
            out, inp = self.arch.layer_shape(l)
            views.append(mat[:, self._offsets[l] : self._offsets[l + 1]].reshape(-1, out, inp))
        return views

    def forward_many(self, inputs: np.ndarray) -> np.ndarray:
        """(P, S, 5) inputs -> (P, S) scalar outputs, each particle on its own rows."""
        z = inputs
        for w in self._layer_views(self.weights):
            z = np.matmul(z, w.transpose(0, 2, 1))
        return z[:, :, 0]

    def auxiliary_many(self, x: np.ndarray) -> np.ndarray:
        """(P, S) task inputs -> (P, S) outputs via the (0,0,0,0,x) slot."""
        ws = self._layer_views(self.weights)
        z = ws[0][:, :, 4][:, None, :] * x[:, :, None]  # only input slot 4 is live
        for w in ws[1:]:
            z = np.matmul(z, w.transpose(0, 2, 1))
        return z[:, :, 0]

    def extracted_weights(self) -> np.ndarray:
        """(P,) effective scalars: response to (0,0,0,0,1)."""
        return self.auxiliary_many(np.ones((self.count, 1)))[:, 0]

    def apply_to_self(self) -> np.ndarray:
        """(P, weight_count) weights produced by each particle replicating itself."""
        s = self.arch.weight_count
        inputs = np.broadcast_to(self._base_inputs, (self.count, s, 5)).copy()
        inputs[:, :, 0] = self.weights
        return self.forward_many(inputs)

    def self_train_pass(self) -> np.ndarray:
        """One per-sample SGD pass per particle; returns (P,) mean pass losses.

        Sample j for particle p is ((w_pj, L(j), C(j), E(j), 0), w_pj) with the
        targets frozen before the first update of the pass.
        """
        targets = self.weights.copy()
        w_views = self._layer_views(self.weights)
        v_views = self._layer_views(self.velocity)
        n_layers = len(w_views)
        lr, mom = self.learning_rate, self.momentum
        loss_sum = np.zeros(self.count)
        x = np.empty((self.count, 5))
        for j in range(self.arch.weight_count):
            x[:] = self._base_inputs[j]
            x[:, 0] = targets[:, j]
            # forward, keeping per-layer activations
            acts = [x]
            z = x
            for w in w_views:
                z = np.matmul(w, z[:, :, None])[:, :, 0]
                acts.append(z)
            err = z[:, 0] - targets[:, j]
            loss_sum += err * err
            # backward + momentum update, layer by layer
            g = (2.0 * err)[:, None]
            for l in range(n_layers - 1, -1, -1):
                gw = g[:, :, None] * acts[l][:, None, :]
                if l > 0:
                    g = np.matmul(w_views[l].transpose(0, 2, 1), g[:, :, None])[:, :, 0]
                v = v_views[l]
                v *= mom
                v += gw
                w_views[l] -= lr * v
        return loss_sum / self.arch.weight_count

    def max_self_deltas(self) -> np.ndarray:
        """(P,) max |self-application - weights|; nan where non-finite."""
        applied = self.apply_to_self()
        return np.max(np.abs(applied - self.weights), axis=1)

    def classify_all(
        self,
        margin: FixpointMargin = FixpointMargin(),
        zero_threshold: float = DEFAULT_ZERO_THRESHOLD,
        diverge_threshold: float = DEFAULT_DIVERGE_THRESHOLD,
    ) -> list[ParticleType]:
        absw = np.abs(self.weights)
        finite = np.all(np.isfinite(self.weights), axis=1)
        diverged = ~finite | np.any(absw > diverge_threshold, axis=1)
        zero = np.all(absw < zero_threshold, axis=1)
        with np.errstate(invalid="ignore", over="ignore"):
            deltas = self.max_self_deltas()
        fix = np.isfinite(deltas) & (deltas < margin.epsilon)
        types = []
        for p in range(self.count):
            if diverged[p]:
                types.append(ParticleType.DIVERGED)
            elif zero[p]:
                types.append(ParticleType.ZERO)
            elif fix[p]:
                types.append(ParticleType.SR)
            else:
                types.append(ParticleType.F)
        return types

    def particle(self, p: int) -> ParticleNetwork:
        return ParticleNetwork(Network(self.arch, self.weights[p].copy()))
