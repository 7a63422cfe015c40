"""Organism networks: meta-networks whose every edge weight is a particle.

Cell values are sums of particle responses to the previous layer's values
(each particle fed through its task slot), with the organism's activation
applied after hidden layers. All particles share one architecture, so the
whole population lives in a (particles, weight_count) matrix and both task
backprop and self-training run stacked across it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .net import (
    Activation,
    DivergenceError,
    Network,
    NetworkArchitecture,
    OptimizerState,
    Position,
    ShapeError,
    _activate,
    _activate_grad,
    flat_index,
    init_weights,
    position_of,
)
from .particle import (
    DEFAULT_DIVERGE_THRESHOLD,
    DEFAULT_PARTICLE_LAYERS,
    DEFAULT_ZERO_THRESHOLD,
    FixpointMargin,
    ParticleNetwork,
    ParticleStack,
    ParticleType,
)


@dataclass(frozen=True)
class OrganismArchitecture:
    on_layer_sizes: tuple[int, ...]
    on_activation: Activation = Activation.LINEAR
    particle_arch: NetworkArchitecture = None  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "on_layer_sizes", tuple(int(s) for s in self.on_layer_sizes))
        if self.particle_arch is None:
            object.__setattr__(
                self, "particle_arch", NetworkArchitecture(DEFAULT_PARTICLE_LAYERS)
            )
        if len(self.on_layer_sizes) < 2:
            raise ShapeError("organism needs at least input and output layers")
        if any(s <= 0 for s in self.on_layer_sizes):
            raise ShapeError(f"organism layer sizes must be positive: {self.on_layer_sizes}")
        sizes = self.particle_arch.layer_sizes
        if sizes[0] != 5 or sizes[-1] != 1:
            raise ShapeError("particle template must map R^5 -> R")

    @property
    def edge_arch(self) -> NetworkArchitecture:
        """Conventional net of the same shape; also drives edge-position math."""
        return NetworkArchitecture(self.on_layer_sizes, self.on_activation)

    @property
    def particle_count(self) -> int:
        return self.edge_arch.weight_count

    @property
    def num_on_layers(self) -> int:
        return len(self.on_layer_sizes) - 1

    def layer_particle_slice(self, layer: int) -> slice:
        offs = self.edge_arch.layer_offsets()
        return slice(offs[layer], offs[layer + 1])


class OrganismNetwork:
    """Mutable training container: particle rows, per-particle and global optimizers."""

    def __init__(
        self,
        arch: OrganismArchitecture,
        particle_weights: np.ndarray,
        task_state: OptimizerState,
        self_learning_rate: float = 0.004,
        self_momentum: float = 0.9,
        self_velocity: Optional[np.ndarray] = None,
        diverged: bool = False,
    ):
        self.arch = arch
        w = np.ascontiguousarray(particle_weights, dtype=np.float64)
        expected = (arch.particle_count, arch.particle_arch.weight_count)
        if w.shape != expected:
            raise ShapeError(f"particle weights must have shape {expected}, got {w.shape}")
        self.particle_weights = w
        self.task_state = task_state
        if task_state.velocity.shape != (w.size,):
            raise ShapeError("task optimizer velocity must cover all particle weights")
        self.self_learning_rate = self_learning_rate
        self.self_momentum = self_momentum
        if self_velocity is None:
            self_velocity = np.zeros_like(w)
        self.self_velocity = np.ascontiguousarray(self_velocity, dtype=np.float64)
        self.diverged = diverged

    # -- particle access -------------------------------------------------

    def particle_index(self, pos: Position) -> int:
        return flat_index(self.arch.edge_arch, pos)

    def edge_positions(self) -> list[Position]:
        return [position_of(self.arch.edge_arch, i) for i in range(self.arch.particle_count)]

    def particle_at(self, pos: Position) -> ParticleNetwork:
        row = self.particle_weights[self.particle_index(pos)]
        return ParticleNetwork(Network(self.arch.particle_arch, row.copy()))

    @property
    def particles(self) -> dict[Position, ParticleNetwork]:
        return {pos: self.particle_at(pos) for pos in self.edge_positions()}

    def self_optimizer_at(self, pos: Position) -> OptimizerState:
        row = self.self_velocity[self.particle_index(pos)]
        return OptimizerState(self.self_learning_rate, self.self_momentum, row.copy())

    def full_stack(self) -> ParticleStack:
        """Stack over every particle, sharing this organism's storage."""
        return ParticleStack(
            self.arch.particle_arch,
            self.particle_weights,
            self.self_learning_rate,
            self.self_momentum,
            velocity=self.self_velocity,
        )

    def layer_stack(self, layer: int) -> ParticleStack:
        sl = self.arch.layer_particle_slice(layer)
        return ParticleStack(
            self.arch.particle_arch,
            self.particle_weights[sl],
            self.self_learning_rate,
            self.self_momentum,
            velocity=self.self_velocity[sl],
        )

    def copy(self) -> "OrganismNetwork":
        return OrganismNetwork(
            self.arch,
            self.particle_weights.copy(),
            OptimizerState(
                self.task_state.learning_rate,
                self.task_state.momentum,
                self.task_state.velocity.copy(),
            ),
            self.self_learning_rate,
            self.self_momentum,
            self.self_velocity.copy(),
            self.diverged,
        )


def new_organism(
    arch: OrganismArchitecture,
    rng: np.random.Generator,
    task_learning_rate: float = 0.004,
    task_momentum: float = 0.9,
    self_learning_rate: float = 0.004,
    self_momentum: float = 0.9,
) -> OrganismNetwork:
    rows = np.stack([init_weights(arch.particle_arch, rng) for _ in range(arch.particle_count)])
    task_state = OptimizerState.fresh(task_learning_rate, task_momentum, rows.size)
    return OrganismNetwork(arch, rows, task_state, self_learning_rate, self_momentum)


# -- forward / backward ----------------------------------------------------


def _layer_weight_views(on: OrganismNetwork, mat: np.ndarray, layer: int) -> list[np.ndarray]:
    block = mat[on.arch.layer_particle_slice(layer)]
    offs = on.arch.particle_arch.layer_offsets()
    views = []
    for k in range(on.arch.particle_arch.num_weight_layers):
        out, inp = on.arch.particle_arch.layer_shape(k)
        views.append(block[:, offs[k] : offs[k + 1]].reshape(-1, out, inp))
    return views


def _forward_cached(on: OrganismNetwork, xs: np.ndarray):
    """Run the organism on a batch, keeping every intermediate for backprop."""
    sizes = on.arch.on_layer_sizes
    act = on.arch.on_activation
    n_layers = on.arch.num_on_layers
    cache = []
    a_prev = xs
    for l in range(n_layers):
        n_in, n_out = sizes[l], sizes[l + 1]
        ws = _layer_weight_views(on, on.particle_weights, l)
        x_edges = np.repeat(a_prev[:, None, :], n_out, axis=1).reshape(len(xs), n_out * n_in)
        zs = [ws[0][:, :, 4][None] * x_edges[:, :, None]]  # (B, P, h1); slot 4 is live
        for w in ws[1:]:
            zs.append(np.matmul(zs[-1][:, :, None, :], w.transpose(0, 2, 1)[None])[:, :, 0, :])
        cell_sums = zs[-1][:, :, 0].reshape(len(xs), n_out, n_in).sum(axis=2)
        cache.append({"x_edges": x_edges, "zs": zs, "cell_sums": cell_sums})
        a_prev = _activate(cell_sums, act) if l < n_layers - 1 else cell_sums
        cache[-1]["out"] = a_prev
    return a_prev, cache


def on_forward_batch(on: OrganismNetwork, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != on.arch.on_layer_sizes[0]:
        raise ShapeError(
            f"expected batch of {on.arch.on_layer_sizes[0]}-vectors, got {xs.shape}"
        )
    out, _ = _forward_cached(on, xs)
    return out


def on_forward(on: OrganismNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a flat input vector, got shape {x.shape}")
    return on_forward_batch(on, x[None, :])[0]


def on_task_gradient(on: OrganismNetwork, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, float]:
    """MSE loss and its gradient over every particle weight (flat, canonical order)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    out, cache = _forward_cached(on, xs)
    loss = float(np.mean((out - ys) ** 2))

    sizes = on.arch.on_layer_sizes
    act = on.arch.on_activation
    gbuf = np.zeros_like(on.particle_weights)
    g = 2.0 * (out - ys) / out.size  # (B, q)
    for l in range(on.arch.num_on_layers - 1, -1, -1):
        n_in, n_out = sizes[l], sizes[l + 1]
        ws = _layer_weight_views(on, on.particle_weights, l)
        gws = _layer_weight_views(on, gbuf, l)
        c = cache[l]
        if l < on.arch.num_on_layers - 1:
            g = g * _activate_grad(c["cell_sums"], act)
        gz = np.repeat(g, n_in, axis=1)[:, :, None]  # (B, P, 1): d(cell sum)/d(particle out)=1
        for k in range(len(ws) - 1, 0, -1):
            np.einsum("bpo,bpi->poi", gz, c["zs"][k - 1], out=gws[k], optimize=True)
            gz = np.matmul(gz[:, :, None, :], ws[k][None])[:, :, 0, :]
        gws[0][:, :, 4] = np.einsum("bph,bp->ph", gz, c["x_edges"], optimize=True)
        ga = np.einsum("bph,ph->bp", gz, ws[0][:, :, 4], optimize=True)
        if l > 0:
            g = ga.reshape(len(xs), n_out, n_in).sum(axis=1)
    return gbuf.ravel(), loss


def on_task_step(on: OrganismNetwork, batch) -> float:
    """One global momentum-SGD step over all particle weights jointly."""
    xs, ys = batch
    grad, loss = on_task_gradient(on, xs, ys)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        on.diverged = True
        raise DivergenceError("organism task gradient went non-finite")
    st = on.task_state
    st.velocity *= st.momentum
    st.velocity += grad
    flat = on.particle_weights.reshape(-1)
    flat -= st.learning_rate * st.velocity
    return loss


def self_train_round(on: OrganismNetwork, steps: int) -> float:
    """Run `steps` self-training passes on every particle; mean replication MSE.

    A particle whose row goes non-finite stays broken but cannot poison the
    others (all math is row-wise); its loss is excluded from the mean.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    stack = on.full_stack()  # shares storage; updates land in the organism
    total = np.zeros(on.arch.particle_count)
    for _ in range(steps):
        with np.errstate(invalid="ignore", over="ignore"):
            total += stack.self_train_pass()
    mean_per_particle = total / steps
    finite = np.isfinite(mean_per_particle)
    if not np.all(finite):
        on.diverged = True
    return float(np.mean(mean_per_particle[finite])) if np.any(finite) else float("nan")


# -- classification-level operations ----------------------------------------


@dataclass
class Census:
    """Per-organism-layer particle type counts (layers 0-based from the input)."""

    per_layer: list[dict[ParticleType, int]]

    @property
    def totals(self) -> dict[ParticleType, int]:
        out = {t: 0 for t in ParticleType}
        for layer in self.per_layer:
            for t, n in layer.items():
                out[t] += n
        return out

    def fraction(self, t: ParticleType) -> float:
        totals = self.totals
        return totals[t] / max(1, sum(totals.values()))


def classify_particles(
    on: OrganismNetwork,
    margin: FixpointMargin = FixpointMargin(),
    zero_threshold: float = DEFAULT_ZERO_THRESHOLD,
    diverge_threshold: float = DEFAULT_DIVERGE_THRESHOLD,
) -> list[ParticleType]:
    return on.full_stack().classify_all(margin, zero_threshold, diverge_threshold)


def census(
    on: OrganismNetwork,
    margin: FixpointMargin = FixpointMargin(),
    zero_threshold: float = DEFAULT_ZERO_THRESHOLD,
    diverge_threshold: float = DEFAULT_DIVERGE_THRESHOLD,
) -> Census:
    types = classify_particles(on, margin, zero_threshold, diverge_threshold)
    per_layer = []
    for l in range(on.arch.num_on_layers):
        sl = on.arch.layer_particle_slice(l)
        counts = {t: 0 for t in ParticleType}
        for t in types[sl]:
            counts[t] += 1
        per_layer.append(counts)
    return Census(per_layer)


def dropout(
    on: OrganismNetwork,
    t: ParticleType,
    margin: FixpointMargin = FixpointMargin(),
    zero_threshold: float = DEFAULT_ZERO_THRESHOLD,
    diverge_threshold: float = DEFAULT_DIVERGE_THRESHOLD,
) -> OrganismNetwork:
    """Copy of the organism with every type-t particle replaced by the zero net."""
    if t not in (ParticleType.SR, ParticleType.F):
        raise ValueError("dropout targets SR or F particles")
    types = classify_particles(on, margin, zero_threshold, diverge_threshold)
    out = on.copy()
    mask = np.array([tt is t for tt in types])
    out.particle_weights[mask] = 0.0
    out.self_velocity[mask] = 0.0
    return out


def resubstitute(on: OrganismNetwork) -> Network:
    """Conventional net of the organism's shape built from extracted scalars."""
    return Network(on.arch.edge_arch, on.full_stack().extracted_weights())


def goal_fulfilled(
    on: OrganismNetwork,
    margin: FixpointMargin,
    zeta: float,
    test_data,
) -> bool:
    """Every particle a fixpoint, and every test output within zeta of target."""
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    deltas = on.full_stack().max_self_deltas()
    if not (np.all(np.isfinite(deltas)) and np.all(deltas < margin.epsilon)):
        return False
    xs, ys = test_data.inputs, test_data.targets
    out = on_forward_chunked(on, xs)
    return bool(np.max(np.abs(out - ys)) <= zeta)


# -- alternating training ----------------------------------------------------


class ScheduleMode(Enum):
    PER_BATCH_SELF_TRAIN = "per_batch_self_train"
    RATIO_TASK_TO_SELF = "ratio_task_to_self"


@dataclass(frozen=True)
class TrainingSchedule:
    mode: ScheduleMode
    self_steps_per_particle: int = 25
    task_batches_per_self_round: int = 1
    epochs: int = 60

    def __post_init__(self):
        if self.self_steps_per_particle < 1 or self.task_batches_per_self_round < 1:
            raise ValueError("schedule counts must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    train_mae: float
    test_mse: float
    test_mae: float
    self_loss: float
    census_per_layer: list[dict[ParticleType, int]]
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None

    def census_totals(self) -> dict[ParticleType, int]:
        out = {t: 0 for t in ParticleType}
        for layer in self.census_per_layer:
            for t, n in layer.items():
                out[t] += n
        return out


@dataclass
class ExperimentRecord:
    epochs: list[EpochStats] = field(default_factory=list)
    snapshot_epochs: list[int] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)  # (P, W) copies
    diverged: bool = False
    classification: bool = False


def on_forward_chunked(on: OrganismNetwork, xs: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Forward a large input matrix without holding all intermediates at once."""
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) <= chunk:
        return on_forward_batch(on, xs)
    return np.concatenate(
        [on_forward_batch(on, xs[i : i + chunk]) for i in range(0, len(xs), chunk)]
    )


def _eval_metrics(on: OrganismNetwork, ds, classification: bool):
    out = on_forward_chunked(on, ds.inputs)
    err = out - ds.targets
    mse = float(np.mean(err**2))
    mae = float(np.mean(np.abs(err)))
    acc = None
    if classification:
        acc = float(np.mean(np.argmax(out, axis=1) == np.argmax(ds.targets, axis=1)))
    return mse, mae, acc


def alternating_train(
    on: OrganismNetwork,
    schedule: TrainingSchedule,
    train_data,
    test_data,
    batch_size: int,
    batch_rng: np.random.Generator,
    margin: FixpointMargin = FixpointMargin(),
    zero_threshold: float = DEFAULT_ZERO_THRESHOLD,
    diverge_threshold: float = DEFAULT_DIVERGE_THRESHOLD,
    classification: bool = False,
    snapshot_every: int = 0,
    progress=None,
) -> ExperimentRecord:
    """Interleave global task steps with per-particle self-training.

    PER_BATCH_SELF_TRAIN: after every task batch, run self_steps_per_particle
    self-training passes on every particle. RATIO_TASK_TO_SELF: run one
    self-training round per task_batches_per_self_round task batches.
    Divergence ends the run early with the partial record flagged.
    """
    from .data import batches  # local import to avoid a module cycle

    record = ExperimentRecord(classification=classification)
    if snapshot_every > 0:
        record.snapshot_epochs.append(0)
        record.snapshots.append(on.particle_weights.copy())
    pending_batches = 0
    for epoch in range(1, schedule.epochs + 1):
        task_losses = []
        self_losses = []
        try:
            for batch in batches(train_data, batch_size, batch_rng):
                task_losses.append(on_task_step(on, batch))
                if schedule.mode is ScheduleMode.PER_BATCH_SELF_TRAIN:
                    self_losses.append(self_train_round(on, schedule.self_steps_per_particle))
                else:
                    pending_batches += 1
                    if pending_batches >= schedule.task_batches_per_self_round:
                        pending_batches = 0
                        self_losses.append(
                            self_train_round(on, schedule.self_steps_per_particle)
                        )
        except DivergenceError:
            record.diverged = True
            break
        test_mse, test_mae, test_acc = _eval_metrics(on, test_data, classification)
        train_mse, train_mae, train_acc = _eval_metrics(on, train_data, classification)
        cens = census(on, margin, zero_threshold, diverge_threshold)
        record.epochs.append(
            EpochStats(
                epoch=epoch,
                train_mse=train_mse,
                train_mae=train_mae,
                test_mse=test_mse,
                test_mae=test_mae,
                self_loss=float(np.mean(self_losses)) if self_losses else float("nan"),
                census_per_layer=cens.per_layer,
                train_accuracy=train_acc,
                test_accuracy=test_acc,
            )
        )
        if snapshot_every > 0 and epoch % snapshot_every == 0:
            record.snapshot_epochs.append(epoch)
            record.snapshots.append(on.particle_weights.copy())
        if progress is not None:
            progress(record.epochs[-1])
    return record
