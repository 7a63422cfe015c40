"""Post-hoc analysis: PCA of weight trajectories, pruning baseline, grids, metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .net import Network
from .organism import OrganismNetwork
from .particle import (
    DEFAULT_DIVERGE_THRESHOLD,
    DEFAULT_ZERO_THRESHOLD,
    FixpointMargin,
    ParticleType,
)


@dataclass
class TrajectoryLog:
    """Epoch-indexed weight snapshots for every particle of one organism."""

    epochs: np.ndarray  # (E,) strictly increasing
    weights: np.ndarray  # (E, P, W)
    final_types: list[ParticleType]  # (P,)
    on_layers: np.ndarray  # (P,) organism layer index per particle

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.on_layers = np.asarray(self.on_layers, dtype=np.int64)
        if np.any(np.diff(self.epochs) <= 0):
            raise ValueError("snapshot epochs must be strictly increasing")
        if self.weights.shape[0] != len(self.epochs):
            raise ValueError("one weight snapshot per epoch required")
        if self.weights.shape[1] != len(self.final_types) or self.weights.shape[1] != len(
            self.on_layers
        ):
            raise ValueError("per-particle metadata must match the particle axis")


def pca_project(rows: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Project observations onto the top-k principal directions.

    Returns (projected (n, k), explained variance ratios (k,)). Zero-variance
    data projects to all zeros with zero ratios rather than raising.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError("need a (n>=2, d) observation matrix")
    if not 1 <= k <= min(rows.shape):
        raise ValueError(f"k={k} out of range for shape {rows.shape}")
    centered = rows - rows.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    variances = s**2 / (rows.shape[0] - 1)
    total = variances.sum()
    if total <= 0 or not np.isfinite(total):
        return np.zeros((rows.shape[0], k)), np.zeros(k)
    return centered @ vt[:k].T, variances[:k] / total


def l1_prune(net: Network, fraction: float) -> Network:
    """Zero the floor(fraction * count) globally smallest-magnitude weights.

    Ties break toward the lower flat index.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    k = int(fraction * net.arch.weight_count)
    pruned = net.weights.copy()
    if k > 0:
        order = np.argsort(np.abs(pruned), kind="stable")
        pruned[order[:k]] = 0.0
    return Network(net.arch, pruned)


def sr_position_stats(
    on: OrganismNetwork,
    margin: FixpointMargin = FixpointMargin(),
    zero_threshold: float = DEFAULT_ZERO_THRESHOLD,
    diverge_threshold: float = DEFAULT_DIVERGE_THRESHOLD,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel SR statistics over the first organism layer of a 15x15 input.

    Returns (count grid, extracted-weight-sum grid), both 15x15 row-major.
    """
    if on.arch.on_layer_sizes[0] != 225:
        raise ValueError(
            f"first-layer input must be 225-dimensional, got {on.arch.on_layer_sizes[0]}"
        )
    stack = on.layer_stack(0)
    types = stack.classify_all(margin, zero_threshold, diverge_threshold)
    extracted = stack.extracted_weights()
    n_in = 225
    counts = np.zeros(n_in)
    sums = np.zeros(n_in)
    for p, t in enumerate(types):
        if t is ParticleType.SR:
            pixel = p % n_in  # particle order is (cell, edge)
            counts[pixel] += 1
            sums[pixel] += extracted[p]
    return counts.reshape(15, 15), sums.reshape(15, 15)


@dataclass
class Metrics:
    mse: float
    mae: float
    accuracy: Optional[float] = None


def metrics(outputs, targets, task: str = "regression") -> Metrics:
    """Standard MSE/MAE, plus argmax accuracy for classification."""
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ValueError(f"shape mismatch: {outputs.shape} vs {targets.shape}")
    err = outputs - targets
    mse = float(np.mean(err**2))
    mae = float(np.mean(np.abs(err)))
    if task == "classification":
        out2 = np.atleast_2d(outputs)
        tgt2 = np.atleast_2d(targets)
        acc = float(np.mean(np.argmax(out2, axis=1) == np.argmax(tgt2, axis=1)))
        return Metrics(mse, mae, acc)
    if task != "regression":
        raise ValueError(f"unknown task {task!r}")
    return Metrics(mse, mae)


# -- file emission (CSV per RFC 4180 with a header row; JSON summaries) ------


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def write_grid_csv(path, grid: np.ndarray) -> None:
    """Row-major grid dump with a one-line header naming the columns."""
    grid = np.asarray(grid)
    header = [f"col{j}" for j in range(grid.shape[1])]
    write_csv(path, header, grid.tolist())


def write_json(path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
