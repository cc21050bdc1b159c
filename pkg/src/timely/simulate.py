"""Synthetic chain datasets with known ground truth.

The generator draws a 2-D point cloud whose first coordinate carries the
developmental ordering, assigns equal-sized label blocks along that
ordering, lifts the points to ``d`` dimensions with a random linear map,
and corrupts a fixed fraction of the labels.

All randomness comes from a Philox counter-based generator so that a seed
reproduces the dataset bit for bit across platforms.  Stream order per
seed: the 2 x n point cloud, then the d x 2 projection matrix, then the
flip positions, then the replacement labels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import CellRecord, LineageTopology, ValidationError, chain_topology


@dataclass(frozen=True)
class SimConfig:
    """Knobs for one synthetic dataset."""

    n: int = 250
    K: int = 5
    d: int = 50
    noise_level: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n <= 0 or self.K <= 0 or self.d <= 0:
            raise ValidationError("n, K, d must be positive")
        if self.n % self.K != 0:
            raise ValidationError(f"n={self.n} must be divisible by K={self.K}")
        if not 0 <= self.noise_level <= 100:
            raise ValidationError("noise_level must be in 0..100")


@dataclass(frozen=True)
class SimDataset:
    """Generated cells plus the ground truth needed for scoring."""

    cells: tuple[CellRecord, ...]
    ground_truth: np.ndarray
    noisy_mask: np.ndarray
    topology: LineageTopology
    config: SimConfig = field(repr=False)


def default_topology(K: int) -> LineageTopology:
    """The chain S1 -> S2 -> ... -> SK used by all simulated datasets."""
    return chain_topology([f"S{i}" for i in range(1, K + 1)])


def generate(config: SimConfig) -> SimDataset:
    """Generate one dataset according to ``config``.

    Cells come out sorted by the latent ordering coordinate, so cell i of
    block b carries ground-truth label b+1.  Exactly
    ``floor(n * noise_level / 100)`` distinct cells get a different label,
    drawn uniformly from the other K-1 labels.
    """
    n, K, d = config.n, config.K, config.d
    rng = np.random.Generator(np.random.Philox(config.seed))

    X = rng.standard_normal((2, n))
    order = np.argsort(X[0], kind="stable")
    X = X[:, order]

    block = n // K
    truth = np.repeat(np.arange(1, K + 1), block)

    P = rng.standard_normal((d, 2))
    features = P @ X  # d x n

    n_flips = (n * config.noise_level) // 100
    flip_pos = np.sort(rng.choice(n, size=n_flips, replace=False))
    offsets = rng.integers(1, K, size=n_flips) if n_flips else np.empty(0, dtype=int)

    observed = truth.copy()
    # Shifting by 1..K-1 modulo K is a uniform draw over the other labels.
    observed[flip_pos] = (truth[flip_pos] - 1 + offsets) % K + 1
    noisy_mask = np.zeros(n, dtype=bool)
    noisy_mask[flip_pos] = True

    topology = default_topology(K)
    width = len(str(n - 1))
    cells = tuple(
        CellRecord(id=f"c{i:0{width}d}", features=features[:, i], observed_label=int(observed[i]))
        for i in range(n)
    )
    return SimDataset(
        cells=cells,
        ground_truth=truth,
        noisy_mask=noisy_mask,
        topology=topology,
        config=config,
    )


def ground_truth_borders(dataset: SimDataset) -> list[int]:
    """Block boundaries in sorted-column order.

    Returns the index of the first cell of each new block (K-1 values);
    for n=250, K=5 that is [50, 100, 150, 200].
    """
    n, K = dataset.config.n, dataset.config.K
    block = n // K
    return [block * i for i in range(1, K)]


def save_truth(path, dataset: SimDataset):
    """Write the truth CSV ``id,true_label,flipped`` next to the cells CSV."""
    topo = dataset.topology
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "true_label", "flipped"])
        for i, cell in enumerate(dataset.cells):
            writer.writerow(
                [cell.id, topo.name(int(dataset.ground_truth[i])), int(dataset.noisy_mask[i])]
            )


def load_truth(path, topology: LineageTopology) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Read a truth CSV back as (ids, ground_truth, noisy_mask)."""
    ids, truth, mask = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            ids.append(row["id"])
            truth.append(topology.label_index(row["true_label"]))
            mask.append(bool(int(row["flipped"])))
    return ids, np.array(truth, dtype=int), np.array(mask, dtype=bool)
