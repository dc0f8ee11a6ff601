"""Synthetic classification data, CSV loading, and heterogeneity partitioners.

Partitioning supports the three client-skew regimes used throughout: a
per-class Dirichlet split (lower alpha = more skew), the one-label extreme
(each client sees a single class), and a uniform IID split.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError

PARTITION_SCHEMES = ("dirichlet", "one_label", "iid")


@dataclass
class LabeledDataset:
    """Feature tensor [n, seq, d_in] with integer labels in [0, C)."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 3:
            raise InputError(f"features must be [n, seq, d_in], "
                             f"got shape {self.features.shape}")
        n = self.features.shape[0]
        if n < 1:
            raise InputError("dataset is empty")
        if self.labels.shape != (n,):
            raise InputError(f"{self.labels.shape} labels for {n} examples")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise InputError(
                f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx],
                              self.class_count)


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str
    n_clients: int
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in PARTITION_SCHEMES:
            raise ConfigurationError(
                f"scheme must be one of {PARTITION_SCHEMES}, got {self.scheme!r}")
        if self.n_clients < 1:
            raise ConfigurationError("need at least one client")
        if self.scheme == "dirichlet" and self.alpha <= 0.0:
            raise ConfigurationError(f"dirichlet alpha must be > 0, got {self.alpha}")


def synth_dataset(n: int, classes: int, seq_len: int, input_dim: int,
                  separation: float, seed: int) -> LabeledDataset:
    """Gaussian blobs: one random mean per class, noise scaled by 1/separation.

    Class counts differ by at most one (remainder goes to the low classes).
    """
    if min(n, classes, seq_len, input_dim) < 1 or separation <= 0.0:
        raise ConfigurationError("all synthetic-data parameters must be positive")
    if n < classes:
        raise ConfigurationError(f"need at least one example per class "
                                 f"({n} examples, {classes} classes)")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(classes, seq_len, input_dim))
    counts = [n // classes + (1 if c < n % classes else 0)
              for c in range(classes)]
    features = np.empty((n, seq_len, input_dim))
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for c, count in enumerate(counts):
        noise = rng.normal(size=(count, seq_len, input_dim)) / separation
        features[row:row + count] = means[c] + noise
        labels[row:row + count] = c
        row += count
    order = rng.permutation(n)
    return LabeledDataset(features[order], labels[order], classes)


def load_csv(path, seq_len: int, input_dim: int) -> LabeledDataset:
    """Read a feature-matrix CSV: header row, features..., integer label last.

    Each data row carries seq_len * input_dim feature values followed by the
    class label; features are reshaped row-major to [seq_len, input_dim].
    """
    width = seq_len * input_dim
    features, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise InputError(f"{path}:{lineno}: expected {width + 1} "
                                 f"columns, got {len(row)}")
            try:
                features.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    if not features:
        raise InputError(f"{path}: no data rows")
    labels = np.array(labels, dtype=np.int64)
    if labels.min() < 0:
        raise InputError(f"{path}: negative class label")
    feats = np.array(features).reshape(len(features), seq_len, input_dim)
    return LabeledDataset(feats, labels, int(labels.max()) + 1)


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int
                     ) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic stratified split; every class keeps at least one
    example on each side."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(
            f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.class_count):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        n_test = int(round(test_fraction * len(idx)))
        n_test = min(max(n_test, 1), len(idx) - 1)
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(test_idx))


def partition(ds: LabeledDataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Disjoint index shards covering the dataset, one per client."""
    n = len(ds)
    if n < spec.n_clients:
        raise ConfigurationError(
            f"cannot spread {n} examples over {spec.n_clients} clients")
    rng = np.random.default_rng(spec.seed)
    if spec.scheme == "iid":
        shards = [list(s) for s in np.array_split(rng.permutation(n),
                                                  spec.n_clients)]
    elif spec.scheme == "dirichlet":
        shards = [[] for _ in range(spec.n_clients)]
        for c in range(ds.class_count):
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            props = rng.dirichlet(np.full(spec.n_clients, spec.alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for shard, piece in zip(shards, np.split(idx, cuts)):
                shard.extend(piece)
    else:  # one_label
        if spec.n_clients < ds.class_count:
            raise ConfigurationError(
                f"one_label needs at least {ds.class_count} clients to cover "
                f"every class, got {spec.n_clients}")
        shards = [[] for _ in range(spec.n_clients)]
        for c in range(ds.class_count):
            owners = [i for i in range(spec.n_clients)
                      if i % ds.class_count == c]
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            for owner, piece in zip(owners, np.array_split(idx, len(owners))):
                shards[owner].extend(piece)

    # Re-seed empty shards with one sample pulled from the largest shard.
    for i in range(spec.n_clients):
        while not shards[i]:
            donor = max(range(spec.n_clients), key=lambda j: len(shards[j]))
            if len(shards[donor]) <= 1:
                raise ConfigurationError("not enough data to fill every client")
            moved = shards[donor].pop(int(rng.integers(len(shards[donor]))))
            shards[i].append(moved)
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]


def export_partition_csv(shards: list[np.ndarray], path) -> None:
    """Write the assignment as `index, client_id`, sorted by index."""
    pairs = sorted((int(i), client) for client, s in enumerate(shards)
                   for i in s)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "client_id"])
        writer.writerows(pairs)
