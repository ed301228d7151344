"""Datasets and client partitioning.

Two heterogeneity schemes are provided. The pathological split gives each
client a fixed number of classes from equal-size disjoint shards. The
Dirichlet split draws, for every class, a proportion vector over clients.
Each client's share is then divided 75/25 into train and test, stratified
by class so the test set follows the client's own label distribution.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import IdxParseError, PartitionError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRAIN_FRACTION = 0.75


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class ClientDataset:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    # Row indices into the source dataset, kept for disjointness checks.
    train_indices: np.ndarray = field(repr=False)
    test_indices: np.ndarray = field(repr=False)

    @property
    def class_counts(self) -> np.ndarray:
        return self.train.class_counts()

    @property
    def test_counts(self) -> np.ndarray:
        return self.test.class_counts()

    @property
    def num_samples(self) -> int:
        return len(self.train)


class Partition(list):
    """List of :class:`ClientDataset` plus a record of dropped samples per class."""

    def __init__(self, clients: Sequence[ClientDataset], truncated: Optional[dict[int, int]] = None):
        super().__init__(clients)
        self.truncated = dict(truncated or {})


def synth_gaussian_mixture(
    num_classes: int, dim: int, per_class: int, separation: float, seed: int | np.random.Generator
) -> LabeledDataset:
    """Unit-covariance Gaussian clusters whose means are pairwise >= ``separation`` apart.

    With ``dim >= num_classes`` the means sit on scaled coordinate axes, so every
    pair is exactly ``separation`` apart. Otherwise means are drawn by rejection
    from a sphere whose radius grows until the spacing holds.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    if dim >= num_classes:
        means = np.zeros((num_classes, dim))
        means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
    else:
        means = _spread_means(num_classes, dim, separation, rng)

    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return LabeledDataset(features[order], labels[order], num_classes)


def _spread_means(k: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    radius = separation
    while True:
        for _ in range(200):
            pts = rng.standard_normal((k, dim))
            pts *= radius / np.linalg.norm(pts, axis=1, keepdims=True)
            d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
            if d[np.triu_indices(k, 1)].min() >= separation:
                return pts
        radius *= 1.5


def _read_header(raw: bytes, n_ints: int, path: Path) -> tuple[int, ...]:
    if len(raw) < 4 * n_ints:
        raise IdxParseError(f"{path}: header truncated ({len(raw)} bytes)")
    return struct.unpack(f">{n_ints}I", raw[: 4 * n_ints])


def load_idx_mnist(images_path, labels_path, limit: Optional[int] = None) -> LabeledDataset:
    """Parse an IDX image/label file pair; pixels scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_raw = images_path.read_bytes()
    lbl_raw = labels_path.read_bytes()

    magic, n_img, rows, cols = _read_header(img_raw, 4, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxParseError(f"{images_path}: bad magic number 0x{magic:08x} (expected 0x{IDX_IMAGES_MAGIC:08x})")
    magic, n_lbl = _read_header(lbl_raw, 2, labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxParseError(f"{labels_path}: bad magic number 0x{magic:08x} (expected 0x{IDX_LABELS_MAGIC:08x})")
    if n_img != n_lbl:
        raise IdxParseError(f"count mismatch: {n_img} images vs {n_lbl} labels")

    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)
    if pixels.size != n_img * rows * cols:
        raise IdxParseError(
            f"{images_path}: pixel data truncated ({pixels.size} bytes, expected {n_img * rows * cols})"
        )
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8)
    if labels.size != n_lbl:
        raise IdxParseError(f"{labels_path}: label data truncated ({labels.size} bytes, expected {n_lbl})")
    if labels.size and labels.max() >= 10:
        raise IdxParseError(f"{labels_path}: label value {labels.max()} outside [0, 10)")

    n = n_img
    if limit is not None:
        if limit < 1:
            raise ValueError(f"limit must be >= 1, got {limit}")
        n = min(n, limit)
    if n == 0:
        raise ValueError("empty dataset")
    features = pixels[: n * rows * cols].reshape(n, rows * cols).astype(np.float64) / 255.0
    return LabeledDataset(features, labels[:n].astype(np.int64), 10)


def _stratified_train_mask(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Pick round(0.75 n) training rows, allotted to classes by largest remainder."""
    n = len(labels)
    n_train = max(1, int(np.floor(TRAIN_FRACTION * n + 0.5)))
    counts = np.bincount(labels, minlength=num_classes)
    ideal = counts * (n_train / n)
    take = np.floor(ideal).astype(np.int64)
    short = n_train - take.sum()
    if short > 0:
        # stable sort keeps ties in class order, so equal classes stay equal
        # whenever the ideal shares are already integers
        order = np.argsort(-(ideal - take), kind="stable")
        take[order[:short]] += 1
    mask = np.zeros(n, dtype=bool)
    for j in range(num_classes):
        rows = np.flatnonzero(labels == j)
        if len(rows):
            chosen = rng.permutation(rows)[: take[j]]
            mask[chosen] = True
    return mask


def _make_clients(
    data: LabeledDataset, assignments: list[np.ndarray], rng: np.random.Generator
) -> list[ClientDataset]:
    clients = []
    for cid, idx in enumerate(assignments):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        mask = _stratified_train_mask(data.labels[idx], data.num_classes, rng)
        tr, te = idx[mask], idx[~mask]
        clients.append(ClientDataset(cid, data.subset(tr), data.subset(te), tr, te))
    return clients


def partition_pathological(
    data: LabeledDataset, num_clients: int, classes_per_client: int, seed: int | np.random.Generator
) -> Partition:
    """Every client gets ``classes_per_client`` distinct classes from equal shards."""
    k = data.num_classes
    if classes_per_client < 1 or classes_per_client > k:
        raise ValueError(f"classes_per_client must be in [1, {k}], got {classes_per_client}")
    if num_clients < 1:
        raise ValueError("need at least one client")
    total_shards = num_clients * classes_per_client
    if total_shards % k:
        raise PartitionError(
            f"{num_clients} clients x {classes_per_client} classes = {total_shards} shards, "
            f"not divisible across {k} classes"
        )
    shards_per_class = total_shards // k
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    shards: dict[int, list[np.ndarray]] = {}
    truncated = {}
    for j in range(k):
        rows = rng.permutation(np.flatnonzero(data.labels == j))
        size = len(rows) // shards_per_class
        if size == 0:
            raise PartitionError(
                f"class {j} has {len(rows)} samples, fewer than the {shards_per_class} shards needed"
            )
        dropped = len(rows) - size * shards_per_class
        if dropped:
            truncated[j] = dropped
        shards[j] = [rows[s * size:(s + 1) * size] for s in range(shards_per_class)]
    if truncated:
        log.info("pathological partition dropped samples to equalise shards: %s", truncated)

    slots = _assign_class_slots(k, num_clients, classes_per_client, shards_per_class, rng)
    used = {j: 0 for j in range(k)}
    assignments = []
    for client_classes in slots:
        parts = []
        for j in client_classes:
            parts.append(shards[j][used[j]])
            used[j] += 1
        assignments.append(np.concatenate(parts))
    return Partition(_make_clients(data, assignments, rng), truncated)


def _assign_class_slots(k, num_clients, per_client, per_class, rng, attempts=1000):
    """Deal class slots to clients so no client repeats a class.

    Random shuffles are tried first for varied class pairings; if none is
    valid a strided deal is used, which is always valid when per_client <= k.
    """
    pool = np.repeat(np.arange(k), per_class)
    for _ in range(attempts):
        dealt = rng.permutation(pool).reshape(num_clients, per_client)
        if all(len(set(row)) == per_client for row in dealt):
            return [sorted(int(c) for c in row) for row in dealt]
    perm = rng.permutation(k)
    ordered = perm[np.repeat(np.arange(k), per_class)]
    return [sorted(int(ordered[i + t * num_clients]) for t in range(per_client)) for i in range(num_clients)]


def partition_dirichlet(
    data: LabeledDataset, num_clients: int, beta: float, seed: int | np.random.Generator
) -> Partition:
    """For each class draw Dirichlet(beta) proportions over clients and split its samples."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if num_clients < 1:
        raise ValueError("need at least one client")
    if len(data) < num_clients:
        raise PartitionError(f"{len(data)} samples cannot cover {num_clients} clients")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for j in range(data.num_classes):
        rows = rng.permutation(np.flatnonzero(data.labels == j))
        props = rng.dirichlet(np.full(num_clients, float(beta)))
        cuts = (np.cumsum(props) * len(rows)).astype(np.int64)[:-1]
        for i, part in enumerate(np.split(rows, cuts)):
            buckets[i].append(part)
    assignments = [np.concatenate(b) if b else np.empty(0, np.int64) for b in buckets]

    # A client needs at least one training sample; with the 75/25 split that
    # means at least one sample overall. Borrow from the largest client.
    for i in range(num_clients):
        while len(assignments[i]) == 0:
            donor = int(np.argmax([len(a) for a in assignments]))
            assignments[i] = assignments[donor][-1:]
            assignments[donor] = assignments[donor][:-1]
    return Partition(_make_clients(data, assignments, rng))


def true_distribution(client: ClientDataset | np.ndarray) -> np.ndarray:
    """Training-label proportions n_ij / n_i."""
    counts = client.class_counts if isinstance(client, ClientDataset) else np.asarray(client)
    total = counts.sum()
    if total <= 0:
        raise ValueError("client holds no training samples")
    return counts / total


def count_matrix(clients: Sequence[ClientDataset]) -> np.ndarray:
    return np.stack([c.class_counts for c in clients])


def write_partition_csv(clients: Sequence[ClientDataset], path) -> None:
    """One row per (client, class): train and test sample counts."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "class_id", "train_count", "test_count"])
        for c in clients:
            for j, (ntr, nte) in enumerate(zip(c.class_counts, c.test_counts)):
                w.writerow([c.client_id, j, int(ntr), int(nte)])


def read_partition_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_partition_csv`; returns (train, test) count matrices."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    m = max(int(r["client_id"]) for r in rows) + 1
    k = max(int(r["class_id"]) for r in rows) + 1
    train = np.zeros((m, k), dtype=np.int64)
    test = np.zeros((m, k), dtype=np.int64)
    for r in rows:
        i, j = int(r["client_id"]), int(r["class_id"])
        train[i, j] = int(r["train_count"])
        test[i, j] = int(r["test_count"])
    return train, test
