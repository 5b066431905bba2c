"""Synthetic multi-client classification data with size skew and client shift.

Stands in for a real skin-type dataset: client sample counts follow the same
skewed ratios (a 1/20 scale of the 6-type distribution we target), and each
client sees the shared class structure through its own distribution shift
and noise level, so clients differ both in how much data they hold and in
how hard their data is to classify.

Layout of a generated dataset is client-major, class-major within a client,
which together with per-purpose RNG streams makes every operation a
deterministic function of (config, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError
from .rng import DATA, REBALANCE, SPLIT, substream

SPLIT_TAGS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)

# 6-client size skew: [2944, 4807, 3306, 2781, 1531, 634] scaled by 1/20.
DEFAULT_CLIENT_SIZES = (147, 240, 165, 139, 77, 32)
# Class anchors sit on a sphere of this radius: learnable but not trivial.
ANCHOR_SCALE = 3.0


def default_noise_scales(num_clients: int) -> tuple[float, ...]:
    """Linear difficulty ramp from 1.0 to 1.8 across clients.

    Rounded to 12 decimals so the ramp is stable against floating-point
    drift in linspace (1.64 stays 1.64).
    """
    return tuple(round(float(x), 12) for x in np.linspace(1.0, 1.8, num_clients))


@dataclass(frozen=True)
class SyntheticConfig:
    """Recipe for one synthetic federation."""

    num_clients: int = 6
    num_classes: int = 9
    feature_dim: int = 16
    client_sizes: tuple[int, ...] = DEFAULT_CLIENT_SIZES
    # Per-client mean shift. A translation leaves the class geometry intact
    # but forces a shared model to trade clients off against each other:
    # exactly the inequity that loss-aware aggregation repairs and that
    # per-client fine-tuning exploits. Large enough that a few federated
    # rounds cannot fully cancel it.
    client_shift_scale: float = 6.0
    # Rising noise = later clients are harder to classify; None means the
    # default 1.0 -> 1.8 ramp for this client count.
    client_noise_scales: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "client_sizes", tuple(self.client_sizes))
        if self.num_clients < 1:
            raise ValidationError("num_clients must be >= 1")
        if self.client_noise_scales is None:
            object.__setattr__(
                self, "client_noise_scales", default_noise_scales(self.num_clients)
            )
        else:
            object.__setattr__(
                self, "client_noise_scales", tuple(self.client_noise_scales)
            )
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be >= 1")
        if len(self.client_sizes) != self.num_clients:
            raise ValidationError(
                f"client_sizes has {len(self.client_sizes)} entries for "
                f"{self.num_clients} clients"
            )
        if len(self.client_noise_scales) != self.num_clients:
            raise ValidationError(
                f"client_noise_scales has {len(self.client_noise_scales)} entries for "
                f"{self.num_clients} clients"
            )
        if any(s < self.num_classes for s in self.client_sizes):
            raise ValidationError("every client needs at least num_classes samples")
        if any(s <= 0 for s in self.client_noise_scales):
            raise ValidationError("noise scales must be positive")
        if self.client_shift_scale < 0:
            raise ValidationError("client_shift_scale must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")


@dataclass
class Dataset:
    """Parallel per-sample arrays plus the class count."""

    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    client_ids: np.ndarray  # (n,) int64
    split: np.ndarray  # (n,) str, one of SPLIT_TAGS
    num_classes: int

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValidationError("features must be 2-D")
        for name in ("labels", "client_ids", "split"):
            if getattr(self, name).shape != (n,):
                raise ValidationError(f"{name} length does not match features")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels outside [0, {self.num_classes})")
        if n and self.client_ids.min() < 0:
            raise ValidationError("client ids must be nonnegative")
        bad = set(np.unique(self.split)) - set(SPLIT_TAGS)
        if bad:
            raise ValidationError(f"unknown split tags {sorted(bad)}")
        if not np.isfinite(self.features).all():
            raise ValidationError("features must be finite")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_clients(self) -> int:
        return int(self.client_ids.max()) + 1 if self.num_samples else 0

    def client_indices(self, client_id: int) -> np.ndarray:
        return np.nonzero(self.client_ids == client_id)[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.client_ids, other.client_ids)
            and np.array_equal(self.split, other.split)
        )


@dataclass
class ClientPartition:
    """Index lists into a Dataset for one client's train/val/test splits."""

    client_id: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def indices(self, tag: str) -> np.ndarray:
        if tag not in SPLIT_TAGS:
            raise ValidationError(f"unknown split tag {tag!r}")
        return getattr(self, tag)


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Draw the federation described by cfg; deterministic in cfg.seed.

    Class k of client c is Gaussian around anchor_k + shift_c with the
    client's own noise scale; class counts within a client are as equal as
    integer division allows (earlier classes take the remainder).
    """
    d, k = cfg.feature_dim, cfg.num_classes
    anchor_rng = substream(cfg.seed, DATA, 0)
    anchors = anchor_rng.normal(size=(k, d))
    anchors *= ANCHOR_SCALE / np.linalg.norm(anchors, axis=1, keepdims=True)

    shift_rng = substream(cfg.seed, DATA, 1)
    shifts = shift_rng.normal(size=(cfg.num_clients, d))
    shifts *= cfg.client_shift_scale / np.linalg.norm(shifts, axis=1, keepdims=True)

    feats, labels, owners = [], [], []
    for c, size in enumerate(cfg.client_sizes):
        rng = substream(cfg.seed, DATA, 2, c)
        base, rem = divmod(size, k)
        for cls in range(k):
            count = base + (1 if cls < rem else 0)
            noise = rng.normal(size=(count, d)) * cfg.client_noise_scales[c]
            feats.append(anchors[cls] + shifts[c] + noise)
            labels.append(np.full(count, cls, dtype=np.int64))
            owners.append(np.full(count, c, dtype=np.int64))

    return Dataset(
        features=np.concatenate(feats),
        labels=np.concatenate(labels),
        client_ids=np.concatenate(owners),
        split=np.full(sum(cfg.client_sizes), "train", dtype="<U5"),
        num_classes=k,
    )


def split_dataset(
    ds: Dataset, fractions: tuple[float, float, float] = DEFAULT_FRACTIONS, seed: int = 0
) -> list[ClientPartition]:
    """Stratified per-client split; tags ds.split in place and returns partitions.

    Per (client, class): round(frac * n) samples go to val and test, the
    remainder to train (so per class both holdout counts stay within +-1 of
    their exact fractions). A client whose val or test would come out empty
    (all classes tiny) borrows one train sample from its largest class, so
    every client ends up with at least one sample per split. The only
    mutation is ds.split.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be 3 positive values summing to 1, got {fractions}")
    partitions = []
    for c in range(ds.num_clients):
        mine = ds.client_indices(c)
        if mine.size < 5:
            raise ValidationError(f"client {c} has only {mine.size} samples, need >= 5")
        rng = substream(seed, SPLIT, c)
        buckets: dict[str, list[np.ndarray]] = {tag: [] for tag in SPLIT_TAGS}
        for cls in range(ds.num_classes):
            cls_idx = mine[ds.labels[mine] == cls]
            if cls_idx.size == 0:
                continue
            order = cls_idx[rng.permutation(cls_idx.size)]
            n_val = int(fractions[1] * cls_idx.size + 0.5)
            n_test = int(fractions[2] * cls_idx.size + 0.5)
            buckets["val"].append(order[:n_val])
            buckets["test"].append(order[n_val : n_val + n_test])
            buckets["train"].append(order[n_val + n_test :])
        for tag in ("val", "test"):
            if sum(a.size for a in buckets[tag]) == 0:
                donor = max(range(len(buckets["train"])), key=lambda i: buckets["train"][i].size)
                buckets[tag].append(buckets["train"][donor][-1:])
                buckets["train"][donor] = buckets["train"][donor][:-1]
        part = ClientPartition(
            client_id=c,
            train=np.sort(np.concatenate(buckets["train"])),
            val=np.sort(np.concatenate(buckets["val"])),
            test=np.sort(np.concatenate(buckets["test"])),
        )
        for tag in SPLIT_TAGS:
            ds.split[part.indices(tag)] = tag
        partitions.append(part)
    return partitions


def partitions_from_tags(ds: Dataset) -> list[ClientPartition]:
    """Rebuild per-client partitions from the split tags (e.g. after read)."""
    out = []
    for c in range(ds.num_clients):
        mine = ds.client_indices(c)
        out.append(
            ClientPartition(
                client_id=c,
                train=mine[ds.split[mine] == "train"],
                val=mine[ds.split[mine] == "val"],
                test=mine[ds.split[mine] == "test"],
            )
        )
    return out


def rebalance_by_resampling(
    partition: ClientPartition, ds: Dataset, seed: int = 0
) -> ClientPartition:
    """Oversample minority classes (with replacement) in the train split.

    Every class present in train is brought up to the majority class count;
    val and test index lists are returned unchanged.
    """
    train = partition.train
    if train.size == 0:
        raise ValidationError(f"client {partition.client_id}: empty train split")
    labels = ds.labels[train]
    classes, counts = np.unique(labels, return_counts=True)
    target = counts.max()
    if np.all(counts == target):
        return ClientPartition(partition.client_id, train.copy(), partition.val, partition.test)
    rng = substream(seed, REBALANCE, partition.client_id)
    extras = []
    for cls, count in zip(classes, counts):
        if count < target:
            pool = train[labels == cls]
            extras.append(rng.choice(pool, size=target - count, replace=True))
    new_train = np.concatenate([train, *extras])
    return ClientPartition(partition.client_id, new_train, partition.val, partition.test)


# ---------------------------------------------------------------------------
# CSV I/O: header is client_id,split,label,f0,...,f{d-1}
# ---------------------------------------------------------------------------


def write_dataset(ds: Dataset, path) -> None:
    """Write the dataset as CSV; floats use shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "split", "label"] + [f"f{i}" for i in range(ds.feature_dim)])
        for i in range(ds.num_samples):
            writer.writerow(
                [int(ds.client_ids[i]), ds.split[i], int(ds.labels[i])]
                + [repr(float(v)) for v in ds.features[i]]
            )


def read_dataset(path, num_classes: int | None = None) -> Dataset:
    """Read a dataset CSV written by write_dataset.

    num_classes is inferred as max(label)+1 when not given. Malformed
    content raises ParseError naming the line.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = rows[0]
    if header[:3] != ["client_id", "split", "label"]:
        raise ParseError(f"bad header {header[:3]}, expected client_id,split,label,...", line=1)
    dim = len(header) - 3
    if dim < 1 or header[3:] != [f"f{i}" for i in range(dim)]:
        raise ParseError("feature columns must be f0..f{d-1}", line=1)
    if len(rows) == 1:
        raise ParseError("no data rows", line=1)

    clients, splits, labels, feats = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        try:
            clients.append(int(row[0]))
            labels.append(int(row[2]))
            feats.append([float(v) for v in row[3:]])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if row[1] not in SPLIT_TAGS:
            raise ParseError(f"unknown split tag {row[1]!r}", line=lineno)
        splits.append(row[1])
        if clients[-1] < 0:
            raise ParseError(f"negative client_id {clients[-1]}", line=lineno)
        if labels[-1] < 0 or (num_classes is not None and labels[-1] >= num_classes):
            raise ParseError(f"label {labels[-1]} out of range", line=lineno)

    return Dataset(
        features=np.array(feats, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        client_ids=np.array(clients, dtype=np.int64),
        split=np.array(splits, dtype="<U5"),
        num_classes=num_classes if num_classes is not None else max(labels) + 1,
    )
