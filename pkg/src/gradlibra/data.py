"""Synthetic long-tailed datasets, class grouping and CSV persistence.

Each class is an isotropic Gaussian blob around a random center; background
samples are uniform over the box spanned by the centers, inflated by three
standard deviations so they include both easy and hard negatives.

Randomness is drawn from PCG64 streams spawned off one ``SeedSequence`` with a
fixed key per role and class, so changing one class count leaves every other
class's draws untouched.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, ParseError

FREQUENT, COMMON, RARE = "frequent", "common", "rare"
GROUP_NAMES = (FREQUENT, COMMON, RARE)
TEST_FRACTION = 0.3

# stream roles; the class index (or 0) is appended to the spawn key
_CENTERS, _SAMPLES, _SPLIT, _BACKGROUND = 0, 1, 2, 3


def long_tail_counts(num_classes: int, head: int, tail: int) -> list[int]:
    """Exponentially decaying class counts from ``head`` down to ``tail``."""
    if num_classes < 1 or head < 1 or tail < 1 or tail > head:
        raise ConfigError("need num_classes >= 1 and 1 <= tail <= head")
    if num_classes == 1:
        return [head]
    decay = (tail / head) ** (1.0 / (num_classes - 1))
    return [int(round(head * decay**i)) for i in range(num_classes)]


@dataclass
class DatasetSpec:
    num_classes: int = 10
    counts: list[int] = field(default_factory=lambda: long_tail_counts(10, 10000, 50))
    background_count: int = 20000
    feature_dim: int = 16
    center_separation: float = 10.0
    covariance_scale: float = 1.0
    group_thresholds: tuple[int, int] = (5000, 10000)
    seed: int = 0

    def __post_init__(self) -> None:
        self.counts = [int(c) for c in self.counts]
        self.group_thresholds = tuple(int(t) for t in self.group_thresholds)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.counts) != self.num_classes:
            raise ConfigError(f"counts has {len(self.counts)} entries, expected {self.num_classes}")
        if any(c <= 0 for c in self.counts):
            raise ConfigError("every class count must be positive")
        if any(a < b for a, b in zip(self.counts, self.counts[1:])):
            raise ConfigError("counts must be sorted in descending (head to tail) order")
        if self.background_count < 0:
            raise ConfigError("background_count must be >= 0")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if not (self.center_separation > 0 and self.covariance_scale > 0):
            raise ConfigError("center_separation and covariance_scale must be positive")
        if len(self.group_thresholds) != 2:
            raise ConfigError("group_thresholds must be a pair")
        lo, hi = self.group_thresholds
        if not 0 < lo < hi:
            raise ConfigError(f"group_thresholds must satisfy 0 < lo < hi, got {self.group_thresholds}")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["group_thresholds"] = list(self.group_thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SampleBatch:
    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.sample_ids)
        if self.features.shape[0] != n or self.labels.shape[0] != n:
            raise DimensionError("features, labels and sample_ids disagree on N")
        if self.labels.size and (self.labels.sum(axis=1) > 1).any():
            raise DataError("label rows must be one-hot or all-zero")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def equals(self, other: "SampleBatch") -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.sample_ids, other.sample_ids)
        )


@dataclass
class ClassGroups:
    assignment: dict[int, str]

    def members(self, group: str) -> list[int]:
        return sorted(c for c, g in self.assignment.items() if g == group)

    def to_dict(self) -> dict:
        return {str(k): v for k, v in sorted(self.assignment.items())}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassGroups":
        return cls({int(k): v for k, v in d.items()})


def assign_groups(counts: Sequence[int], thresholds: tuple[int, int]) -> ClassGroups:
    """Bucket classes by count: ``< lo`` rare, ``[lo, hi)`` common, ``>= hi`` frequent."""
    lo, hi = thresholds
    if not 0 < lo < hi:
        raise ConfigError(f"inconsistent thresholds {thresholds}")
    out = {}
    for k, c in enumerate(counts):
        out[k] = RARE if c < lo else COMMON if c < hi else FREQUENT
    return ClassGroups(out)


def _stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def class_centers(spec: DatasetSpec) -> np.ndarray:
    centers = np.empty((spec.num_classes, spec.feature_dim))
    for k in range(spec.num_classes):
        v = _stream(spec.seed, _CENTERS, k).standard_normal(spec.feature_dim)
        centers[k] = spec.center_separation * v / np.linalg.norm(v)
    return centers


def _split_sizes(n: int) -> tuple[int, int]:
    n_test = min(n, max(1, int(round(TEST_FRACTION * n))))
    return n - n_test, n_test


def generate(spec: DatasetSpec) -> tuple[SampleBatch, SampleBatch, ClassGroups]:
    """Build the train/test batches and class groups for ``spec``.

    Sample ids are global and stable: class ``k`` owns a contiguous id range in
    count order, background samples come last.
    """
    spec.validate()
    C, D = spec.num_classes, spec.feature_dim
    std = math.sqrt(spec.covariance_scale)
    centers = class_centers(spec)

    train_parts, test_parts = [], []
    next_id = 0

    def add(x: np.ndarray, label: int | None, split_key: int) -> None:
        nonlocal next_id
        n = x.shape[0]
        y = np.zeros((n, C))
        if label is not None:
            y[:, label] = 1.0
        ids = np.arange(next_id, next_id + n, dtype=np.int64)
        next_id += n
        perm = _stream(spec.seed, _SPLIT, split_key).permutation(n)
        n_train, _ = _split_sizes(n)
        tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        train_parts.append((x[tr], y[tr], ids[tr]))
        test_parts.append((x[te], y[te], ids[te]))

    for k, n in enumerate(spec.counts):
        noise = _stream(spec.seed, _SAMPLES, k).standard_normal((n, D))
        add(centers[k] + std * noise, k, k)

    if spec.background_count:
        lo = centers.min(axis=0) - 3.0 * std
        hi = centers.max(axis=0) + 3.0 * std
        bg = _stream(spec.seed, _BACKGROUND, 0).uniform(lo, hi, size=(spec.background_count, D))
        add(bg, None, C)

    def cat(parts) -> SampleBatch:
        return SampleBatch(
            np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]),
        )

    groups = assign_groups(spec.counts, spec.group_thresholds)
    return cat(train_parts), cat(test_parts), groups


def csv_header(feature_dim: int, num_classes: int) -> list[str]:
    return ["id"] + [f"f{j}" for j in range(feature_dim)] + [f"y{i}" for i in range(num_classes)]


def save_csv(batch: SampleBatch, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(batch.feature_dim, batch.num_classes))
        for sid, x, y in zip(batch.sample_ids, batch.features, batch.labels):
            # repr() of a float64 is the shortest string that round-trips
            w.writerow([int(sid)] + [repr(float(v)) for v in x] + [int(v) for v in y])


def load_csv(path, num_classes: int | None = None) -> SampleBatch:
    """Read a batch written by :func:`save_csv`.

    Feature/label columns are identified from the header. Pass
    ``num_classes`` to enforce the label column count.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such dataset file: {path}")
    with path.open(newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise ParseError("empty file, missing header", 0) from None
        if not header or header[0] != "id":
            raise ParseError("header must start with 'id'", 1)
        fcols = [h for h in header[1:] if h.startswith("f")]
        ycols = [h for h in header[1:] if h.startswith("y")]
        D, C = len(fcols), len(ycols)
        if header != csv_header(D, C):
            raise ParseError("header must be id,f0..f{D-1},y0..y{C-1}", 1)
        if num_classes is not None and C != num_classes:
            raise ParseError(f"expected {num_classes} label columns, found {C}", 1)
        ids, feats, labels = [], [], []
        for lineno, row in enumerate(rows, start=2):
            if len(row) != 1 + D + C:
                raise ParseError(f"expected {1 + D + C} fields, found {len(row)}", lineno)
            try:
                ids.append(int(row[0]))
                feats.append([float(v) for v in row[1 : 1 + D]])
                lab = [int(v) for v in row[1 + D :]]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if any(v not in (0, 1) for v in lab) or sum(lab) > 1:
                raise ParseError("labels must be one-hot or all-zero", lineno)
            labels.append(lab)
    return SampleBatch(
        np.asarray(feats, dtype=np.float64).reshape(len(ids), D),
        np.asarray(labels, dtype=np.float64).reshape(len(ids), C),
        np.asarray(ids, dtype=np.int64),
    )


def save_dataset(out_dir, spec: DatasetSpec | None, train: SampleBatch, test: SampleBatch,
                 groups: ClassGroups) -> None:
    """Write ``train.csv``, ``test.csv`` and the ``dataset.json`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_csv(train, out_dir / "train.csv")
    save_csv(test, out_dir / "test.csv")
    manifest = {"spec": spec.to_dict() if spec else None, "groups": groups.to_dict()}
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(src) -> tuple[SampleBatch, SampleBatch, ClassGroups]:
    """Load a directory produced by :func:`save_dataset`."""
    src = Path(src)
    meta_path = src / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"missing dataset manifest {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        groups = ClassGroups.from_dict(meta["groups"])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"bad dataset manifest {meta_path}: {exc}") from None
    C = len(groups.assignment)
    return load_csv(src / "train.csv", C), load_csv(src / "test.csv", C), groups
