"""Datasets, deterministic splits, synthetic generators, and the logits store.

Split membership is a pure function of (seed, sample index): position i of
the seeded PCG64 uniform stream decides the tag, so adding or removing
other samples never reshuffles existing ones. Defaults hold out 20% for
test and 10% of the remaining pool for validation.

The logits store decouples fusion and inference experiments from training:
one JSON Lines record per sample with the label and one logit vector per
exit. Floats are written with full decimal precision, so round trips are
exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, ParseError

SPLITS = ("train", "validation", "test")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split_tags: np.ndarray   # entries from SPLITS

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.size:
            raise DataError("Dataset: features must be (N, D) matching labels")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise DataError("Dataset: labels out of range")
        if not np.all(np.isfinite(self.features)):
            raise DataError("Dataset: non-finite feature values")

    @property
    def sample_count(self) -> int:
        return self.labels.size

    def split_indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(self.sample_count)
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        return np.nonzero(self.split_tags == split)[0]


def assign_splits(n: int, seed: int, test_fraction: float = 0.2,
                  validation_fraction: float = 0.1) -> np.ndarray:
    """Disjoint, exhaustive split tags; sample i's tag depends only on
    (seed, i). `validation_fraction` is taken from the non-test pool."""
    if not (0 <= test_fraction < 1 and 0 <= validation_fraction < 1):
        raise ConfigurationError("split fractions must lie in [0, 1)")
    u = np.random.default_rng(seed).random(n)
    tags = np.full(n, "train", dtype=object)
    test_cut = 1.0 - test_fraction
    val_cut = test_cut * (1.0 - validation_fraction)
    tags[u >= test_cut] = "test"
    tags[(u >= val_cut) & (u < test_cut)] = "validation"
    return tags


def gen_gaussian_mixture(class_count: int, dim: int, n_per_class: int,
                         separation: float, noise: float, seed: int,
                         test_fraction: float = 0.2,
                         validation_fraction: float = 0.1) -> Dataset:
    """Isotropic Gaussian blobs centered on a random orthonormal frame,
    scaled by `separation`. Reproducible from the seed alone."""
    if class_count < 2 or dim < 2 or n_per_class < 1:
        raise ConfigurationError("gen_gaussian_mixture: invalid sizes")
    if class_count > dim:
        raise ConfigurationError(
            "gen_gaussian_mixture: need dim >= class_count for an orthonormal frame")
    if separation <= 0:
        raise ConfigurationError("gen_gaussian_mixture: separation must be > 0")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))   # canonical sign, platform-stable
    centers = separation * q[:, :class_count].T
    labels = np.repeat(np.arange(class_count), n_per_class)
    features = centers[labels] + noise * rng.standard_normal((labels.size, dim))
    return Dataset(features=features, labels=labels, class_count=class_count,
                   split_tags=assign_splits(labels.size, seed, test_fraction,
                                            validation_fraction))


@dataclass(frozen=True)
class StoreRecord:
    id: str
    label: int
    exit_logits: list  # one (K,) float list/array per exit


@dataclass
class LogitsStore:
    records: list[StoreRecord] = field(default_factory=list)

    def __post_init__(self):
        self._validate()

    def _validate(self) -> None:
        if not self.records:
            return
        exits = len(self.records[0].exit_logits)
        k = len(self.records[0].exit_logits[0])
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DataError(f"LogitsStore: duplicate id {r.id!r}")
            seen.add(r.id)
            if len(r.exit_logits) != exits:
                raise DataError(
                    f"LogitsStore: record {r.id!r} has {len(r.exit_logits)} exits, "
                    f"expected {exits}")
            if any(len(v) != k for v in r.exit_logits):
                raise DataError(f"LogitsStore: record {r.id!r} has ragged logits")

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def exit_count(self) -> int:
        return len(self.records[0].exit_logits) if self.records else 0

    @property
    def class_count(self) -> int:
        return len(self.records[0].exit_logits[0]) if self.records else 0


def gen_complementary_store(class_count: int = 10, n: int = 1000,
                            margin: float = 4.0, seed: int = 0) -> LogitsStore:
    """Two-exit store with complementary specialists.

    Exit 1 is confident and correct on the lower half of the classes and
    uninformative elsewhere; exit 2 mirrors it on the upper half. Labels
    are balanced, order shuffled by the seed. Each exit alone decides half
    the samples; combining them decides all.

    Uninformative vectors are flat up to a tie-breaking epsilon on the
    exit's own specialty: an exactly-uniform vector would argmax to class 0
    under lowest-index tie-breaking and gift the upper-half exit every
    label-0 sample, inflating its single-exit accuracy past the half mark
    the construction is supposed to pin.
    """
    if n < 10 * class_count:
        raise ConfigurationError("gen_complementary_store: need n >= 10 * classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % class_count
    rng.shuffle(labels)
    half = class_count // 2
    eps = 1e-9
    records = []
    for i, label in enumerate(labels):
        first = np.zeros(class_count)
        second = np.zeros(class_count)
        first[0] = eps
        second[half] = eps
        if label < half:
            first[label] = margin
        else:
            second[label] = margin
        records.append(StoreRecord(id=f"s{i:06d}", label=int(label),
                                   exit_logits=[first.tolist(), second.tolist()]))
    return LogitsStore(records=records)


def store_write(store: LogitsStore, path) -> None:
    from .cli import atomic_write
    with atomic_write(path) as fh:
        for r in store:
            fh.write(json.dumps({"id": r.id, "label": r.label,
                                 "exit_logits": [list(map(float, v))
                                                 for v in r.exit_logits]},
                                sort_keys=True))
            fh.write("\n")


def store_read(path) -> LogitsStore:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(
                    f"logits store {path}: malformed JSON on line {lineno} "
                    f"(column {err.colno})") from err
            try:
                record = StoreRecord(id=str(obj["id"]), label=int(obj["label"]),
                                     exit_logits=[[float(x) for x in v]
                                                  for v in obj["exit_logits"]])
            except (KeyError, TypeError, ValueError) as err:
                raise ParseError(
                    f"logits store {path}: invalid record on line {lineno} "
                    f"({err})") from err
            records.append(record)
    try:
        return LogitsStore(records=records)
    except DataError as err:
        # re-locate consistency failures to a line number
        raise ParseError(f"logits store {path}: {err}") from err


def store_from_model(model, dataset: Dataset, split: str = "test") -> LogitsStore:
    """Dump per-exit logits for one split of a dataset."""
    idx = dataset.split_indices(split)
    if idx.size == 0:
        raise DataError(f"store_from_model: split {split!r} is empty")
    per_exit = model.predict_logits(dataset.features[idx])
    records = []
    for row, i in enumerate(idx):
        records.append(StoreRecord(
            id=f"{split[0]}{int(i):06d}", label=int(dataset.labels[i]),
            exit_logits=[per_exit[c][row].tolist()
                         for c in range(len(per_exit))]))
    return LogitsStore(records=records)


def _read_exact(fh, count: int, path, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ParseError(
            f"{path}: truncated {what} (wanted {count} bytes at offset "
            f"{fh.tell() - len(data)}, got {len(data)})")
    return data


def load_idx(images_path, labels_path, class_count: int = 10,
             seed: int = 0, test_fraction: float = 0.2,
             validation_fraction: float = 0.1) -> Dataset:
    """Load an IDX ubyte image/label pair (big-endian, MNIST convention).

    Pixels are scaled to [0, 1] and flattened row-major.
    """
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII",
                                                 _read_exact(fh, 16, images_path,
                                                             "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise ParseError(
                f"{images_path}: bad image magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_IMAGES_MAGIC:08x})")
        pixels = _read_exact(fh, count * rows * cols, images_path, "pixel data")
        if fh.read(1):
            raise ParseError(f"{images_path}: trailing bytes after pixel data")
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II",
                                           _read_exact(fh, 8, labels_path,
                                                       "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise ParseError(
                f"{labels_path}: bad label magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_LABELS_MAGIC:08x})")
        if label_count != count:
            raise ParseError(
                f"{labels_path}: {label_count} labels but {count} images")
        label_bytes = _read_exact(fh, label_count, labels_path, "label data")
        if fh.read(1):
            raise ParseError(f"{labels_path}: trailing bytes after label data")
    features = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64) / 255.0
    features = features.reshape(count, rows * cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= class_count:
        class_count = int(labels.max()) + 1
    return Dataset(features=features, labels=labels, class_count=class_count,
                   split_tags=assign_splits(count, seed, test_fraction,
                                            validation_fraction))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path,
              labels_path) -> None:
    """Inverse of `load_idx` for fixtures: images as (N, rows, cols) uint8."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(labels.tobytes())


def load_csv(path, seed: int = 0, test_fraction: float = 0.2,
             validation_fraction: float = 0.1) -> Dataset:
    """Load a `label,f0,f1,...` CSV into a Dataset."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("label,"):
            raise ParseError(f"{path}: line 1 must start with 'label,' header")
        width = len(header.strip().split(",")) - 1
        labels, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != width + 1:
                raise ParseError(
                    f"{path}: line {lineno} has {len(parts)} fields, "
                    f"expected {width + 1}")
            try:
                labels.append(int(parts[0]))
                rows.append([float(x) for x in parts[1:]])
            except ValueError as err:
                raise ParseError(f"{path}: line {lineno}: {err}") from err
    if not rows:
        raise ParseError(f"{path}: no data rows")
    labels = np.asarray(labels)
    if labels.min() < 0:
        raise DataError(f"{path}: negative labels")
    return Dataset(features=np.asarray(rows), labels=labels,
                   class_count=int(labels.max()) + 1,
                   split_tags=assign_splits(len(rows), seed, test_fraction,
                                            validation_fraction))
