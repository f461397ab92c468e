"""Datasets of fixed-width feature vectors with oracle-masked labels.

Covers NDJSON/CSV ingestion, z-score normalization, synthetic Gaussian-blob
pools with label noise, k-fold splitting, and the label oracle that hides
ground truth until the learner asks for it.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    """Structured file-format error; carries the offending line number."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass
class Sample:
    id: str
    features: np.ndarray
    label: int | None = None


class Dataset:
    """Ordered, immutable-by-convention collection of samples."""

    def __init__(
        self,
        samples: list[Sample],
        class_count: int,
        class_names: list[str] | None = None,
    ):
        if not samples:
            raise ValueError("dataset must be nonempty")
        dim = samples[0].features.shape[0]
        seen = set()
        for s in samples:
            if s.features.shape != (dim,):
                raise ValueError(f"feature width differs for sample {s.id!r}")
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.label is not None and not 0 <= s.label < class_count:
                raise ValueError(f"label {s.label} outside [0, {class_count})")
        self.samples = samples
        self.class_count = class_count
        self.feature_dim = dim
        self.class_names = class_names

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def feature_matrix(self) -> np.ndarray:
        return np.stack([s.features for s in self.samples])

    def labels(self) -> np.ndarray:
        missing = [s.id for s in self.samples if s.label is None]
        if missing:
            raise ValueError(f"sample {missing[0]!r} is unlabeled")
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    def subset(self, ids: list[str]) -> "Dataset":
        index = self.by_id()
        return Dataset(
            [index[i] for i in ids], self.class_count, self.class_names
        )

    def replace_samples(self, samples: list[Sample]) -> "Dataset":
        return Dataset(samples, self.class_count, self.class_names)


def _parse_features(raw, path, line) -> np.ndarray:
    try:
        feats = np.array([float(v) for v in raw], dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(path, line, "features must be a list of numbers")
    if feats.ndim != 1 or feats.size == 0:
        raise ParseError(path, line, "features must be a nonempty list")
    if not np.isfinite(feats).all():
        raise ParseError(path, line, "non-finite feature value")
    return feats


def load_dataset(path, fmt: str | None = None, class_names: list[str] | None = None) -> Dataset:
    """Load an NDJSON or CSV dataset, preserving file order.

    Labels are strings in the files; they map to class ids through
    class_names (given, or inferred as the sorted set of labels seen).
    """
    path = str(path)
    if fmt is None:
        fmt = "csv" if path.endswith(".csv") else "ndjson"
    if fmt not in ("ndjson", "csv"):
        raise ValueError(f"unknown dataset format {fmt!r}")

    rows: list[tuple[int, str, str | None, np.ndarray]] = []
    if fmt == "ndjson":
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(path, line_no, f"invalid JSON ({exc.msg})")
                if not isinstance(obj, dict) or "id" not in obj or "features" not in obj:
                    raise ParseError(path, line_no, "expected object with id/label/features")
                label = obj.get("label")
                if label is not None and not isinstance(label, str):
                    raise ParseError(path, line_no, "label must be a string or null")
                rows.append(
                    (line_no, str(obj["id"]), label, _parse_features(obj["features"], path, line_no))
                )
    else:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError(path, 1, "empty CSV file")
            if header[:2] != ["id", "label"]:
                raise ParseError(path, 1, "CSV header must start with id,label")
            width = len(header) - 2
            for line_no, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise ParseError(
                        path, line_no, f"expected {len(header)} fields, got {len(rec)}"
                    )
                label = rec[1] if rec[1] != "" else None
                feats = _parse_features(rec[2:], path, line_no)
                if feats.size != width:
                    raise ParseError(path, line_no, "ragged feature row")
                rows.append((line_no, rec[0], label, feats))

    if not rows:
        raise ParseError(path, 1, "dataset file holds no samples")
    dim = rows[0][3].size
    for line_no, _, _, feats in rows:
        if feats.size != dim:
            raise ParseError(
                path, line_no, f"ragged row: {feats.size} features, expected {dim}"
            )
    seen: set[str] = set()
    for line_no, sid, _, _ in rows:
        if sid in seen:
            raise ParseError(path, line_no, f"duplicate id {sid!r}")
        seen.add(sid)

    observed = sorted({label for _, _, label, _ in rows if label is not None})
    if class_names is None:
        names = observed
    else:
        names = list(class_names)
        known = set(names)
        for line_no, _, label, _ in rows:
            if label is not None and label not in known:
                raise ParseError(path, line_no, f"unknown label string {label!r}")
    index = {name: i for i, name in enumerate(names)}
    samples = [
        Sample(sid, feats, index[label] if label is not None else None)
        for _, sid, label, feats in rows
    ]
    return Dataset(samples, class_count=max(len(names), 1), class_names=names or None)


def write_dataset(data: Dataset, path, fmt: str | None = None) -> None:
    """Serialize a dataset; floats use repr so a reload is bit-exact."""
    path = str(path)
    if fmt is None:
        fmt = "csv" if path.endswith(".csv") else "ndjson"
    names = data.class_names or [str(i) for i in range(data.class_count)]
    if fmt == "ndjson":
        with open(path, "w", encoding="utf-8") as fh:
            for s in data:
                obj = {
                    "id": s.id,
                    "label": None if s.label is None else names[s.label],
                    "features": [float(v) for v in s.features],
                }
                fh.write(json.dumps(obj) + "\n")
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "label"] + [f"f{i}" for i in range(data.feature_dim)])
            for s in data:
                label = "" if s.label is None else names[s.label]
                writer.writerow([s.id, label] + [repr(float(v)) for v in s.features])
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")


@dataclass
class NormStats:
    mean: np.ndarray
    scale: np.ndarray  # std, or 1.0 where std < 1e-12 (center-only dims)


def zscore_normalize(pool: Dataset) -> tuple[Dataset, NormStats]:
    """Per-dimension z-scoring fit on the pool; reuse the stats for other splits."""
    x = pool.feature_matrix()
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    scale = np.where(std < 1e-12, 1.0, std)
    stats = NormStats(mean=mean, scale=scale)
    return apply_normalization(pool, stats), stats


def apply_normalization(data: Dataset, stats: NormStats) -> Dataset:
    return data.replace_samples(
        [
            Sample(s.id, (s.features - stats.mean) / stats.scale, s.label)
            for s in data
        ]
    )


@dataclass
class SynthConfig:
    classes: int = 4
    dim: int = 32
    per_class: int = 500
    separation: float = 2.5
    noise_rate: float = 0.10
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.dim < self.classes:
            raise ValueError("dim must be >= classes (equidistant means need the room)")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ValueError("noise_rate must lie in [0, 0.5)")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")


@dataclass
class SynthTruth:
    """Generator trace kept beside a synthetic pool for test oracles."""

    means: np.ndarray  # (classes, dim)
    blob_labels: dict[str, int]
    flips: list[dict]  # [{"id", "from", "to"}]

    def to_json(self) -> dict:
        return {
            "means": [[float(v) for v in row] for row in self.means],
            "blob_labels": self.blob_labels,
            "flips": self.flips,
        }


def _simplex_means(classes: int, dim: int, separation: float, rng) -> np.ndarray:
    # Regular simplex scaled to pairwise distance `separation`, then randomly
    # rotated so the class signal spreads across every coordinate.
    base = np.zeros((classes, dim))
    for i in range(classes):
        base[i, i] = separation / math.sqrt(2.0)
    base -= base.mean(axis=0)
    gauss = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(gauss)
    q *= np.sign(np.diag(r))  # fix sign ambiguity for determinism
    return base @ q.T


def synth_pool(config: SynthConfig) -> tuple[Dataset, SynthTruth]:
    """Gaussian blobs at mutually equidistant means with uniform label flips."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    c, d, n_per = config.classes, config.dim, config.per_class
    means = _simplex_means(c, d, config.separation, rng)
    n = c * n_per
    width = len(str(c - 1))
    class_names = [f"class_{i:0{width}d}" for i in range(c)]
    id_width = len(str(n - 1))

    samples: list[Sample] = []
    blob_labels: dict[str, int] = {}
    for ci in range(c):
        feats = means[ci] + rng.standard_normal((n_per, d))
        for j in range(n_per):
            sid = f"s{ci * n_per + j:0{id_width}d}"
            samples.append(Sample(sid, feats[j], ci))
            blob_labels[sid] = ci

    n_flips = int(math.floor(config.noise_rate * n + 0.5))
    flips: list[dict] = []
    if n_flips:
        flip_idx = rng.choice(n, size=n_flips, replace=False)
        for idx in sorted(int(i) for i in flip_idx):
            s = samples[idx]
            others = [k for k in range(c) if k != s.label]
            new_label = int(others[rng.integers(len(others))])
            flips.append({"id": s.id, "from": int(s.label), "to": new_label})
            s.label = new_label

    data = Dataset(samples, class_count=c, class_names=class_names)
    return data, SynthTruth(means=means, blob_labels=blob_labels, flips=flips)


@dataclass
class SplitSpec:
    fold_count: int = 5
    fold_index: int = 0
    val_fraction: float = 0.10
    seed: int = 0

    def validate(self) -> None:
        if self.fold_count < 2:
            raise ValueError("fold_count must be >= 2")
        if not 0 <= self.fold_index < self.fold_count:
            raise ValueError("fold_index must lie in [0, fold_count)")
        if not 0.0 < self.val_fraction <= 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5]")


def kfold_split(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """(train, validation, test): test is the designated fold, validation a
    seeded random fraction of the remainder. The three parts partition the input."""
    spec.validate()
    n = len(data)
    if spec.fold_count > n:
        raise ValueError(f"fold_count {spec.fold_count} exceeds sample count {n}")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    folds = np.array_split(perm, spec.fold_count)
    test_idx = folds[spec.fold_index]
    rest = np.concatenate(
        [folds[i] for i in range(spec.fold_count) if i != spec.fold_index]
    )
    val_count = max(1, int(math.floor(spec.val_fraction * rest.size + 0.5)))
    val_idx, train_idx = rest[:val_count], rest[val_count:]
    ids = data.ids()
    pick = lambda idx: data.subset([ids[i] for i in idx])
    return pick(train_idx), pick(val_idx), pick(test_idx)


class LabelOracle:
    """Holds hidden labels; reveals them only on request and counts reveals."""

    def __init__(self, labels: dict[str, int]):
        self._labels = dict(labels)
        self._revealed: set[str] = set()

    def __len__(self) -> int:
        return len(self._labels)

    @property
    def reveal_count(self) -> int:
        return len(self._revealed)

    def reveal(self, ids) -> dict[str, int]:
        out = {}
        for sid in ids:
            if sid not in self._labels:
                raise KeyError(f"unknown sample id {sid!r}")
            self._revealed.add(sid)
            out[sid] = self._labels[sid]
        return out


def make_pool(data: Dataset) -> tuple[Dataset, LabelOracle]:
    """Strip labels out of a dataset into an oracle; the pool itself is unlabeled."""
    labels = {s.id: s.label for s in data if s.label is not None}
    if len(labels) != len(data):
        raise ValueError("pool construction requires a fully labeled dataset")
    pool = data.replace_samples(
        [Sample(s.id, s.features, None) for s in data]
    )
    return pool, LabelOracle(labels)
