"""Federated datasets: synthetic generation, splits, and CSV manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .rngdet import SeededStream

TASKS = ("softmax", "svm")
MODES = ("noniid", "iid", "hybrid")


class DataError(ValueError):
    """Raised for malformed or inconsistent dataset inputs."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class DeviceShard:
    device_id: int
    features: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """``(features, labels)`` rows for ``"train"``, ``"val"`` or ``"test"``."""
        idx = getattr(self, f"{name}_idx")
        return self.features[idx], self.labels[idx]


@dataclass(frozen=True, eq=False)
class FederatedDataset:
    shards: tuple[DeviceShard, ...]
    feature_dim: int
    num_classes: int
    task: str
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def num_devices(self) -> int:
        return len(self.shards)

    @property
    def device_ids(self) -> list[int]:
        return [s.device_id for s in self.shards]

    def total_samples(self) -> int:
        return sum(s.n for s in self.shards)

    def fingerprint(self) -> str:
        """Content hash over features and labels; split assignment is not included."""
        h = hashlib.sha256()
        h.update(f"{self.task}:{self.feature_dim}:{self.num_classes}".encode())
        for s in self.shards:
            h.update(str(s.device_id).encode())
            for arr in (s.features, s.labels):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def make_shard(device_id, features, labels, train_idx=None, val_idx=None, test_idx=None) -> DeviceShard:
    features = np.array(features, dtype=np.float64)
    labels = np.array(labels, dtype=np.int64)
    n = labels.shape[0]
    if features.ndim != 2 or features.shape[0] != n:
        raise DataError(f"device {device_id}: features shape {features.shape} does not match {n} labels")
    if train_idx is None:
        train_idx = np.arange(n)
    empty = np.empty(0, dtype=np.int64)
    idx = [np.array(i if i is not None else empty, dtype=np.int64) for i in (train_idx, val_idx, test_idx)]
    joined = np.concatenate(idx)
    if joined.size != n or not np.array_equal(np.sort(joined), np.arange(n)):
        raise DataError(f"device {device_id}: train/val/test indices do not partition {n} rows")
    return DeviceShard(int(device_id), _frozen(features), _frozen(labels), *map(_frozen, idx))


def make_dataset(shards, feature_dim: int, num_classes: int, task: str, provenance=None) -> FederatedDataset:
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    shards = tuple(shards)
    if not shards:
        raise DataError("dataset must contain at least one device")
    for s in shards:
        if s.features.shape[1] != feature_dim:
            raise DataError(f"device {s.device_id}: feature_dim {s.features.shape[1]} != {feature_dim}")
        _check_labels(s.labels, task, num_classes, f"device {s.device_id}")
    return FederatedDataset(shards, int(feature_dim), int(num_classes), task, dict(provenance or {}))


def _check_labels(labels: np.ndarray, task: str, num_classes: int, where: str) -> None:
    if task == "svm":
        bad = np.flatnonzero((labels != 1) & (labels != -1))
    else:
        bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise DataError(f"{where}: invalid label {labels[bad[0]]} at row {bad[0]}")


# --------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SyntheticSpec:
    num_devices: int = 100
    mode: str = "noniid"
    feature_dim: int = 60
    num_classes: int = 10
    size_min: int = 15
    size_exponent: float = 1.5
    size_max: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.num_devices < 1:
            raise DataError("num_devices must be >= 1")
        if self.mode not in MODES:
            raise DataError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.size_min < 3:
            raise DataError("size_min must be >= 3")
        if not self.size_exponent > 1:
            raise DataError("size_exponent must be > 1")
        if self.size_max < self.size_min:
            raise DataError("size_max must be >= size_min")
        if self.feature_dim < 1 or self.num_classes < 2:
            raise DataError("feature_dim must be >= 1 and num_classes >= 2")


def sizes_from_power_law(num_devices: int, size_min: int, size_exponent: float,
                         size_max: int, rng: SeededStream) -> np.ndarray:
    """Truncated Pareto sizes by inverse CDF: ``min(max, floor(min * U**(-1/(a-1))))``."""
    u = 1.0 - rng.uniform01(num_devices)  # (0, 1]
    raw = np.floor(size_min * u ** (-1.0 / (size_exponent - 1.0)))
    return np.minimum(raw, size_max).astype(np.int64)


def _draw_model(rng: SeededStream, spec: SyntheticSpec, u_mean: float, b_mean: float):
    C, d = spec.num_classes, spec.feature_dim
    W = u_mean + rng.gaussian(C * d).reshape(C, d)
    b = u_mean + rng.gaussian(C)
    v = b_mean + rng.gaussian(d)
    return W, b, v


def generating_params(spec: SyntheticSpec) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-device ``(W_k, b_k, v_k)`` used to generate ``spec``'s data.

    IID devices share one global triple drawn with zero means.  Non-IID
    device ``k`` draws ``u_k, B_k ~ N(0, 1)`` then ``W_k, b_k ~ N(u_k, 1)``
    and ``v_k ~ N(B_k, 1)`` elementwise.
    """
    m = spec.num_devices
    n_iid = {"iid": m, "noniid": 0, "hybrid": math.ceil(m / 2)}[spec.mode]
    shared = _draw_model(SeededStream(spec.seed, "synthetic:global"), spec, 0.0, 0.0) if n_iid else None
    params = []
    for k in range(m):
        if k < n_iid:
            params.append(shared)
        else:
            rng = SeededStream(spec.seed, f"synthetic:device:{k}")
            u_k = rng.gaussian()
            B_k = rng.gaussian()
            params.append(_draw_model(rng, spec, u_k, B_k))
    return params


def generate_synthetic(spec: SyntheticSpec) -> FederatedDataset:
    sizes = sizes_from_power_law(spec.num_devices, spec.size_min, spec.size_exponent,
                                 spec.size_max, SeededStream(spec.seed, "synthetic:sizes"))
    scale = np.sqrt(np.arange(1, spec.feature_dim + 1, dtype=np.float64) ** -1.2)
    shards = []
    for k, ((W, b, v), n_k) in enumerate(zip(generating_params(spec), sizes)):
        rng = SeededStream(spec.seed, f"synthetic:samples:{k}")
        X = v + scale * rng.gaussian(int(n_k) * spec.feature_dim).reshape(n_k, spec.feature_dim)
        # softmax is monotone, so argmax of the scores; np.argmax breaks ties low
        y = np.argmax(X @ W.T + b, axis=1)
        shards.append(make_shard(k, X, y))
    prov = {"generator": "synthetic", **asdict(spec)}
    return make_dataset(shards, spec.feature_dim, spec.num_classes, "softmax", prov)


# --------------------------------------------------------------------------
# splits and weights


def split_dataset(dataset: FederatedDataset, seed: int) -> FederatedDataset:
    """80/10/10 train/val/test per device; val and test sizes are ``floor(0.1 n_k)``."""
    shards = []
    for s in dataset.shards:
        perm = SeededStream(seed, f"split:device:{s.device_id}").permutation(s.n)
        n_hold = s.n // 10
        val = np.sort(perm[:n_hold])
        test = np.sort(perm[n_hold:2 * n_hold])
        train = np.sort(perm[2 * n_hold:])
        shards.append(make_shard(s.device_id, s.features, s.labels, train, val, test))
    prov = {**dataset.provenance, "split_seed": int(seed)}
    return replace(dataset, shards=tuple(shards), provenance=prov)


def sampling_weights(dataset: FederatedDataset) -> np.ndarray:
    """``p_k = n_k / n`` over training splits."""
    sizes = np.array([s.train_idx.size for s in dataset.shards], dtype=np.float64)
    total = sizes.sum()
    if total == 0:
        raise DataError("dataset has no training samples")
    return sizes / total


# --------------------------------------------------------------------------
# CSV manifest format


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(text)


def save_csv_manifest(dataset: FederatedDataset, path) -> Path:
    """Write ``manifest.json`` plus one CSV and split file per device.

    Features are written with ``repr`` (shortest round-trip decimal), so a
    reload reproduces them bit-exactly.
    """
    path = Path(path)
    root = path.parent
    devices = []
    header = ",".join([f"f{j}" for j in range(dataset.feature_dim)] + ["label"])
    for s in dataset.shards:
        rel = f"devices/device_{s.device_id:05d}.csv"
        lines = [header]
        for row, label in zip(s.features.tolist(), s.labels.tolist()):
            lines.append(",".join(map(repr, row)) + f",{label}")
        _write_text(root / rel, "\n".join(lines) + "\n")
        split = {"train": s.train_idx.tolist(), "val": s.val_idx.tolist(), "test": s.test_idx.tolist()}
        _write_text(root / (rel + ".split.json"), json.dumps(split) + "\n")
        devices.append({"id": s.device_id, "file": rel})
    manifest = {
        "task": dataset.task,
        "feature_dim": dataset.feature_dim,
        "num_classes": dataset.num_classes,
        "devices": devices,
    }
    _write_text(path, json.dumps(manifest, indent=2) + "\n")
    return path


def _load_device_csv(file: Path, d: int, task: str, num_classes: int):
    if not file.exists():
        raise DataError(f"device file not found: {file}")
    with open(file, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = [f"f{j}" for j in range(d)] + ["label"]
        if header != expected:
            raise DataError(f"{file}: header has {0 if header is None else len(header)} columns, expected "
                            f"f0..f{d - 1},label")
        feats, labels = [], []
        for row_no, row in enumerate(reader, start=1):
            if len(row) != d + 1:
                raise DataError(f"{file}: row {row_no} has {len(row)} columns, expected {d + 1}")
            try:
                feats.append([float(x) for x in row[:d]])
                label = int(row[d])
            except ValueError as exc:
                raise DataError(f"{file}: row {row_no}: {exc}") from None
            if task == "svm":
                ok = label in (-1, 1)
            else:
                ok = 0 <= label < num_classes
            if not ok:
                raise DataError(f"{file}: row {row_no}: invalid label {label} for task {task} "
                                f"with num_classes={num_classes}")
            labels.append(label)
    X = np.array(feats, dtype=np.float64).reshape(len(labels), d)
    if not np.all(np.isfinite(X)):
        raise DataError(f"{file}: non-finite feature value")
    return X, np.array(labels, dtype=np.int64)


def load_csv_manifest(path) -> FederatedDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
        manifest = json.loads(text)
        task = manifest["task"]
        d = int(manifest["feature_dim"])
        C = int(manifest["num_classes"])
        entries = manifest["devices"]
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise DataError(f"{path}: invalid JSON at byte offset {offset}: {exc.msg}") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 at byte offset {exc.start}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: missing or invalid manifest field: {exc}") from None
    if task not in TASKS:
        raise DataError(f"{path}: unknown task {task!r}")
    if task == "svm" and C != 2:
        raise DataError(f"{path}: svm task requires num_classes = 2")
    shards = []
    for n, entry in enumerate(entries):
        if not isinstance(entry, dict) or "id" not in entry or "file" not in entry:
            raise DataError(f"{path}: device entry {n} needs 'id' and 'file' fields")
        file = path.parent / entry["file"]
        X, y = _load_device_csv(file, d, task, C)
        split_file = file.with_name(file.name + ".split.json")
        if split_file.exists():
            try:
                sp = json.loads(split_file.read_text(encoding="utf-8"))
                shard = make_shard(entry["id"], X, y, sp["train"], sp["val"], sp["test"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{split_file}: malformed split file: {exc}") from None
            except DataError as exc:
                raise DataError(f"{split_file}: {exc}") from None
        else:
            shard = make_shard(entry["id"], X, y)
        shards.append(shard)
    ids = [s.device_id for s in shards]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate device ids")
    return make_dataset(shards, d, C, task, {"manifest": str(path)})
