"""Data model, descriptor file ingestion, and shared vector utilities.

Entities are bags of fixed-dimension real descriptors with a class label.
Datasets travel on disk as a tab-separated manifest plus one binary
descriptor file per entity; in memory everything is float64 numpy.
"""

from __future__ import annotations

import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist

DESCRIPTOR_MAGIC = b"DDLC"
DESCRIPTOR_VERSION = 1

_HEADER_RE = re.compile(r"^#dim=(\d+) classes=(\d+)\s*$")


class ManifestError(ValueError):
    """Malformed manifest text; carries the offending 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ValueError):
    """Data violates a structural invariant (dimension, label range, ...)."""


class ParameterError(ValueError):
    """An argument is outside its documented range."""


class InsufficientDataError(ValueError):
    """Fewer samples than the operation requires."""


class NumericError(ArithmeticError):
    """A numerical solve failed (singular system, degenerate normalization)."""


class StageError(RuntimeError):
    """A pipeline stage failed; wraps the cause and names the stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage[{stage}]: {cause}")
        self.stage = stage
        self.cause = cause


def as_matrix(rows, dim=None):
    """Coerce to a 2-D float64 array, optionally checking the column count."""
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValidationError(f"descriptors must be 2-D, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValidationError(f"descriptor dimension {arr.shape[1]} != expected {dim}")
    return arr


@dataclass(frozen=True)
class Entity:
    """One visual entity: an id, a class label, and a bag of descriptors."""

    id: str
    label: int
    descriptors: np.ndarray  # (alpha, d) float64

    def __post_init__(self):
        arr = as_matrix(self.descriptors)
        object.__setattr__(self, "descriptors", arr)
        if arr.shape[0] < 1:
            raise ValidationError(f"entity {self.id!r} has no descriptors")
        if not np.isfinite(arr).all():
            raise ValidationError(f"entity {self.id!r} contains non-finite values")
        if self.label < 0:
            raise ValidationError(f"entity {self.id!r} has negative label {self.label}")

    @property
    def dim(self):
        return self.descriptors.shape[1]

    @property
    def size(self):
        return self.descriptors.shape[0]


@dataclass(frozen=True)
class DescriptorDataset:
    """An ordered collection of labeled entities with a common dimension."""

    entities: list
    num_classes: int
    dim: int
    split_tag: str = "train"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.num_classes}")
        for e in self.entities:
            if e.dim != self.dim:
                raise ValidationError(
                    f"entity {e.id!r} has dimension {e.dim}, dataset expects {self.dim}"
                )
            if not 0 <= e.label < self.num_classes:
                raise ValidationError(
                    f"entity {e.id!r} label {e.label} outside [0, {self.num_classes})"
                )

    def __len__(self):
        return len(self.entities)

    def labels(self):
        return np.array([e.label for e in self.entities], dtype=np.int64)

    def by_class(self):
        """Entities grouped by label, keyed 0..L-1 (classes may be empty)."""
        groups = {l: [] for l in range(self.num_classes)}
        for e in self.entities:
            groups[e.label].append(e)
        return groups


def mean_pairwise_distance(descriptors):
    """Mean Euclidean distance over all unordered pairs."""
    arr = as_matrix(descriptors)
    if arr.shape[0] < 2:
        raise InsufficientDataError(
            f"need at least 2 descriptors for a pairwise distance, got {arr.shape[0]}"
        )
    return float(pdist(arr, "euclidean").mean())


def knn(query, corpus, t, exclude_index=None):
    """Indices of the t nearest corpus rows to query, by Euclidean distance.

    Ascending by distance; ties broken by ascending corpus index. When
    exclude_index is given, that corpus slot is skipped (exclusion is by
    index, not by value, so duplicate rows elsewhere are legal neighbors).
    """
    corpus = as_matrix(corpus)
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != corpus.shape[1]:
        raise ValidationError(
            f"query dimension {query.shape[0]} != corpus dimension {corpus.shape[1]}"
        )
    available = corpus.shape[0] - (1 if exclude_index is not None else 0)
    if not 1 <= t <= available:
        raise ParameterError(f"t={t} outside [1, {available}] for this corpus")
    d = cdist(query[None, :], corpus, "sqeuclidean")[0]
    if exclude_index is not None:
        d[exclude_index] = np.inf
    order = np.argsort(d, kind="stable")
    return order[:t]


def write_descriptor_file(path, rows):
    """Write a little-endian binary descriptor matrix (float32 payload)."""
    arr = as_matrix(rows)
    payload = np.ascontiguousarray(arr, dtype="<f4")
    n, d = payload.shape
    header = struct.pack("<4sIII", DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION, n, d)
    Path(path).write_bytes(header + payload.tobytes())


def read_descriptor_file(path):
    """Read a binary descriptor matrix as float64 (working precision)."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValidationError(f"{path}: truncated descriptor file")
    magic, version, n, d = struct.unpack_from("<4sIII", data)
    if magic != DESCRIPTOR_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != DESCRIPTOR_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * n * d
    if len(data) != expected:
        raise ValidationError(f"{path}: size {len(data)} != expected {expected}")
    arr = np.frombuffer(data, dtype="<f4", offset=16)
    return arr.astype(np.float64).reshape(n, d)


def parse_manifest(manifest_path):
    """Parse a manifest into (dim, num_classes, [(id, label, path), ...])."""
    manifest_path = Path(manifest_path)
    lines = manifest_path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestError("empty manifest", line=1)
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise ManifestError("expected header '#dim=<d> classes=<L>'", line=1)
    dim, num_classes = int(m.group(1)), int(m.group(2))
    entries = []
    for i, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ManifestError(
                f"expected 3 tab-separated fields, got {len(parts)}", line=i
            )
        entity_id, label_text, rel_path = parts
        try:
            label = int(label_text)
        except ValueError:
            raise ManifestError(f"label {label_text!r} is not an integer", line=i)
        entries.append((entity_id, label, rel_path))
    return dim, num_classes, entries


def load_dataset(manifest_path, split_tag="train"):
    """Load a dataset from a manifest plus its referenced descriptor files."""
    manifest_path = Path(manifest_path)
    dim, num_classes, entries = parse_manifest(manifest_path)
    base = manifest_path.parent
    entities = []
    for entity_id, label, rel_path in entries:
        if not 0 <= label < num_classes:
            raise ValidationError(
                f"entity {entity_id!r} label {label} outside [0, {num_classes})"
            )
        rows = read_descriptor_file(base / rel_path)
        if rows.shape[0] < 1:
            raise ValidationError(f"entity {entity_id!r} has no descriptors")
        if rows.shape[1] != dim:
            raise ValidationError(
                f"entity {entity_id!r} has dimension {rows.shape[1]}, manifest declares {dim}"
            )
        entities.append(Entity(entity_id, label, rows))
    return DescriptorDataset(entities, num_classes, dim, split_tag)


def save_dataset(dataset, manifest_path, data_dirname=None):
    """Write a dataset as manifest + one descriptor file per entity.

    Descriptor payloads are float32 on disk, so a load/save/load round trip
    is exact for data that originated from descriptor files.
    """
    manifest_path = Path(manifest_path)
    if data_dirname is None:
        data_dirname = manifest_path.stem + "_data"
    data_dir = manifest_path.parent / data_dirname
    data_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"#dim={dataset.dim} classes={dataset.num_classes}"]
    for i, e in enumerate(dataset.entities):
        if "\t" in e.id or "\n" in e.id:
            raise ValidationError(f"entity id {e.id!r} contains tab or newline")
        rel = f"{data_dirname}/e{i:05d}.desc"
        write_descriptor_file(manifest_path.parent / rel, e.descriptors)
        lines.append(f"{e.id}\t{e.label}\t{rel}")
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


def parallel_map(fn, items, threads=1):
    """Ordered map over items, optionally on a thread pool.

    Each item is processed independently and results are collected in input
    order, so the output is identical for any worker count.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
