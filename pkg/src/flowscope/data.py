"""Finite datasets: the empirical mixture the oracle velocity is built from."""

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from torch import Tensor

from flowscope.errors import FormatError, InvalidInputError
from flowscope.utils import RichLogger, format_float

logger = RichLogger(level=os.getenv("LOG_LEVEL", "INFO"))

BINARY_MAGIC = b"FSDS"
BINARY_VERSION = 1
_BINARY_HEADER = struct.Struct("<4sBQQB")


class PointSet(Protocol):
    """Anything the oracle can average over: a dataset or a class view."""

    @property
    def points(self) -> Tensor: ...  # noqa: D102

    @property
    def dim(self) -> int: ...  # noqa: D102

    def __len__(self) -> int: ...  # noqa: D105


def _first_nonfinite(points: Tensor) -> tuple[int, int] | None:
    bad = (~torch.isfinite(points)).nonzero()
    if bad.numel() == 0:
        return None
    return int(bad[0, 0]), int(bad[0, 1])


@dataclass(frozen=True, eq=False)
class Dataset:
    """N points in D dimensions with optional class labels.

    Args:
        points: N x D matrix, stored as float64.
        labels: Optional length-N class ids, contiguous from 0.
        name: Free-form name used in logs and sweep parameters.
    """

    points: Tensor
    labels: Tensor | None = None
    name: str = "dataset"
    rms_norm: float = field(init=False)

    def __post_init__(self) -> None:
        """Validate the points and labels and cache the RMS norm."""
        points = torch.as_tensor(self.points, dtype=torch.float64)
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise InvalidInputError(f"Dataset points must be an N x D matrix with N, D >= 1, got {tuple(points.shape)}")
        bad = _first_nonfinite(points)
        if bad is not None:
            raise InvalidInputError(f"Dataset entry at row {bad[0]}, column {bad[1]} is not finite.")
        points = points.detach().clone()
        object.__setattr__(self, "points", points)

        if self.labels is not None:
            labels = torch.as_tensor(self.labels, dtype=torch.int64).flatten().clone()
            if labels.numel() != points.shape[0]:
                raise InvalidInputError(f"Expected {points.shape[0]} labels, got {labels.numel()}.")
            present = torch.unique(labels)
            if present.min().item() != 0 or present.numel() != int(present.max().item()) + 1:
                raise InvalidInputError("Class labels must be contiguous from 0.")
            object.__setattr__(self, "labels", labels)

        object.__setattr__(self, "rms_norm", math.sqrt(points.square().sum(dim=1).mean().item()))

    def __len__(self) -> int:
        """Number of points N."""
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        """Dimensionality D."""
        return self.points.shape[1]

    @property
    def num_classes(self) -> int:
        """Number of classes (0 for an unlabeled dataset)."""
        return 0 if self.labels is None else int(self.labels.max().item()) + 1

    def mean(self) -> Tensor:
        """Mean point."""
        return self.points.mean(dim=0)


@dataclass(frozen=True, eq=False)
class ClassView:
    """Read-only view over the rows of one class.

    Args:
        parent: Labeled dataset the view selects from.
        class_id: Class id y.
        indices: Row indices I_y into ``parent``.
    """

    parent: Dataset
    class_id: int
    indices: Tensor

    def __len__(self) -> int:
        """Number of rows in the class."""
        return self.indices.numel()

    @property
    def points(self) -> Tensor:
        """Rows of the parent with label ``class_id``."""
        return self.parent.points.index_select(0, self.indices)

    @property
    def dim(self) -> int:
        """Dimensionality D."""
        return self.parent.dim

    def mean(self) -> Tensor:
        """Class mean."""
        return self.points.mean(dim=0)


def _check_count(value: int, name: str) -> int:
    if int(value) != value or value < 1:
        raise InvalidInputError(f"{name} must be a positive integer, got {value}.")
    return int(value)


def gen_gaussian(n: int, d: int, seed: int) -> Dataset:
    """``n`` i.i.d. standard-normal points in ``d`` dimensions."""
    n, d = _check_count(n, "n"), _check_count(d, "d")
    generator = torch.Generator().manual_seed(int(seed))
    points = torch.randn(n, d, generator=generator, dtype=torch.float64)
    return Dataset(points, name=f"gaussian_n{n}_d{d}")


def gen_mixture(centers: Tensor, spread: float, n_per_class: int, seed: int) -> Dataset:
    """Isotropic Gaussian clusters around ``centers``, labeled by centre index."""
    centers = torch.as_tensor(centers, dtype=torch.float64)
    if centers.ndim != 2 or centers.shape[0] < 1:
        raise InvalidInputError(f"centers must be a K x D matrix with K >= 1, got {tuple(centers.shape)}.")
    if not torch.isfinite(centers).all():
        raise InvalidInputError("centers must be finite.")
    if not (math.isfinite(spread) and spread > 0):
        raise InvalidInputError(f"spread must be positive, got {spread}.")
    n_per_class = _check_count(n_per_class, "n_per_class")

    k = centers.shape[0]
    generator = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(k * n_per_class, centers.shape[1], generator=generator, dtype=torch.float64)
    points = centers.repeat_interleave(n_per_class, dim=0) + spread * noise
    labels = torch.arange(k).repeat_interleave(n_per_class)
    return Dataset(points, labels, name=f"mixture_k{k}_d{centers.shape[1]}")


def gen_ring(k: int, radius: float, spread: float, n_per_class: int, seed: int) -> Dataset:
    """``k`` clusters evenly spaced on a circle of the given radius (2-D)."""
    k = _check_count(k, "k")
    angles = 2 * math.pi * torch.arange(k, dtype=torch.float64) / k
    centers = radius * torch.stack([torch.cos(angles), torch.sin(angles)], dim=1)
    dataset = gen_mixture(centers, spread, n_per_class, seed)
    return Dataset(dataset.points, dataset.labels, name=f"ring_k{k}")


def normalize(dataset: Dataset) -> Dataset:
    """Per-coordinate zero mean and unit (population) variance.

    Coordinates with zero variance are mapped to 0.
    """
    if len(dataset) < 2:
        raise InvalidInputError(f"normalize needs at least 2 points, got {len(dataset)}.")
    mean = dataset.points.mean(dim=0)
    std = dataset.points.std(dim=0, correction=0)
    centered = dataset.points - mean
    safe_std = torch.where(std > 0, std, torch.ones_like(std))
    points = torch.where(std > 0, centered / safe_std, torch.zeros_like(centered))
    return Dataset(points, dataset.labels, name=dataset.name)


def _check_query(dataset: PointSet, x: Tensor) -> Tensor:
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.ndim not in (1, 2):
        raise InvalidInputError(f"Expected a D-vector or a B x D matrix of queries, got shape {tuple(x.shape)}.")
    if x.shape[-1] != dataset.dim:
        raise InvalidInputError(f"Query has dimension {x.shape[-1]}, dataset has {dataset.dim}.")
    return x


def nearest_neighbor_batch(dataset: PointSet, queries: Tensor, chunk_size: int = 1024) -> tuple[Tensor, Tensor]:
    """Exhaustive nearest-neighbor scan for a B x D matrix of queries.

    Returns:
        Row indices (ties broken by the lowest index) and Euclidean distances.
    """
    queries = _check_query(dataset, queries)
    if queries.ndim == 1:
        queries = queries.unsqueeze(0)
    points = dataset.points
    indices, distances = [], []
    for chunk in torch.split(queries, chunk_size):
        dist = torch.cdist(chunk, points, compute_mode="donot_use_mm_for_euclid_dist")
        idx = dist.argmin(dim=1)
        indices.append(idx)
        distances.append(dist.gather(1, idx.unsqueeze(1)).squeeze(1))
    return torch.cat(indices), torch.cat(distances)


def nearest_neighbor(dataset: PointSet, x: Tensor) -> tuple[int, float]:
    """Index of the closest row to ``x`` and its Euclidean distance."""
    x = _check_query(dataset, x)
    if x.ndim != 1:
        raise InvalidInputError(f"nearest_neighbor expects a single D-vector, got shape {tuple(x.shape)}.")
    idx, dist = nearest_neighbor_batch(dataset, x.unsqueeze(0))
    return int(idx[0]), float(dist[0])


def class_subset(dataset: Dataset, y: int) -> ClassView:
    """View over the rows with label ``y``."""
    if dataset.labels is None:
        raise InvalidInputError(f"Dataset '{dataset.name}' has no labels.")
    if int(y) != y or not 0 <= y < dataset.num_classes:
        raise InvalidInputError(f"Unknown class id {y}; dataset has {dataset.num_classes} classes.")
    indices = (dataset.labels == int(y)).nonzero().flatten()
    return ClassView(dataset, int(y), indices)


def class_counts(dataset: Dataset) -> Tensor:
    """Number of rows per class."""
    if dataset.labels is None:
        raise InvalidInputError(f"Dataset '{dataset.name}' has no labels.")
    return torch.bincount(dataset.labels, minlength=dataset.num_classes)


def _infer_format(path: str | Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("csv", "binary"):
            raise InvalidInputError(f"Unknown dataset format '{fmt}', expected 'csv' or 'binary'.")
        return fmt
    return "csv" if Path(path).suffix.lower() == ".csv" else "binary"


def save(dataset: Dataset, path: str | Path, fmt: str | None = None) -> None:
    """Write a dataset as CSV or as the FSDS binary container."""
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        header = [f"dim_{j}" for j in range(dataset.dim)] + (["label"] if dataset.labels is not None else [])
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            labels = dataset.labels.tolist() if dataset.labels is not None else None
            for i, row in enumerate(dataset.points.tolist()):
                values = [format_float(v) for v in row]
                if labels is not None:
                    values.append(str(labels[i]))
                writer.writerow(values)
    else:
        n, d = dataset.points.shape
        has_labels = dataset.labels is not None
        with open(path, "wb") as f:
            f.write(_BINARY_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, n, d, int(has_labels)))
            f.write(dataset.points.numpy().astype("<f8").tobytes())
            if has_labels:
                f.write(dataset.labels.numpy().astype("<u4").tobytes())
    logger.debug(f"Saved dataset '{dataset.name}' ({len(dataset)} x {dataset.dim}) to {path} as {fmt}")


def _load_csv(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header:
            raise FormatError(f"Empty dataset file {path}", row=1)
        has_labels = header[-1] == "label"
        d = len(header) - int(has_labels)
        if d < 1 or header[:d] != [f"dim_{j}" for j in range(d)]:
            raise FormatError(f"Malformed header in {path}, expected dim_0,...,dim_{{D-1}}[,label]", row=1)
        rows, labels = [], []
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"Expected {len(header)} fields, found {len(row)}", row=row_number)
            values = []
            for column, value in enumerate(row[:d]):
                try:
                    parsed = float(value)
                except ValueError as err:
                    raise FormatError(f"Cannot parse {value!r} as a number", row=row_number, column=column) from err
                if not math.isfinite(parsed):
                    raise FormatError("Non-finite entry", row=row_number, column=column)
                values.append(parsed)
            rows.append(values)
            if has_labels:
                try:
                    labels.append(int(row[d]))
                except ValueError as err:
                    raise FormatError(f"Cannot parse label {row[d]!r}", row=row_number, column=d) from err
    if not rows:
        raise FormatError(f"Dataset file {path} has no data rows", row=2)
    points = torch.tensor(rows, dtype=torch.float64)
    return Dataset(points, torch.tensor(labels) if has_labels else None, name=Path(path).stem)


def _load_binary(path: str | Path) -> Dataset:
    payload = Path(path).read_bytes()
    if len(payload) < _BINARY_HEADER.size:
        raise FormatError(f"Truncated header in {path}")
    magic, version, n, d, has_labels = _BINARY_HEADER.unpack_from(payload)
    if magic != BINARY_MAGIC:
        raise FormatError(f"Bad magic {magic!r} in {path}, expected {BINARY_MAGIC!r}")
    if version != BINARY_VERSION:
        raise FormatError(f"Unsupported dataset version {version} in {path}")
    if has_labels not in (0, 1):
        raise FormatError(f"Invalid has_labels flag {has_labels} in {path}")
    expected = _BINARY_HEADER.size + 8 * n * d + (4 * n if has_labels else 0)
    if len(payload) != expected:
        raise FormatError(f"Payload of {path} has {len(payload)} bytes, expected {expected}")

    offset = _BINARY_HEADER.size
    matrix = np.frombuffer(payload, dtype="<f8", count=n * d, offset=offset).reshape(n, d)
    points = torch.from_numpy(matrix.astype(np.float64))
    bad = _first_nonfinite(points)
    if bad is not None:
        raise FormatError("Non-finite entry", row=bad[0] + 1, column=bad[1])
    labels = None
    if has_labels:
        raw = np.frombuffer(payload, dtype="<u4", count=n, offset=offset + 8 * n * d)
        labels = torch.from_numpy(raw.astype(np.int64))
    return Dataset(points, labels, name=Path(path).stem)


def load(path: str | Path, fmt: str | None = None) -> Dataset:
    """Read a dataset written by :func:`save`."""
    fmt = _infer_format(path, fmt)
    try:
        dataset = _load_csv(path) if fmt == "csv" else _load_binary(path)
    except InvalidInputError as err:
        raise FormatError(f"Invalid dataset in {path}: {err}") from err
    logger.debug(f"Loaded dataset '{dataset.name}' ({len(dataset)} x {dataset.dim}) from {path}")
    return dataset
