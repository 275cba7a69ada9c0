"""Attribute schemas, sparsely grouped datasets, and batch scheduling.

A dataset keeps every example's image plus one label slot per attribute;
a missing label (-1) marks the example as "mixed" (unlabelled) for that
attribute. Grouped/mixed pools are derived views of the label array, so
the partition invariant (grouped ∪ mixed = all ids, disjoint) holds by
construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

UNLABELLED = -1

# sub-stream tags so every consumer of a seed draws independent values
_STREAM_SPARSIFY = 101
_STREAM_BALANCE = 103
_STREAM_SCHED_GROUPED = 107
_STREAM_SCHED_MIXED = 109
_STREAM_SCHED_VALUES = 113


class DataError(ValueError):
    """Malformed dataset, manifest, or labelling request."""


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute names with their value cardinalities."""

    attributes: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if len(self.attributes) < 1:
            raise DataError("schema needs at least one attribute")
        names = [n for n, _ in self.attributes]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate attribute names: {names}")
        for name, m in self.attributes:
            if m < 2:
                raise DataError(f"attribute {name!r} needs cardinality >= 2, got {m}")

    @classmethod
    def from_dict(cls, d: dict[str, int]) -> "AttributeSchema":
        return cls(tuple((str(k), int(v)) for k, v in d.items()))

    def to_dict(self) -> dict[str, int]:
        return {name: m for name, m in self.attributes}

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.attributes)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(m for _, m in self.attributes)

    @property
    def total_outputs(self) -> int:
        """Number of (attribute, value) heads, sum of all cardinalities."""
        return sum(self.cardinalities)

    def head_offset(self, attribute: int, value: int = 0) -> int:
        """Flat head index of (attribute, value), attributes in schema order."""
        self.check_value(attribute, value)
        return sum(self.cardinalities[:attribute]) + value

    def check_value(self, attribute: int, value: int) -> None:
        if not 0 <= attribute < self.n_attributes:
            raise DataError(
                f"attribute index {attribute} out of range for {self.n_attributes} attributes"
            )
        if not 0 <= value < self.cardinalities[attribute]:
            raise DataError(
                f"value {value} out of range for attribute "
                f"{self.names[attribute]!r} (cardinality {self.cardinalities[attribute]})"
            )


def check_image_size(size: int) -> int:
    if size < 32 or size > 128 or (size & (size - 1)) != 0:
        raise DataError(f"image size must be a power of two in [32, 128], got {size}")
    return size


def to_unit_tensor(images_u8: np.ndarray) -> torch.Tensor:
    """uint8 (N,H,W,C) in [0,255] -> float32 NCHW tensor in [-1,1]."""
    t = torch.from_numpy(np.ascontiguousarray(images_u8)).float()
    return t.permute(0, 3, 1, 2).div_(127.5).sub_(1.0)


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """float NCHW tensor in [-1,1] -> uint8 (N,H,W,C)."""
    arr = images.detach().clamp(-1.0, 1.0).add(1.0).mul(127.5)
    return arr.round().byte().permute(0, 2, 3, 1).numpy()


@dataclass
class SparselyGroupedDataset:
    """Examples with per-attribute labels; -1 marks an unlabelled slot.

    `images` is (N, H, W, C) uint8; `labels` is (N, n_attributes) int16.
    Instances are read-only after construction.
    """

    schema: AttributeSchema
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DataError("images must be (N,H,W,C) uint8")
        if self.labels.shape != (len(self.images), self.schema.n_attributes):
            raise DataError(
                f"labels shape {self.labels.shape} does not match "
                f"{len(self.images)} examples x {self.schema.n_attributes} attributes"
            )
        for j, m in enumerate(self.schema.cardinalities):
            col = self.labels[:, j]
            bad = np.flatnonzero((col >= m) | (col < UNLABELLED))
            if bad.size:
                raise DataError(
                    f"label {col[bad[0]]} out of range for attribute "
                    f"{self.schema.names[j]!r} at example {bad[0]}"
                )
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def grouped_index(self, attribute: int) -> dict[int, np.ndarray]:
        """Per-value example ids labelled for `attribute`."""
        col = self.labels[:, attribute]
        return {
            v: np.flatnonzero(col == v)
            for v in range(self.schema.cardinalities[attribute])
        }

    def mixed_index(self, attribute: int) -> np.ndarray:
        """Example ids unlabelled for `attribute`."""
        return np.flatnonzero(self.labels[:, attribute] == UNLABELLED)

    def mixed_union(self) -> np.ndarray:
        """Ids unlabelled for at least one attribute (the mixed stream's pool)."""
        return np.flatnonzero((self.labels == UNLABELLED).any(axis=1))

    def fully_labelled(self) -> bool:
        return bool((self.labels != UNLABELLED).all())

    def with_labels(self, labels: np.ndarray) -> "SparselyGroupedDataset":
        return SparselyGroupedDataset(self.schema, self.images, labels)

    def select_attributes(self, attributes: list[int]) -> "SparselyGroupedDataset":
        """Project onto a subset of attributes (images shared)."""
        schema = AttributeSchema(tuple(self.schema.attributes[j] for j in attributes))
        return SparselyGroupedDataset(
            schema, self.images, self.labels[:, attributes].copy()
        )

    def subset(self, ids: np.ndarray) -> "SparselyGroupedDataset":
        return SparselyGroupedDataset(
            self.schema, self.images[ids].copy(), self.labels[ids].copy()
        )

    def summary(self) -> dict:
        out: dict = {"examples": len(self), "image_size": self.image_size}
        for j, name in enumerate(self.schema.names):
            grouped = {v: int(ids.size) for v, ids in self.grouped_index(j).items()}
            out[name] = {"grouped": grouped, "mixed": int(self.mixed_index(j).size)}
        return out


@dataclass
class Batch:
    """One training batch; `attribute`/`labels` present iff kind == "grouped"."""

    kind: str  # "grouped" | "mixed"
    images: torch.Tensor  # float32 NCHW in [-1, 1]
    attribute: int | None = None
    labels: torch.Tensor | None = None  # int64 (b,)
    ids: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("grouped", "mixed"):
            raise DataError(f"unknown batch kind {self.kind!r}")
        if self.kind == "grouped" and (self.attribute is None or self.labels is None):
            raise DataError("grouped batches carry an attribute and labels")


def sparsify(
    dataset: SparselyGroupedDataset, per_group: int, seed: int
) -> SparselyGroupedDataset:
    """Keep exactly `per_group` labels per (attribute, value); erase the rest.

    Selection is uniform without replacement and deterministic in `seed`.
    The examples themselves are never removed, only their labels.
    """
    labels = dataset.labels.copy()
    for j in range(dataset.schema.n_attributes):
        for v, ids in dataset.grouped_index(j).items():
            if per_group > ids.size:
                raise DataError(
                    f"per_group={per_group} exceeds group size {ids.size} for "
                    f"attribute {dataset.schema.names[j]!r} value {v}"
                )
            rng = np.random.default_rng([seed, _STREAM_SPARSIFY, j, v])
            keep = rng.choice(ids.size, size=per_group, replace=False)
            drop = np.setdiff1d(ids, ids[keep])
            labels[drop, j] = UNLABELLED
    return dataset.with_labels(labels)


def subsample_group_labels(
    dataset: SparselyGroupedDataset, attribute: int, value: int, keep: int, seed: int
) -> SparselyGroupedDataset:
    """Shrink one (attribute, value) grouped pool to `keep` labelled examples."""
    ids = dataset.grouped_index(attribute).get(value)
    if ids is None or keep > ids.size:
        raise DataError(
            f"cannot keep {keep} labels for attribute "
            f"{dataset.schema.names[attribute]!r} value {value} (pool {0 if ids is None else ids.size})"
        )
    rng = np.random.default_rng([seed, _STREAM_SPARSIFY, attribute, value])
    kept = ids[rng.choice(ids.size, size=keep, replace=False)]
    labels = dataset.labels.copy()
    drop = np.setdiff1d(ids, kept)
    labels[drop, attribute] = UNLABELLED
    return dataset.with_labels(labels)


def balance_unbalanced(
    dataset: SparselyGroupedDataset, attribute: int, seed: int = 0
) -> SparselyGroupedDataset:
    """Undersample larger grouped pools of `attribute` down to the smallest one.

    Removed examples keep their images and other labels; they only lose the
    label for `attribute` and thereby join its mixed pool, so no information
    is discarded from the dataset.
    """
    index = dataset.grouped_index(attribute)
    sizes = {v: ids.size for v, ids in index.items()}
    for v, size in sizes.items():
        if size == 0:
            raise DataError(
                f"attribute {dataset.schema.names[attribute]!r} has an empty "
                f"group for value {v}; cannot balance"
            )
    target = min(sizes.values())
    labels = dataset.labels.copy()
    for v, ids in index.items():
        if ids.size == target:
            continue
        rng = np.random.default_rng([seed, _STREAM_BALANCE, attribute, v])
        keep = ids[rng.choice(ids.size, size=target, replace=False)]
        drop = np.setdiff1d(ids, keep)
        labels[drop, attribute] = UNLABELLED
    return dataset.with_labels(labels)


class BatchScheduler:
    """Deterministic grouped/mixed batch stream over a dataset.

    Emits grouped and mixed batches in a 1:1 alternation (all grouped when
    the mixed pool is empty); grouped batches cycle the attributes
    round-robin and draw values uniformly (or in exact proportions with
    `balanced_batches`). Pools are consumed without replacement and
    reshuffled every epoch; the whole sequence is a pure function of
    (dataset, batch_size, seed), and `state_dict`/`load_state_dict` resume
    it exactly.
    """

    def __init__(
        self,
        dataset: SparselyGroupedDataset,
        batch_size: int,
        seed: int,
        balanced_batches: bool = False,
    ):
        if len(dataset) == 0:
            raise DataError("cannot schedule batches over an empty dataset")
        if batch_size < 1:
            raise DataError("batch size must be positive")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.balanced_batches = balanced_batches
        self._cursors: dict[str, list[int]] = {}  # key -> [epoch, position]
        self._emitted = 0
        self._grouped_emitted = 0

    # -- deterministic pool iteration -------------------------------------

    def _pool_ids(self, key: str) -> np.ndarray:
        if key == "mixed":
            return self.dataset.mixed_union()
        _, j, v = key.split(":")
        return self.dataset.grouped_index(int(j))[int(v)]

    def _draw(self, key: str, count: int, stream: int) -> np.ndarray:
        ids = self._pool_ids(key)
        if ids.size == 0:
            raise DataError(f"pool {key!r} is empty")
        if key == "mixed":
            tag = [0, 0]
        else:
            tag = [int(p) for p in key.split(":")[1:]]
        epoch, pos = self._cursors.get(key, [0, 0])
        out = np.empty(count, dtype=np.int64)
        filled = 0
        while filled < count:
            rng = np.random.default_rng([self.seed, stream, *tag, epoch])
            order = rng.permutation(ids.size)
            take = min(count - filled, ids.size - pos)
            out[filled : filled + take] = ids[order[pos : pos + take]]
            filled += take
            pos += take
            if pos >= ids.size:
                epoch += 1
                pos = 0
        self._cursors[key] = [epoch, pos]
        return out

    def _grouped_values(self, attribute: int) -> np.ndarray:
        m = self.dataset.schema.cardinalities[attribute]
        b = self.batch_size
        if self.balanced_batches:
            counts = np.full(m, b // m)
            counts[: b % m] += 1
            return np.repeat(np.arange(m), counts)
        rng = np.random.default_rng(
            [self.seed, _STREAM_SCHED_VALUES, attribute, self._emitted]
        )
        return rng.integers(0, m, size=b)

    # -- public API ---------------------------------------------------------

    def next_batch(self) -> Batch:
        has_mixed = self.dataset.mixed_union().size > 0
        grouped_turn = (not has_mixed) or (self._emitted % 2 == 0)
        if grouped_turn:
            batch = self._next_grouped()
        else:
            batch = self._next_mixed()
        self._emitted += 1
        return batch

    def _next_grouped(self) -> Batch:
        schema = self.dataset.schema
        j = self._grouped_emitted % schema.n_attributes
        index = self.dataset.grouped_index(j)
        for v, ids in index.items():
            if ids.size == 0:
                raise DataError(
                    f"grouped pool empty for attribute {schema.names[j]!r} value {v}; "
                    "sparsify or balance the dataset before scheduling grouped batches"
                )
        values = self._grouped_values(j)
        ids = np.empty(self.batch_size, dtype=np.int64)
        for v in range(schema.cardinalities[j]):
            slots = np.flatnonzero(values == v)
            if slots.size:
                ids[slots] = self._draw(f"g:{j}:{v}", slots.size, _STREAM_SCHED_GROUPED)
        self._grouped_emitted += 1
        return Batch(
            kind="grouped",
            images=to_unit_tensor(self.dataset.images[ids]),
            attribute=j,
            labels=torch.from_numpy(values.astype(np.int64)),
            ids=ids,
        )

    def _next_mixed(self) -> Batch:
        ids = self._draw("mixed", self.batch_size, _STREAM_SCHED_MIXED)
        return Batch(
            kind="mixed", images=to_unit_tensor(self.dataset.images[ids]), ids=ids
        )

    def state_dict(self) -> dict:
        return {
            "emitted": self._emitted,
            "grouped_emitted": self._grouped_emitted,
            "cursors": {k: list(v) for k, v in self._cursors.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self._emitted = int(state["emitted"])
        self._grouped_emitted = int(state["grouped_emitted"])
        self._cursors = {k: [int(a), int(b)] for k, (a, b) in state["cursors"].items()}


# -- manifest I/O ------------------------------------------------------------


def _center_crop_resize(img: PILImage.Image, size: int) -> np.ndarray:
    img = img.convert("RGB")
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != size:
        img = img.resize((size, size), PILImage.BICUBIC)
    return np.asarray(img, dtype=np.uint8)


def load_manifest(
    path: str | Path, image_size: int = 32, schema: AttributeSchema | None = None
) -> SparselyGroupedDataset:
    """Load a manifest CSV: header `image_path,<attr>,...`, empty cell = unlabelled.

    Image paths are resolved relative to the manifest file. Images are
    center-cropped to a square and scaled to `image_size`. Attributes are
    binary unless a `schema` with other cardinalities is supplied.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    check_image_size(image_size)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"manifest {path} has no header row")
    header = [c.strip() for c in rows[0]]
    if len(header) < 2 or header[0] != "image_path":
        raise DataError(
            f"manifest header must be 'image_path,<attribute>,...', got {header}"
        )
    if schema is None:
        schema = AttributeSchema.from_dict({name: 2 for name in header[1:]})
    elif schema.names != tuple(header[1:]):
        raise DataError(
            f"manifest attributes {header[1:]} do not match schema {list(schema.names)}"
        )
    images, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        img_path = path.parent / row[0].strip()
        try:
            with PILImage.open(img_path) as img:
                images.append(_center_crop_resize(img, image_size))
        except OSError as exc:
            raise DataError(f"{path}:{lineno}: cannot read image {img_path}: {exc}") from exc
        example = []
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if not cell:
                example.append(UNLABELLED)
                continue
            try:
                value = int(cell)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: label {cell!r} is not an integer") from exc
            if value < 0 or value >= schema.cardinalities[j]:
                raise DataError(
                    f"{path}:{lineno}: label {value} out of range for attribute "
                    f"{header[1 + j]!r} (cardinality {schema.cardinalities[j]})"
                )
            example.append(value)
        labels.append(example)
    if not images:
        return SparselyGroupedDataset(
            schema,
            np.zeros((0, image_size, image_size, 3), dtype=np.uint8),
            np.zeros((0, schema.n_attributes), dtype=np.int16),
        )
    return SparselyGroupedDataset(
        schema,
        np.stack(images),
        np.asarray(labels, dtype=np.int16),
    )


def save_corpus(dataset: SparselyGroupedDataset, out_dir: str | Path) -> Path:
    """Write the dataset as PNG files plus a manifest CSV; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    width = max(5, len(str(max(len(dataset) - 1, 0))))
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_path", *dataset.schema.names])
        for i in range(len(dataset)):
            rel = f"images/{i:0{width}d}.png"
            PILImage.fromarray(dataset.images[i]).save(out_dir / rel)
            row = [
                "" if v == UNLABELLED else str(int(v)) for v in dataset.labels[i]
            ]
            writer.writerow([rel, *row])
    return manifest
