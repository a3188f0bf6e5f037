"""Grid data model: intensity volumes, label maps, binary masks, probability maps.

All grids are (D, H, W) numpy arrays; probability maps carry a leading channel
axis. Everything in this module is a pure function on immutable inputs and is
safe to call from any number of concurrent workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Union

import numpy as np

Shape3 = tuple[int, int, int]


class GridMismatchError(ValueError):
    """Two grids that must share a shape do not."""


class VocabularyError(ValueError):
    """A class id is not part of a label map's vocabulary."""


class ConstantVolumeWarning(UserWarning):
    """Intensity normalization hit a constant volume; the output is all zeros."""


@dataclass(frozen=True)
class ImageVolume:
    """Scalar intensity grid with voxel spacing metadata (mm per voxel)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"expected a (D, H, W) grid, got shape {self.data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive per axis, got {self.spacing!r}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> Shape3:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """Integer class-id grid plus its label vocabulary and coarse-to-fine table.

    The grid stores leaf ids only: a coarse id that has hierarchy children never
    appears as a raw voxel value, so the union of its children's voxels *is* the
    coarse region. `binarize` resolves ids accordingly.
    """

    data: np.ndarray
    vocabulary: tuple[tuple[int, str], ...] = ()
    hierarchy: Mapping[int, tuple[int, ...]] = None
    id: str = ""

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"expected a (D, H, W) grid, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"label grid must be integer-typed, got {self.data.dtype}")
        object.__setattr__(self, "vocabulary", tuple((int(i), str(n)) for i, n in self.vocabulary))
        hier = dict(self.hierarchy or {})
        object.__setattr__(
            self, "hierarchy", {int(k): tuple(int(c) for c in v) for k, v in hier.items()}
        )
        known = self.class_ids()
        present = set(np.unique(self.data).tolist()) - {0}
        if not present <= known:
            raise VocabularyError(f"voxel values {sorted(present - known)} missing from vocabulary")
        for coarse, children in self.hierarchy.items():
            if coarse not in known or not set(children) <= known:
                raise VocabularyError(f"hierarchy entry {coarse} -> {children} references unknown ids")

    @property
    def shape(self) -> Shape3:
        return self.data.shape

    def class_ids(self) -> set[int]:
        return {i for i, _ in self.vocabulary}

    def name_of(self, class_id: int) -> str:
        for i, n in self.vocabulary:
            if i == class_id:
                return n
        raise VocabularyError(f"unknown class id {class_id}")

    def leaf_ids(self, class_id: int) -> frozenset[int]:
        """Resolve an id to the leaf ids that actually appear as voxel values."""
        children = self.hierarchy.get(class_id, ())
        if not children:
            return frozenset({class_id})
        leaves: set[int] = set()
        for child in children:
            leaves |= self.leaf_ids(child)
        return frozenset(leaves)


@dataclass(frozen=True)
class BinaryMask:
    """A {0,1} grid recording which class ids it was built from."""

    data: np.ndarray
    source_classes: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected a (D, H, W) grid, got shape {self.data.shape}")
        vals = np.unique(self.data)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", self.data.astype(np.uint8, copy=False))
        object.__setattr__(self, "source_classes", frozenset(int(c) for c in self.source_classes))

    @property
    def shape(self) -> Shape3:
        return self.data.shape

    def volume(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class ProbMap:
    """Per-voxel probabilities, one channel per queried class-id set.

    When `normalized` is set, channels sum to 1 at every voxel (within 1e-5).
    """

    data: np.ndarray
    channel_labels: tuple[frozenset[int], ...]
    normalized: bool = False

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ValueError(f"expected a (C, D, H, W) grid with C >= 1, got {self.data.shape}")
        object.__setattr__(
            self, "channel_labels", tuple(frozenset(int(c) for c in s) for s in self.channel_labels)
        )
        if len(self.channel_labels) != self.data.shape[0]:
            raise ValueError(
                f"{self.data.shape[0]} channels but {len(self.channel_labels)} channel labels"
            )
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.normalized:
            sums = self.data.sum(axis=0)
            if not np.allclose(sums, 1.0, atol=1e-5):
                off = float(np.abs(sums - 1.0).max())
                raise ValueError(f"normalized map has per-voxel sums off by up to {off:.2e}")

    @property
    def grid_shape(self) -> Shape3:
        return self.data.shape[1:]


def require_same_shape(a, b) -> None:
    sa = a.shape if hasattr(a, "shape") else np.shape(a)
    sb = b.shape if hasattr(b, "shape") else np.shape(b)
    if tuple(sa) != tuple(sb):
        raise GridMismatchError(f"grid shapes differ: {tuple(sa)} vs {tuple(sb)}")


def normalize_intensity(volume: ImageVolume) -> ImageVolume:
    """Z-score intensities over the foreground (nonzero voxels); zeros stay zero.

    A constant foreground has no scale, so the result is an all-zero volume and a
    ConstantVolumeWarning is emitted. Idempotent as long as no foreground voxel
    lands exactly on the foreground mean (a measure-zero event for float data).
    """
    data = volume.data
    if not np.isfinite(data).all():
        raise ValueError("volume contains non-finite intensities")
    mask = data != 0
    out = np.zeros(volume.shape, dtype=np.float32)
    if mask.any():
        fg = data[mask].astype(np.float64)
        std = float(fg.std())
        if std > 0.0:
            out[mask] = ((fg - fg.mean()) / std).astype(np.float32)
            return ImageVolume(out, volume.spacing, volume.id)
    warnings.warn(
        f"volume {volume.id!r} has constant intensity; normalized to all zeros",
        ConstantVolumeWarning,
        stacklevel=2,
    )
    return ImageVolume(out, volume.spacing, volume.id)


def binarize(labels: LabelMap, class_set: Iterable[int]) -> BinaryMask:
    """Union mask of the given class ids; hierarchy ids resolve to their leaves."""
    ids = frozenset(int(c) for c in class_set)
    if not ids:
        raise VocabularyError("class_set must be nonempty")
    unknown = ids - labels.class_ids()
    if unknown:
        raise VocabularyError(f"unknown class ids {sorted(unknown)}")
    leaves: set[int] = set()
    for cid in ids:
        leaves |= labels.leaf_ids(cid)
    mask = np.isin(labels.data, sorted(leaves))
    return BinaryMask(mask.astype(np.uint8), source_classes=ids)


GridLike = Union[ImageVolume, BinaryMask, np.ndarray]


def downsample(grid: GridLike, factor: int):
    """Block-mean downsample by an integer factor per axis.

    Masks become fractional-occupancy float grids: the mean of a factor^3 block
    of {0,1} values, which preserves partial-volume information that a
    nearest-neighbor pick would drop.
    """
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"factor must be a positive integer, got {factor!r}")
    data = grid.data if isinstance(grid, (ImageVolume, BinaryMask)) else np.asarray(grid)
    d, h, w = data.shape
    if d % factor or h % factor or w % factor:
        raise GridMismatchError(
            f"shape {data.shape} not divisible by {factor}; pad to a multiple first"
        )
    blocks = data.astype(np.float64).reshape(
        d // factor, factor, h // factor, factor, w // factor, factor
    )
    small = blocks.mean(axis=(1, 3, 5)).astype(np.float32)
    if isinstance(grid, ImageVolume):
        spacing = tuple(s * factor for s in grid.spacing)
        return ImageVolume(small, spacing, grid.id)
    return small


def pad_to_multiple(data: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[slice, ...]]:
    """Zero-pad the trailing 3 axes symmetrically to the next multiple.

    Returns the padded array and the slices that crop back to the original grid.
    """
    pads = []
    crops = []
    for size in data.shape[-3:]:
        total = (-size) % multiple
        lo = total // 2
        pads.append((lo, total - lo))
        crops.append(slice(lo, lo + size))
    width = [(0, 0)] * (data.ndim - 3) + pads
    return np.pad(data, width), tuple(crops)


def crop_to(data: np.ndarray, crop: tuple[slice, ...]) -> np.ndarray:
    """Undo `pad_to_multiple` on the trailing 3 axes."""
    index = (Ellipsis,) + tuple(crop)
    return data[index]
