"""Atlas-driven class conditioning.

Builds the 2-channel bottleneck input (downsampled atlas image + downsampled
binary atlas mask) for a chosen class set, and samples which class (or merged
class pair) a training step is conditioned on. Everything here is pure given
an explicit rng, so parallel loaders can use per-worker derived streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .grids import (
    BinaryMask,
    GridMismatchError,
    ImageVolume,
    LabelMap,
    binarize,
    downsample,
    normalize_intensity,
    pad_to_multiple,
)

DEFAULT_COND_FACTOR = 16


@dataclass(frozen=True)
class Atlas:
    """The designated image + label-map pair a conditioned model is tied to."""

    image: ImageVolume
    labels: LabelMap
    case_id: str

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise GridMismatchError(
                f"atlas image {self.image.shape} vs labels {self.labels.shape}"
            )


@dataclass(frozen=True)
class ConditionSample:
    """One training-time draw: the class set to segment and whether a merge
    was attempted (the 50% second-label coin; the set stays a singleton when
    the second draw repeats the first)."""

    class_set: frozenset[int]
    merged: bool

    def __post_init__(self):
        if not 1 <= len(self.class_set) <= 2:
            raise ValueError("class_set holds one or two ids")
        if len(self.class_set) == 2 and not self.merged:
            raise ValueError("a two-id set implies a merge draw")


@dataclass(frozen=True)
class ConditioningInput:
    """The (2, D/f, H/f, W/f) tensor fed to the bottleneck: channel 0 is the
    downsampled normalized atlas image, channel 1 the fractional mask."""

    data: np.ndarray
    class_set: frozenset[int]

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 2:
            raise ValueError(f"expected (2, d, h, w), got {self.data.shape}")
        mask = self.data[1]
        if mask.min() < 0.0 or mask.max() > 1.0:
            raise ValueError("mask channel must lie in [0, 1]")
        if not self.class_set:
            raise ValueError("class_set must be nonempty")
        object.__setattr__(self, "class_set", frozenset(int(c) for c in self.class_set))


def sample_condition(vocabulary: Sequence[int], rng: np.random.Generator) -> ConditionSample:
    """Draw the conditioned class set: first id uniform over the vocabulary,
    then with probability 0.5 a second uniform id is unioned in (it may repeat
    the first, in which case the union degenerates to the singleton)."""
    ids = [int(c) for c in vocabulary]
    if not ids:
        raise ValueError("vocabulary is empty")
    first = ids[int(rng.integers(len(ids)))]
    merged = bool(rng.random() < 0.5)
    chosen = {first}
    if merged:
        chosen.add(ids[int(rng.integers(len(ids)))])
    return ConditionSample(frozenset(chosen), merged)


def make_conditioning(atlas: Atlas, class_set: Iterable[int],
                      factor: int = DEFAULT_COND_FACTOR) -> ConditioningInput:
    """Build the conditioning input for a class set; deterministic in its inputs.

    The atlas grid must already be a multiple of `factor` (pad upstream).
    """
    ids = frozenset(int(c) for c in class_set)
    _check_divisible(atlas.image.shape, factor)
    channel_image = downsample(normalize_intensity(atlas.image), factor).data
    channel_mask = downsample(binarize(atlas.labels, ids), factor)
    data = np.stack([channel_image, channel_mask]).astype(np.float32)
    return ConditioningInput(data, ids)


def conditioning_from_mask(atlas: Atlas, mask: BinaryMask, label_id: int,
                           factor: int = DEFAULT_COND_FACTOR) -> ConditioningInput:
    """Condition on an arbitrary mask delineated on the atlas grid, i.e. the
    novel label pathway. `label_id` names the output channel for reporting."""
    if mask.shape != atlas.image.shape:
        raise GridMismatchError(f"mask {mask.shape} vs atlas {atlas.image.shape}")
    _check_divisible(atlas.image.shape, factor)
    channel_image = downsample(normalize_intensity(atlas.image), factor).data
    channel_mask = downsample(mask, factor)
    data = np.stack([channel_image, channel_mask]).astype(np.float32)
    return ConditioningInput(data, frozenset({int(label_id)}))


def pad_atlas(atlas: Atlas, multiple: int) -> Atlas:
    """Zero-pad both atlas grids symmetrically to the next multiple."""
    image, _ = pad_to_multiple(atlas.image.data, multiple)
    labels, _ = pad_to_multiple(atlas.labels.data, multiple)
    return Atlas(
        ImageVolume(image, atlas.image.spacing, atlas.image.id),
        LabelMap(labels, atlas.labels.vocabulary, atlas.labels.hierarchy, atlas.labels.id),
        atlas.case_id,
    )


def choose_atlas_case(case_ids: Sequence[str], rng: np.random.Generator) -> str:
    """Seeded atlas pick for configs that do not name one."""
    if not case_ids:
        raise ValueError("no candidate atlas cases")
    return str(case_ids[int(rng.integers(len(case_ids)))])


class AtlasConditioner:
    """Caches conditioning inputs for one padded atlas.

    The image channel is shared by every class set, so it is computed once;
    mask channels are cached per class set. Reads after warm-up are safe from
    multiple threads.
    """

    def __init__(self, atlas: Atlas, factor: int = DEFAULT_COND_FACTOR):
        _check_divisible(atlas.image.shape, factor)
        self.atlas = atlas
        self.factor = factor
        self._image_channel = downsample(normalize_intensity(atlas.image), factor).data
        self._mask_channels: dict[frozenset[int], np.ndarray] = {}

    def get(self, class_set: Iterable[int]) -> ConditioningInput:
        ids = frozenset(int(c) for c in class_set)
        mask = self._mask_channels.get(ids)
        if mask is None:
            mask = downsample(binarize(self.atlas.labels, ids), self.factor)
            self._mask_channels[ids] = mask
        data = np.stack([self._image_channel, mask]).astype(np.float32)
        return ConditioningInput(data, ids)

    def from_mask(self, mask: BinaryMask, label_id: int) -> ConditioningInput:
        return conditioning_from_mask(self.atlas, mask, label_id, self.factor)


def _check_divisible(shape, factor: int) -> None:
    if any(s % factor for s in shape):
        raise GridMismatchError(
            f"grid {tuple(shape)} not padded to a multiple of {factor}"
        )
