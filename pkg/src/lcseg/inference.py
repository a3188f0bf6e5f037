"""Per-label conditioned inference, probabilistic assembly, and the analytic
memory ledger.

The conditioned head produces one channel per forward pass, so a K-class
segmentation is K independent passes over a shared read-only model. Passes may
run on any number of worker threads; results are gathered by class id, which
makes the output independent of scheduling order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .conditioning import Atlas, AtlasConditioner, ConditioningInput, pad_atlas
from .grids import (
    BinaryMask,
    GridMismatchError,
    ImageVolume,
    LabelMap,
    ProbMap,
    crop_to,
    normalize_intensity,
    pad_to_multiple,
)
from .model import (
    Checkpoint,
    SegUNet,
    count_parameters,
    estimate_activation_memory,
    model_from_checkpoint,
)

BACKGROUND_ID = 0


@dataclass(frozen=True)
class MemoryLedger:
    """Analytic accounting of one segmentation run (bytes, not wall-clock RSS).

    `peak_activation_bytes` is what must be resident at once: one pass per
    concurrent worker. With workers=1 it is independent of how many labels the
    run covers, which is the memory argument for the conditioned head.
    """

    bytes_per_scalar: int
    per_pass_activation_bytes: int
    passes: int
    concurrent: int
    model_bytes: int

    @property
    def peak_activation_bytes(self) -> int:
        return self.per_pass_activation_bytes * min(self.concurrent, max(self.passes, 1))

    @property
    def total_activation_bytes(self) -> int:
        return self.per_pass_activation_bytes * self.passes


@dataclass(frozen=True)
class SegmentationResult:
    """Discrete map, the normalized stack behind it, and the memory ledger.

    `raw_probs` keeps the per-class maps as the network produced them (before
    the background channel and per-voxel normalization); thresholded metrics
    read these, the discrete map comes from the normalized stack.
    """

    labels: LabelMap
    probs: ProbMap
    raw_probs: ProbMap
    ledger: MemoryLedger

    def raw_channel(self, class_id: int) -> np.ndarray:
        for i, labels in enumerate(self.raw_probs.channel_labels):
            if labels == frozenset({int(class_id)}):
                return self.raw_probs.data[i]
        raise KeyError(f"no channel for class {class_id}")


def checkpoint_atlas(ckpt: Checkpoint) -> Atlas:
    """Rebuild the conditioning atlas embedded in a conditioned-head checkpoint."""
    if ckpt.atlas_image is None or ckpt.atlas_labels is None:
        raise ValueError("checkpoint does not embed an atlas")
    image = ImageVolume(ckpt.atlas_image, ckpt.atlas_spacing, ckpt.atlas_ref or "atlas")
    labels = LabelMap(ckpt.atlas_labels, ckpt.vocabulary, ckpt.hierarchy, ckpt.atlas_ref or "atlas")
    return Atlas(image, labels, ckpt.atlas_ref or "atlas")


def _prep_image(image: ImageVolume, multiple: int) -> tuple[torch.Tensor, tuple[slice, ...]]:
    padded, crop = pad_to_multiple(normalize_intensity(image).data, multiple)
    return torch.from_numpy(np.ascontiguousarray(padded, dtype=np.float32))[None, None], crop


def _forward_prepped(model: SegUNet, tensor: torch.Tensor,
                     cond: ConditioningInput) -> np.ndarray:
    cond_tensor = torch.from_numpy(np.ascontiguousarray(cond.data, dtype=np.float32))[None]
    with torch.no_grad():
        return model(tensor, cond_tensor)[0, 0].numpy()


def segment_one(model: SegUNet, image: ImageVolume, atlas: Atlas,
                class_set: Sequence[int] | frozenset[int],
                conditioner: AtlasConditioner | None = None) -> ProbMap:
    """One conditioned pass for one class set, cropped back to the input grid.

    `class_set` may be a training label, a merged pair, or resolve through the
    atlas hierarchy; for masks that exist only as delineations, see
    segment_novel.
    """
    multiple = model.config.pool_factor
    if conditioner is None:
        conditioner = AtlasConditioner(pad_atlas(atlas, multiple), factor=multiple)
    tensor, crop = _prep_image(image, multiple)
    out = _forward_prepped(model, tensor, conditioner.get(class_set))
    return ProbMap(crop_to(out, crop)[None], channel_labels=(frozenset(class_set),))


def segment_novel(model: SegUNet, image: ImageVolume, atlas: Atlas, mask: BinaryMask,
                  label_id: int) -> ProbMap:
    """Conditioned pass for a label that exists only as an atlas delineation.

    The mask must live on the (unpadded) atlas grid; `label_id` names the
    output channel for assembly and reporting.
    """
    multiple = model.config.pool_factor
    if mask.shape != atlas.image.shape:
        raise GridMismatchError(f"mask {mask.shape} vs atlas {atlas.image.shape}")
    padded_mask, _ = pad_to_multiple(mask.data, multiple)
    conditioner = AtlasConditioner(pad_atlas(atlas, multiple), factor=multiple)
    cond = conditioner.from_mask(BinaryMask(padded_mask, mask.source_classes), label_id)
    tensor, crop = _prep_image(image, multiple)
    out = _forward_prepped(model, tensor, cond)
    return ProbMap(crop_to(out, crop)[None], channel_labels=(frozenset({int(label_id)}),))


def _representative_id(class_set: frozenset[int]) -> int:
    return min(class_set)


def _stack_maps(maps: Sequence[ProbMap]) -> ProbMap:
    data = np.concatenate([pm.data for pm in maps])
    labels = tuple(pm.channel_labels[0] for pm in maps)
    return ProbMap(data, labels)


def assemble(maps: Sequence[ProbMap],
             vocabulary: Sequence[tuple[int, str]] = ()) -> tuple[ProbMap, LabelMap]:
    """Stack per-class maps into a normalized distribution and a discrete map.

    A background score max(0, 1 - max_c p_c) is prepended as channel 0, every
    channel is divided by the per-voxel sum (the sum is >= 1 before dividing,
    so this is always defined), and the discrete map is the per-voxel argmax
    with ties broken toward the lowest class id (background counts as id 0).
    """
    if not maps:
        raise ValueError("assemble needs at least one map")
    ids = []
    for pm in maps:
        if pm.data.shape[0] != 1:
            raise ValueError("assemble takes single-channel maps")
        if pm.grid_shape != maps[0].grid_shape:
            raise GridMismatchError(f"{pm.grid_shape} vs {maps[0].grid_shape}")
        ids.append(_representative_id(pm.channel_labels[0]))
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate class ids in assembly: {sorted(ids)}")
    if BACKGROUND_ID in ids:
        raise ValueError(f"class id {BACKGROUND_ID} is reserved for background")

    order = np.argsort(ids)
    sorted_ids = [ids[i] for i in order]
    stack = np.stack([maps[i].data[0] for i in order]).astype(np.float64)
    background = np.clip(1.0 - stack.max(axis=0), 0.0, None)
    full = np.concatenate([background[None], stack])
    full /= full.sum(axis=0, keepdims=True)

    lookup = np.asarray([BACKGROUND_ID] + sorted_ids, dtype=np.int32)
    discrete = lookup[np.argmax(full, axis=0)]
    names = dict(vocabulary)
    vocab = tuple((cid, names.get(cid, f"class_{cid}")) for cid in sorted_ids)
    channel_labels = (frozenset(),) + tuple(
        maps[i].channel_labels[0] for i in order
    )
    prob = ProbMap(full.astype(np.float32), channel_labels, normalized=True)
    return prob, LabelMap(discrete, vocab, {}, "")


def _ledger(model: SegUNet, passes: int, concurrent: int) -> MemoryLedger:
    return MemoryLedger(
        bytes_per_scalar=4,
        per_pass_activation_bytes=estimate_activation_memory(model.config, 4, training=False),
        passes=passes,
        concurrent=concurrent,
        model_bytes=count_parameters(model) * 4,
    )


def segment_all(model: SegUNet, image: ImageVolume, atlas: Atlas,
                class_ids: Sequence[int], workers: int = 1,
                vocabulary: Sequence[tuple[int, str]] = ()) -> SegmentationResult:
    """One conditioned pass per class id, gathered by id and assembled.

    Exactly len(class_ids) forward passes run, spread over `workers` threads;
    the result is identical for any worker count because maps are keyed by
    class id, never by completion order.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    ids = [int(c) for c in class_ids]
    if not ids:
        raise ValueError("class_ids must be nonempty")
    multiple = model.config.pool_factor
    conditioner = AtlasConditioner(pad_atlas(atlas, multiple), factor=multiple)
    conds = {cid: conditioner.get({cid}) for cid in ids}  # warmed serially
    tensor, crop = _prep_image(image, multiple)

    def run(cid: int) -> tuple[int, np.ndarray]:
        return cid, _forward_prepped(model, tensor, conds[cid])

    if workers == 1:
        gathered = dict(run(cid) for cid in ids)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            gathered = dict(pool.map(run, ids))
    maps = [
        ProbMap(crop_to(gathered[cid], crop)[None], channel_labels=(frozenset({cid}),))
        for cid in ids
    ]
    prob, discrete = assemble(maps, vocabulary)
    raw = _stack_maps(maps)
    return SegmentationResult(discrete, prob, raw, _ledger(model, len(ids), workers))


def segment_all_baseline(model: SegUNet, image: ImageVolume, class_ids: Sequence[int],
                         vocabulary: Sequence[tuple[int, str]] = ()) -> SegmentationResult:
    """Single multi-channel pass for the fixed-head model, then the same
    assembly code path as the conditioned route."""
    ids = [int(c) for c in class_ids]
    if len(ids) != model.config.out_channels:
        raise ValueError(f"{model.config.out_channels} channels but {len(ids)} class ids")
    tensor, crop = _prep_image(image, model.config.pool_factor)
    with torch.no_grad():
        out = model(tensor)[0].numpy()
    maps = [
        ProbMap(crop_to(out[i], crop)[None], channel_labels=(frozenset({cid}),))
        for i, cid in enumerate(ids)
    ]
    prob, discrete = assemble(maps, vocabulary)
    return SegmentationResult(discrete, prob, _stack_maps(maps), _ledger(model, 1, 1))


def trained_class_ids(ckpt: Checkpoint) -> list[int]:
    ids = ckpt.metadata.get("train_class_ids")
    if ids:
        return [int(c) for c in ids]
    return [cid for cid, _ in ckpt.vocabulary]


def segment_case(ckpt: Checkpoint, image: ImageVolume, labels: str = "all",
                 workers: int = 1, model: SegUNet | None = None) -> SegmentationResult:
    """Checkpoint-level front door used by the CLI.

    `labels` is "all" (every trained class), a comma list of ids, or
    "@/path/to/mask" naming a mask file on the atlas grid (novel label). The
    novel label gets the first id above the checkpoint vocabulary.
    """
    if model is None:
        model = model_from_checkpoint(ckpt)
    if labels.startswith("@"):
        if ckpt.config.head != "lcs":
            raise ValueError("novel-mask inference needs a conditioned-head checkpoint")
        from .volume_io import load_mask

        mask = load_mask(labels[1:])
        atlas = checkpoint_atlas(ckpt)
        novel_id = max((cid for cid, _ in ckpt.vocabulary), default=0) + 1
        prob = segment_novel(model, image, atlas, mask, novel_id)
        out, discrete = assemble([prob], [(novel_id, "novel")])
        return SegmentationResult(discrete, out, prob, _ledger(model, 1, workers))
    if labels == "all":
        ids = trained_class_ids(ckpt)
    else:
        ids = [int(tok) for tok in labels.split(",") if tok.strip()]
        if not ids:
            raise ValueError(f"no class ids in {labels!r}")
    if ckpt.config.head == "lcs":
        return segment_all(model, image, checkpoint_atlas(ckpt), ids, workers,
                           vocabulary=ckpt.vocabulary)
    trained = trained_class_ids(ckpt)
    result = segment_all_baseline(model, image, trained, vocabulary=ckpt.vocabulary)
    if ids == trained:
        return result
    keep = [i for i, cid in enumerate(trained) if cid in set(ids)]
    if len(keep) != len(ids):
        raise ValueError(f"ids {sorted(set(ids) - set(trained))} not in the trained head")
    maps = [
        ProbMap(result.raw_probs.data[i][None].copy(), (result.raw_probs.channel_labels[i],))
        for i in keep
    ]
    prob, discrete = assemble(maps, ckpt.vocabulary)
    return SegmentationResult(discrete, prob, _stack_maps(maps), result.ledger)
