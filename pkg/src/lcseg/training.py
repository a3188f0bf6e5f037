"""Soft-dice training loop for both heads, with checkpointing and resume.

Determinism contract: all stochastic choices (epoch order, condition draws)
come from one numpy generator seeded by the config, weights are seeded by the
model config, and the optimizer is stateful but rng-free, so identical
configs give identical loss sequences, and a resumed run continues the exact
sequence an uninterrupted run would have produced.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .conditioning import Atlas, AtlasConditioner, ConditionSample, pad_atlas, sample_condition
from .grids import GridMismatchError, ImageVolume, LabelMap, binarize, crop_to, normalize_intensity, pad_to_multiple
from .metrics import dice
from .model import Checkpoint, ModelConfig, SegUNet, build_model, weights_of
from .synth import Cohort, Split

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """The loss went non-finite; carries the last lr and batch ids."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    head: str  # "baseline" | "lcs"
    lr: float = 1e-4
    optimizer: str = "adam"  # adaptive moments, default coefficients
    batch_size: int = 2
    seed: int = 0
    smooth_eps: float = 1e-5
    val_interval: int = 10
    class_ids: tuple[int, ...] | None = None  # training vocabulary; None = all

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr > 0, epochs >= 1, batch_size >= 1 required")
        if self.smooth_eps <= 0:
            raise ValueError("smooth_eps must be positive")
        if self.head not in ("baseline", "lcs"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.class_ids is not None:
            object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor,
                   eps: float = 1e-5) -> torch.Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), averaged over channels.

    Sums run over the last three (spatial) dimensions; any leading dimensions
    (batch, channels) are treated as independent channels and averaged. The
    symmetric smoothing term makes the empty-vs-empty case score a perfect 0
    instead of 0/0. For pred in [0,1] the value lies in [0, 1).
    """
    if pred.shape != target.shape:
        raise GridMismatchError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = pred.reshape(-1, pred.shape[-3] * pred.shape[-2] * pred.shape[-1])
    g = target.reshape(p.shape)
    intersection = (p * g).sum(dim=1)
    per_channel = 1.0 - (2.0 * intersection + eps) / (p.sum(dim=1) + g.sum(dim=1) + eps)
    return per_channel.mean()


def train_step(model: SegUNet, optimizer: torch.optim.Optimizer,
               images: torch.Tensor, targets: torch.Tensor,
               cond: torch.Tensor | None = None, eps: float = 1e-5,
               batch_ids: Sequence[str] = ()) -> float:
    """One gradient step; returns the scalar loss."""
    optimizer.zero_grad()
    pred = model(images, cond)
    loss = soft_dice_loss(pred, targets, eps)
    value = float(loss.detach())
    if not np.isfinite(value):
        lr = optimizer.param_groups[0]["lr"]
        raise TrainingDivergedError(f"non-finite loss (lr={lr}, batch={list(batch_ids)})")
    loss.backward()
    optimizer.step()
    return value


@dataclass
class _CaseTensors:
    case_id: str
    image: torch.Tensor  # (1, 1, D, H, W), normalized and padded
    labels: LabelMap  # original grid
    labels_padded: LabelMap
    crop: tuple[slice, ...]


def _prepare_case(image: ImageVolume, labels: LabelMap, multiple: int) -> _CaseTensors:
    normalized = normalize_intensity(image)
    padded, crop = pad_to_multiple(normalized.data, multiple)
    padded_labels, _ = pad_to_multiple(labels.data, multiple)
    tensor = torch.from_numpy(np.ascontiguousarray(padded, dtype=np.float32))[None, None]
    return _CaseTensors(
        case_id=image.id,
        image=tensor,
        labels=labels,
        labels_padded=LabelMap(padded_labels, labels.vocabulary, labels.hierarchy, labels.id),
        crop=crop,
    )


def _target_tensor(labels: LabelMap, class_sets: Sequence[frozenset[int]]) -> torch.Tensor:
    stack = [binarize(labels, cs).data.astype(np.float32) for cs in class_sets]
    return torch.from_numpy(np.stack(stack))


def _mean_val_dice(model: SegUNet, cases: list[_CaseTensors], class_ids: Sequence[int],
                   conditioner: AtlasConditioner | None, threshold: float = 0.5,
                   chunk: int = 8) -> float:
    """Mean Dice over (case, class) at the given threshold; selection metric."""
    scores = []
    with torch.no_grad():
        for case in cases:
            if model.config.head == "baseline":
                out = model(case.image)[0].numpy()
                per_class = {cid: out[i] for i, cid in enumerate(class_ids)}
            else:
                per_class = {}
                ids = list(class_ids)
                for start in range(0, len(ids), chunk):
                    batch_ids = ids[start:start + chunk]
                    cond = torch.from_numpy(np.stack(
                        [conditioner.get({cid}).data for cid in batch_ids]
                    ))
                    out = model(case.image.expand(len(batch_ids), -1, -1, -1, -1), cond)
                    for i, cid in enumerate(batch_ids):
                        per_class[cid] = out[i, 0].numpy()
            for cid in class_ids:
                pred = crop_to(per_class[cid], case.crop) > threshold
                gt = binarize(case.labels, {cid}).data.astype(bool)
                scores.append(dice(pred, gt))
    return float(np.mean(scores))


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, cohort: Cohort, split: Split,
          atlas: Atlas | None = None, resume_from: Checkpoint | None = None) -> Checkpoint:
    """Run the optimization loop and return a checkpoint with best-val weights.

    The returned checkpoint also carries the last-epoch weights, optimizer
    moments, and rng state, so passing it back as `resume_from` (with a larger
    epoch budget) continues the identical run.
    """
    if not split.train:
        raise ValueError("empty training split")
    if train_cfg.head != model_cfg.head:
        raise ValueError(f"head mismatch: train={train_cfg.head} model={model_cfg.head}")
    class_ids = list(train_cfg.class_ids if train_cfg.class_ids is not None else cohort.class_ids())
    if train_cfg.head == "baseline" and model_cfg.out_channels != len(class_ids):
        raise ValueError(
            f"baseline head has {model_cfg.out_channels} channels for {len(class_ids)} classes"
        )
    if train_cfg.head == "lcs":
        if atlas is None:
            atlas = cohort.atlas_for(split)
        if atlas.case_id in split.train:
            raise ValueError(f"atlas case {atlas.case_id} must not sit in the training pool")

    multiple = model_cfg.pool_factor
    train_cases = [_prepare_case(*cohort.cases[c], multiple) for c in split.train]
    val_cases = [_prepare_case(*cohort.cases[c], multiple) for c in split.val]
    conditioner = None
    if train_cfg.head == "lcs":
        conditioner = AtlasConditioner(pad_atlas(atlas, multiple), factor=multiple)

    baseline_sets = [frozenset({cid}) for cid in class_ids]
    baseline_targets = {
        case.case_id: _target_tensor(case.labels_padded, baseline_sets)[None]
        for case in train_cases
    } if train_cfg.head == "baseline" else {}

    model = build_model(model_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    start_epoch = 0
    loss_curve: list[float] = []
    val_curve: list[list[float]] = []
    best_val = -np.inf
    best_epoch = -1
    best_weights: dict[str, np.ndarray] | None = None

    if resume_from is not None:
        start_epoch = int(resume_from.metadata["epochs_run"])
        loss_curve = list(resume_from.metadata["loss_curve"])
        val_curve = [list(v) for v in resume_from.metadata["val_curve"]]
        best_epoch = int(resume_from.metadata["best_epoch"])
        prior_best = resume_from.metadata["best_val_dice"]
        best_val = -np.inf if prior_best is None else float(prior_best)
        best_weights = dict(resume_from.weights)
        _load_weights(model, {k[len("last/"):]: v for k, v in resume_from.trainer_state.items()
                              if k.startswith("last/")})
        _restore_adam(optimizer, model, resume_from)
        rng.bit_generator.state = resume_from.metadata["rng_state"]

    model.train()
    for epoch in range(start_epoch, train_cfg.epochs):
        order = rng.permutation(len(train_cases))
        epoch_losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [train_cases[i] for i in order[lo:lo + train_cfg.batch_size]]
            images = torch.cat([case.image for case in batch])
            if train_cfg.head == "lcs":
                samples = [sample_condition(class_ids, rng) for _ in batch]
                targets = torch.cat([
                    _target_tensor(case.labels_padded, [s.class_set])[None]
                    for case, s in zip(batch, samples)
                ])
                cond = torch.from_numpy(np.stack(
                    [conditioner.get(s.class_set).data for s in samples]
                ))
            else:
                targets = torch.cat([baseline_targets[case.case_id] for case in batch])
                cond = None
            epoch_losses.append(train_step(
                model, optimizer, images, targets, cond, train_cfg.smooth_eps,
                batch_ids=[case.case_id for case in batch],
            ))
        loss_curve.append(float(np.mean(epoch_losses)))
        is_last = epoch == train_cfg.epochs - 1
        if val_cases and (epoch % train_cfg.val_interval == train_cfg.val_interval - 1 or is_last):
            model.eval()
            score = _mean_val_dice(model, val_cases, class_ids, conditioner)
            model.train()
            val_curve.append([float(epoch), score])
            if score > best_val:
                best_val = score
                best_epoch = epoch
                best_weights = weights_of(model)
            log.info("epoch %d: loss=%.4f val_dice=%.4f", epoch, loss_curve[-1], score)
        else:
            log.debug("epoch %d: loss=%.4f", epoch, loss_curve[-1])

    model.eval()
    last_weights = weights_of(model)
    if best_weights is None or not val_cases:  # no validation split: keep the final weights
        best_weights = last_weights
        best_epoch = train_cfg.epochs - 1
    trainer_state = {f"last/{k}": v for k, v in last_weights.items()}
    adam_steps: dict[str, float] = {}
    names = [name for name, _ in model.named_parameters()]
    for name, param in zip(names, optimizer.param_groups[0]["params"]):
        state = optimizer.state.get(param)
        if not state:
            continue
        trainer_state[f"adam/{name}/exp_avg"] = state["exp_avg"].numpy().copy()
        trainer_state[f"adam/{name}/exp_avg_sq"] = state["exp_avg_sq"].numpy().copy()
        adam_steps[name] = float(state["step"])
    metadata = {
        "epochs_run": train_cfg.epochs,
        "loss_curve": loss_curve,
        "val_curve": val_curve,
        "best_epoch": best_epoch,
        "best_val_dice": float(best_val) if np.isfinite(best_val) else None,
        "seed": train_cfg.seed,
        "train_config": asdict(train_cfg),
        "train_class_ids": list(class_ids),
        "split": {"train": list(split.train), "atlas": split.atlas,
                  "val": list(split.val), "test": list(split.test)},
        "rng_state": rng.bit_generator.state,
        "adam_steps": adam_steps,
    }
    if train_cfg.head == "lcs":
        return Checkpoint(
            config=model_cfg,
            weights=best_weights,
            vocabulary=cohort.vocabulary,
            hierarchy=cohort.hierarchy,
            atlas_ref=atlas.case_id,
            atlas_image=atlas.image.data.astype(np.float32),
            atlas_labels=atlas.labels.data.astype(np.int32),
            atlas_spacing=atlas.image.spacing,
            metadata=metadata,
            trainer_state=trainer_state,
        )
    return Checkpoint(
        config=model_cfg,
        weights=best_weights,
        vocabulary=cohort.vocabulary,
        hierarchy=cohort.hierarchy,
        metadata=metadata,
        trainer_state=trainer_state,
    )


def _load_weights(model: SegUNet, weights: dict[str, np.ndarray]) -> None:
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(torch.from_numpy(weights[name].astype(np.float32, copy=False)))


def _restore_adam(optimizer: torch.optim.Optimizer, model: SegUNet,
                  ckpt: Checkpoint) -> None:
    steps = ckpt.metadata.get("adam_steps", {})
    names = [name for name, _ in model.named_parameters()]
    for name, param in zip(names, optimizer.param_groups[0]["params"]):
        if name not in steps:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(steps[name])),
            "exp_avg": torch.from_numpy(ckpt.trainer_state[f"adam/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(ckpt.trainer_state[f"adam/{name}/exp_avg_sq"].copy()),
        }
