"""Volumetric U-Net backbone with two heads, plus parameter/memory accounting.

The baseline head emits one channel per segmentation class; the conditioned
("lcs") head always emits a single channel and accepts a 2-channel atlas
condition concatenated at the bottleneck. Hidden activations are
rectified-linear, outputs pass through a per-channel logistic squash, and
there are no normalization layers, so forward passes are deterministic
functions of (weights, inputs).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from math import prod
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .grids import ImageVolume, ProbMap, Shape3

CHECKPOINT_VERSION = 1
COND_CHANNELS = 2

# Accounting policy for activation memory: every layer-output tensor (conv,
# pool, up-conv, concat, head logits, squashed probabilities) is stored once
# in the forward pass and once more as its gradient buffer during backward.
TRAIN_ACTIVATION_MULTIPLIER = 2
HEAD_TENSORS_PER_CHANNEL = 2  # logits + squashed probabilities


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; `seed` pins the weight initialization."""

    input_grid: Shape3
    head: str  # "baseline" | "lcs"
    out_channels: int = 1  # baseline head width C; forced to 1 for lcs
    base_channels: int = 8
    num_levels: int = 5  # 5 levels = four 2x pools, bottleneck at 1/16
    kernel: tuple[int, int, int] = (3, 3, 3)
    convs_per_level: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_grid", tuple(int(s) for s in self.input_grid))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.head not in ("baseline", "lcs"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "lcs" and self.out_channels != 1:
            raise ValueError("the conditioned head always has a single output channel")
        if self.base_channels < 1 or self.out_channels < 1 or self.num_levels < 2:
            raise ValueError("base_channels, out_channels >= 1 and num_levels >= 2 required")
        if self.convs_per_level < 1:
            raise ValueError("convs_per_level must be >= 1")
        if any(k % 2 == 0 for k in self.kernel):
            raise ValueError("kernels must be odd so same-padding aligns skip connections")
        factor = self.pool_factor
        if any(s % factor for s in self.input_grid):
            raise ValueError(
                f"input grid {self.input_grid} not divisible by {factor}; pad upstream"
            )

    @property
    def pool_factor(self) -> int:
        return 2 ** (self.num_levels - 1)

    @property
    def bottleneck_grid(self) -> Shape3:
        return tuple(s // self.pool_factor for s in self.input_grid)

    def channels_at(self, level: int) -> int:
        return self.base_channels * 2 ** level


@dataclass(frozen=True)
class PlanStep:
    """One activation-producing step of the network, for accounting."""

    name: str
    kind: str  # conv | pool | upconv | concat | squash
    in_channels: int
    out_channels: int
    grid: Shape3  # output grid
    kernel: tuple[int, int, int] = (1, 1, 1)

    @property
    def activation_numel(self) -> int:
        return self.out_channels * prod(self.grid)

    @property
    def n_params(self) -> int:
        if self.kind in ("conv", "upconv"):
            return prod(self.kernel) * self.in_channels * self.out_channels + self.out_channels
        return 0


def layer_plan(config: ModelConfig) -> list[PlanStep]:
    """Ordered activation/parameter schedule shared by the builder and estimators."""
    steps: list[PlanStep] = []
    grid = config.input_grid
    in_ch = 1
    for level in range(config.num_levels - 1):
        out_ch = config.channels_at(level)
        for j in range(config.convs_per_level):
            steps.append(PlanStep(f"enc{level}_conv{j}", "conv", in_ch, out_ch, grid, config.kernel))
            in_ch = out_ch
        grid = tuple(s // 2 for s in grid)
        steps.append(PlanStep(f"enc{level}_pool", "pool", out_ch, out_ch, grid))
    if config.head == "lcs":
        steps.append(PlanStep("bottleneck_concat", "concat", in_ch, in_ch + COND_CHANNELS, grid))
        in_ch += COND_CHANNELS
    out_ch = config.channels_at(config.num_levels - 1)
    steps.append(PlanStep("bottleneck_conv", "conv", in_ch, out_ch, grid, config.kernel))
    in_ch = out_ch
    for level in range(config.num_levels - 2, -1, -1):
        skip_ch = config.channels_at(level)
        grid = tuple(s * 2 for s in grid)
        steps.append(PlanStep(f"dec{level}_up", "upconv", in_ch, skip_ch, grid, (2, 2, 2)))
        steps.append(PlanStep(f"dec{level}_concat", "concat", skip_ch, 2 * skip_ch, grid))
        in_ch = 2 * skip_ch
        for j in range(config.convs_per_level):
            steps.append(PlanStep(f"dec{level}_conv{j}", "conv", in_ch, skip_ch, grid, config.kernel))
            in_ch = skip_ch
    steps.append(PlanStep("head_conv", "conv", in_ch, config.out_channels, grid, config.kernel))
    steps.append(PlanStep("head_squash", "squash", config.out_channels, config.out_channels, grid))
    return steps


def estimate_activation_memory(config: ModelConfig, bytes_per_scalar: int,
                               training: bool = True) -> int:
    """Analytic activation footprint in bytes for one sample.

    Sums every layer-output tensor in `layer_plan` (the network input is
    excluded: it needs no gradient). Training doubles the total for gradient
    buffers (store-all policy); inference counts the forward tensors once.
    The result is affine in the baseline head width C and does not depend on
    the vocabulary size for the conditioned head.
    """
    total = sum(step.activation_numel for step in layer_plan(config))
    multiplier = TRAIN_ACTIVATION_MULTIPLIER if training else 1
    return total * bytes_per_scalar * multiplier


class SegUNet(nn.Module):
    """Single-conv-per-level 3D U-Net over (B, 1, D, H, W) tensors.

    With a "lcs" head, `forward` requires a (B, 2, D/f, H/f, W/f) condition
    tensor (f = config.pool_factor) concatenated ahead of the bottleneck
    convolution; with a "baseline" head the condition must be None.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        pad = tuple(k // 2 for k in config.kernel)
        levels = config.num_levels - 1

        def conv(cin, cout):
            return nn.Conv3d(cin, cout, config.kernel, padding=pad)

        self.encoders = nn.ModuleList()
        in_ch = 1
        for level in range(levels):
            block = nn.ModuleList()
            for _ in range(config.convs_per_level):
                block.append(conv(in_ch, config.channels_at(level)))
                in_ch = config.channels_at(level)
            self.encoders.append(block)
        bottleneck_in = in_ch + (COND_CHANNELS if config.head == "lcs" else 0)
        self.bottleneck = conv(bottleneck_in, config.channels_at(levels))
        in_ch = config.channels_at(levels)
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in range(levels - 1, -1, -1):
            skip_ch = config.channels_at(level)
            self.upsamplers.append(nn.ConvTranspose3d(in_ch, skip_ch, 2, stride=2))
            block = nn.ModuleList()
            cin = 2 * skip_ch
            for _ in range(config.convs_per_level):
                block.append(conv(cin, skip_ch))
                cin = skip_ch
            self.decoders.append(block)
            in_ch = skip_ch
        self.head = conv(config.base_channels, config.out_channels)
        self._init_weights(np.random.default_rng(config.seed))

    def _init_weights(self, rng: np.random.Generator) -> None:
        # Fan-in scaled uniform weights, zero biases, drawn from a private
        # numpy stream so two builds from the same config are identical.
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Conv3d):
                    fan_in = module.weight[0].numel()
                elif isinstance(module, nn.ConvTranspose3d):
                    fan_in = module.in_channels * prod(module.kernel_size) // prod(module.stride)
                else:
                    continue
                bound = fan_in ** -0.5
                values = rng.uniform(-bound, bound, size=tuple(module.weight.shape))
                module.weight.copy_(torch.from_numpy(values.astype(np.float32)))
                module.bias.zero_()

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        if tuple(x.shape[-3:]) != self.config.input_grid:
            raise ValueError(f"input grid {tuple(x.shape[-3:])} != {self.config.input_grid}")
        if self.config.head == "lcs":
            if cond is None:
                raise ValueError("the conditioned head requires a condition tensor")
            expected = (COND_CHANNELS, *self.config.bottleneck_grid)
            if tuple(cond.shape[-4:]) != expected:
                raise ValueError(f"condition shape {tuple(cond.shape[-4:])} != {expected}")
        elif cond is not None:
            raise ValueError("the baseline head takes no condition input")
        skips = []
        for block in self.encoders:
            for c in block:
                x = torch.relu(c(x))
            skips.append(x)
            x = torch.max_pool3d(x, 2)
        if cond is not None:
            x = torch.cat([x, cond], dim=1)
        x = torch.relu(self.bottleneck(x))
        for i, (up, block) in enumerate(zip(self.upsamplers, self.decoders)):
            x = torch.cat([up(x), skips[-1 - i]], dim=1)
            for c in block:
                x = torch.relu(c(x))
        return torch.sigmoid(self.head(x))


def build_model(config: ModelConfig) -> SegUNet:
    return SegUNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _to_tensor(image: ImageVolume) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.data, dtype=np.float32))[None, None]


def forward_baseline(model: SegUNet, image: ImageVolume, class_ids=None) -> ProbMap:
    """One multi-channel forward pass; channel i scores class_ids[i]."""
    if model.config.head != "baseline":
        raise ValueError("model does not have a baseline head")
    with torch.no_grad():
        out = model(_to_tensor(image))[0].numpy()
    if class_ids is None:
        labels = tuple(frozenset() for _ in range(out.shape[0]))
    else:
        if len(class_ids) != out.shape[0]:
            raise ValueError(f"{out.shape[0]} channels but {len(class_ids)} class ids")
        labels = tuple(frozenset({int(c)}) for c in class_ids)
    return ProbMap(out, channel_labels=labels)


def forward_lcs(model: SegUNet, image: ImageVolume, cond) -> ProbMap:
    """One conditioned forward pass; always a single output channel."""
    if model.config.head != "lcs":
        raise ValueError("model does not have a conditioned head")
    cond_tensor = torch.from_numpy(np.ascontiguousarray(cond.data, dtype=np.float32))[None]
    with torch.no_grad():
        out = model(_to_tensor(image), cond_tensor)[0].numpy()
    return ProbMap(out, channel_labels=(frozenset(cond.class_set),))


# --- Checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    """Serialized model: config, weights, vocabulary, and the conditioning atlas.

    Conditioned-head checkpoints always carry `atlas_ref` plus the atlas grids
    themselves, so inference needs no side files. `trainer_state` holds the
    optimizer moments, last-epoch weights, and rng state needed to resume.
    """

    config: ModelConfig
    weights: dict[str, np.ndarray]
    vocabulary: tuple[tuple[int, str], ...] = ()
    hierarchy: dict[int, tuple[int, ...]] = field(default_factory=dict)
    atlas_ref: str | None = None
    atlas_image: np.ndarray | None = None
    atlas_labels: np.ndarray | None = None
    atlas_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    metadata: dict = field(default_factory=dict)
    trainer_state: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.config.head == "lcs":
            if not self.atlas_ref:
                raise ValueError("conditioned-head checkpoints must name their atlas case")
            if self.atlas_image is None or self.atlas_labels is None:
                raise ValueError("conditioned-head checkpoints must embed the atlas grids")


def _tensor_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(f"weights/{k}", v) for k, v in sorted(ckpt.weights.items())]
    entries += [(f"trainer/{k}", v) for k, v in sorted(ckpt.trainer_state.items())]
    if ckpt.atlas_image is not None:
        entries.append(("atlas/image", ckpt.atlas_image))
    if ckpt.atlas_labels is not None:
        entries.append(("atlas/labels", ckpt.atlas_labels))
    return entries


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write a checkpoint archive: manifest JSON plus named raw tensors.

    Archive entries use a fixed timestamp and ordering, so saving the result of
    `load_checkpoint` reproduces the original file byte for byte.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = _tensor_entries(ckpt)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.config),
        "vocabulary": [[i, n] for i, n in ckpt.vocabulary],
        "hierarchy": {str(k): list(v) for k, v in ckpt.hierarchy.items()},
        "atlas_ref": ckpt.atlas_ref,
        "atlas_spacing": list(ckpt.atlas_spacing),
        "metadata": ckpt.metadata,
        "tensors": [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            for name, arr in entries
        ],
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        def add(name: str, payload: bytes):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)

        add("manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        for name, arr in entries:
            add(f"tensors/{name}.raw", np.ascontiguousarray(arr).tobytes())
    path.write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
        cfg_dict = dict(manifest["config"])
        cfg_dict["input_grid"] = tuple(cfg_dict["input_grid"])
        cfg_dict["kernel"] = tuple(cfg_dict["kernel"])
        config = ModelConfig(**cfg_dict)
        tensors: dict[str, np.ndarray] = {}
        for spec in manifest["tensors"]:
            raw = zf.read(f"tensors/{spec['name']}.raw")
            tensors[spec["name"]] = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(
                spec["shape"]
            ).copy()
    weights = {k[len("weights/"):]: v for k, v in tensors.items() if k.startswith("weights/")}
    trainer = {k[len("trainer/"):]: v for k, v in tensors.items() if k.startswith("trainer/")}
    return Checkpoint(
        config=config,
        weights=weights,
        vocabulary=tuple((int(i), str(n)) for i, n in manifest["vocabulary"]),
        hierarchy={int(k): tuple(v) for k, v in manifest["hierarchy"].items()},
        atlas_ref=manifest["atlas_ref"],
        atlas_image=tensors.get("atlas/image"),
        atlas_labels=tensors.get("atlas/labels"),
        atlas_spacing=tuple(manifest["atlas_spacing"]),
        metadata=manifest["metadata"],
        trainer_state=trainer,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> SegUNet:
    """Rebuild the network and load its weights; returned in eval mode."""
    model = build_model(ckpt.config)
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.weights):
        raise ValueError("checkpoint weights do not match the architecture")
    with torch.no_grad():
        for name, param in named.items():
            arr = ckpt.weights[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise ValueError(f"shape mismatch for {name}")
            param.copy_(torch.from_numpy(arr.astype(np.float32, copy=False)))
    model.eval()
    return model


def weights_of(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy().copy() for k, v in model.named_parameters()}
