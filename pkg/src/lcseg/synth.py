"""Deterministic synthetic phantoms with a coarse-to-fine label hierarchy.

Cases share a base layout (structure sites, sizes, intensities) derived from
the config seed; each case jitters positions and scales around that layout, so
an atlas case is spatially informative about every other case. Fine labels are
geometric bisections of their parent, giving an exact coarse = union-of-children
hierarchy with a small sibling intensity contrast.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .conditioning import Atlas
from .grids import ImageVolume, LabelMap, Shape3, binarize
from . import volume_io

DATASET_MANIFEST = "dataset.json"
SHAPE_FAMILIES = ("ellipsoid", "box", "shell")


class PlacementError(RuntimeError):
    """Structures could not be placed disjointly within the retry budget."""


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry, intensity, and jitter recipe for one synthetic cohort."""

    grid: Shape3 = (32, 32, 32)
    n_coarse: int = 4
    fine_split: Mapping[int, int] = field(default_factory=dict)  # coarse id -> n children
    shape_families: tuple[str, ...] = SHAPE_FAMILIES
    intensity_range: tuple[float, float] = (0.4, 1.0)
    intensities: Mapping[int, float] | None = None  # optional per-coarse override
    sibling_contrast: float = 0.25  # intensity spread across fine siblings
    noise_sigma: float = 0.08
    jitter_pos: float = 1.5  # voxels, per axis, uniform
    jitter_scale: float = 0.1  # relative size jitter
    orient_jitter: float = 0.15  # tilt of the fine-split plane across cases
    radius_range: tuple[float, float] = (0.22, 0.32)  # fraction of lattice cell
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(
            self, "fine_split", {int(k): int(v) for k, v in dict(self.fine_split).items()}
        )
        if self.n_coarse < 1:
            raise ValueError("need at least one structure")
        if min(self.grid) < 8:
            raise ValueError(f"grid {self.grid} too small to place structures")
        for coarse, n_children in self.fine_split.items():
            if not 1 <= coarse <= self.n_coarse:
                raise ValueError(f"fine_split references unknown coarse id {coarse}")
            if n_children < 2:
                raise ValueError("a split needs at least 2 children")
        unknown = set(self.shape_families) - set(SHAPE_FAMILIES)
        if unknown:
            raise ValueError(f"unknown shape families {sorted(unknown)}")

    def vocabulary(self) -> tuple[tuple[int, str], ...]:
        vocab = [(i, f"region_{i:02d}") for i in range(1, self.n_coarse + 1)]
        next_id = self.n_coarse + 1
        for coarse in sorted(self.fine_split):
            for j in range(self.fine_split[coarse]):
                vocab.append((next_id, f"region_{coarse:02d}_part_{chr(ord('a') + j)}"))
                next_id += 1
        return tuple(vocab)

    def hierarchy(self) -> dict[int, tuple[int, ...]]:
        table: dict[int, tuple[int, ...]] = {}
        next_id = self.n_coarse + 1
        for coarse in sorted(self.fine_split):
            n = self.fine_split[coarse]
            table[coarse] = tuple(range(next_id, next_id + n))
            next_id += n
        return table

    def coarse_ids(self) -> tuple[int, ...]:
        return tuple(range(1, self.n_coarse + 1))


@dataclass(frozen=True)
class _BaseStructure:
    class_id: int
    kind: str
    center: np.ndarray  # voxel coordinates, float
    radii: np.ndarray  # semi-axes in voxels
    intensity: float
    split_normal: np.ndarray | None  # base orientation of the fine bisection


def _base_layout(cfg: PhantomConfig) -> list[_BaseStructure]:
    """Case-independent layout drawn from the config seed."""
    rng = np.random.default_rng(cfg.seed)
    per_axis = int(np.ceil(cfg.n_coarse ** (1 / 3)))
    while per_axis ** 3 < cfg.n_coarse:
        per_axis += 1
    cells = np.array(cfg.grid, dtype=np.float64) / per_axis
    sites = [
        (i, j, k)
        for i in range(per_axis)
        for j in range(per_axis)
        for k in range(per_axis)
    ]
    order = rng.permutation(len(sites))[: cfg.n_coarse]
    if cfg.intensities is not None:
        levels = {int(k): float(v) for k, v in dict(cfg.intensities).items()}
    else:
        lo, hi = cfg.intensity_range
        ladder = np.linspace(lo, hi, cfg.n_coarse)
        levels = {i + 1: float(v) for i, v in zip(rng.permutation(cfg.n_coarse), ladder)}
    structures = []
    for idx in range(cfg.n_coarse):
        class_id = idx + 1
        site = np.array(sites[order[idx]], dtype=np.float64)
        center = (site + 0.5) * cells
        radii = cells * rng.uniform(*cfg.radius_range, size=3)
        kind = cfg.shape_families[idx % len(cfg.shape_families)]
        normal = None
        if class_id in cfg.fine_split:
            axis = np.zeros(3)
            axis[idx % 3] = 1.0
            normal = axis
        structures.append(_BaseStructure(class_id, kind, center, radii, levels[class_id], normal))
    return structures


def _rasterize(kind: str, center: np.ndarray, radii: np.ndarray, grid: Shape3) -> np.ndarray:
    coords = np.indices(grid, dtype=np.float64)
    rel = [(coords[a] - center[a]) / radii[a] for a in range(3)]
    if kind == "ellipsoid":
        return rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2 <= 1.0
    if kind == "box":
        return (np.abs(rel[0]) <= 1.0) & (np.abs(rel[1]) <= 1.0) & (np.abs(rel[2]) <= 1.0)
    if kind == "shell":
        r2 = rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2
        return (r2 <= 1.0) & (r2 >= 0.55 ** 2)
    raise ValueError(f"unknown shape kind {kind!r}")


def _split_structure(mask: np.ndarray, normal: np.ndarray, n_children: int) -> list[np.ndarray]:
    """Partition a structure into n children by planes through its centroid."""
    voxels = np.argwhere(mask)
    centroid = voxels.mean(axis=0)
    proj = (voxels - centroid) @ normal
    edges = np.quantile(proj, np.linspace(0, 1, n_children + 1)[1:-1])
    assignment = np.searchsorted(edges, proj, side="right")
    children = []
    for j in range(n_children):
        child = np.zeros_like(mask)
        picks = voxels[assignment == j]
        child[picks[:, 0], picks[:, 1], picks[:, 2]] = True
        children.append(child)
    return children


def generate_case(cfg: PhantomConfig, case_seed: int,
                  max_retries: int = 20) -> tuple[ImageVolume, LabelMap]:
    """Generate one case; bit-identical for identical (cfg, case_seed)."""
    rng = np.random.default_rng([cfg.seed, 977, int(case_seed)])
    layout = _base_layout(cfg)
    hierarchy = cfg.hierarchy()
    labels = np.zeros(cfg.grid, dtype=np.int32)
    image = np.zeros(cfg.grid, dtype=np.float64)
    occupied = np.zeros(cfg.grid, dtype=bool)
    for base in layout:
        placed = False
        for _ in range(max_retries):
            center = base.center + rng.uniform(-cfg.jitter_pos, cfg.jitter_pos, size=3)
            radii = base.radii * (1.0 + rng.uniform(-cfg.jitter_scale, cfg.jitter_scale))
            mask = _rasterize(base.kind, center, radii, cfg.grid)
            if not mask.any() or (mask & occupied).any():
                continue
            children_ids = hierarchy.get(base.class_id, ())
            if children_ids:
                tilt = rng.normal(0.0, cfg.orient_jitter, size=3)
                normal = base.split_normal + tilt
                normal = normal / np.linalg.norm(normal)
                parts = _split_structure(mask, normal, len(children_ids))
                if any(not p.any() for p in parts):
                    continue
                n = len(children_ids)
                for j, (child_id, part) in enumerate(zip(children_ids, parts)):
                    offset = cfg.sibling_contrast * (j / (n - 1) - 0.5)
                    labels[part] = child_id
                    image[part] = base.intensity + offset
            else:
                labels[mask] = base.class_id
                image[mask] = base.intensity
            occupied |= mask
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"could not place structure {base.class_id} disjointly "
                f"after {max_retries} retries (case_seed={case_seed})"
            )
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=cfg.grid)
    case_id = f"case_{int(case_seed):03d}"
    volume = ImageVolume(image.astype(np.float32), (1.0, 1.0, 1.0), id=case_id)
    labelmap = LabelMap(labels, cfg.vocabulary(), hierarchy, id=case_id)
    return volume, labelmap


# --- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    """One train/atlas/val/test partition of the case ids."""

    train: tuple[str, ...]
    atlas: str
    val: tuple[str, ...]
    test: tuple[str, ...]

    def all_cases(self) -> tuple[str, ...]:
        return self.train + (self.atlas,) + self.val + self.test


def make_splits(case_ids: Sequence[str], sizes: tuple[int, int, int, int],
                seed: int, repeats: int = 1) -> list[Split]:
    """Partition cases into (train, atlas, val, test) groups, `repeats` times.

    Test sets are pairwise disjoint across repeats whenever repeats * n_test
    fits in the cohort; otherwise that constraint is dropped with a warning
    and each repeat is an independent shuffle.
    """
    case_ids = [str(c) for c in case_ids]
    n_train, n_atlas, n_val, n_test = (int(s) for s in sizes)
    if n_atlas != 1:
        raise ValueError("exactly one atlas case per split")
    if n_train < 1 or n_val < 0 or n_test < 1 or repeats < 1:
        raise ValueError(f"bad split sizes {sizes} / repeats {repeats}")
    if n_train + n_atlas + n_val + n_test != len(case_ids):
        raise ValueError(f"sizes {sizes} do not sum to {len(case_ids)} cases")
    rng = np.random.default_rng(seed)
    ids = np.asarray(case_ids)
    splits = []
    if repeats * n_test <= len(case_ids):
        order = rng.permutation(len(ids))
        for r in range(repeats):
            test = sorted(ids[order[r * n_test:(r + 1) * n_test]].tolist())
            rest = [c for c in case_ids if c not in test]
            shuffled = [rest[i] for i in rng.permutation(len(rest))]
            splits.append(Split(
                train=tuple(sorted(shuffled[:n_train])),
                atlas=shuffled[n_train],
                val=tuple(sorted(shuffled[n_train + 1:n_train + 1 + n_val])),
                test=tuple(test),
            ))
    else:
        warnings.warn(
            f"{repeats} repeats x {n_test} test cases exceed {len(case_ids)} cases; "
            "test sets will overlap across repeats",
            stacklevel=2,
        )
        for _ in range(repeats):
            shuffled = [case_ids[i] for i in rng.permutation(len(ids))]
            splits.append(Split(
                train=tuple(sorted(shuffled[:n_train])),
                atlas=shuffled[n_train],
                val=tuple(sorted(shuffled[n_train + 1:n_train + 1 + n_val])),
                test=tuple(sorted(shuffled[n_train + 1 + n_val:])),
            ))
    return splits


# --- cohorts and the on-disk dataset layout ----------------------------------


@dataclass
class Cohort:
    """An in-memory dataset: cases, shared vocabulary/hierarchy, and splits."""

    cases: dict[str, tuple[ImageVolume, LabelMap]]
    vocabulary: tuple[tuple[int, str], ...]
    hierarchy: dict[int, tuple[int, ...]]
    splits: tuple[Split, ...]
    phantom: PhantomConfig | None = None

    def image(self, case_id: str) -> ImageVolume:
        return self.cases[case_id][0]

    def labels(self, case_id: str) -> LabelMap:
        return self.cases[case_id][1]

    def atlas_for(self, split: Split) -> Atlas:
        image, labels = self.cases[split.atlas]
        return Atlas(image, labels, split.atlas)

    def class_ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.vocabulary)


def build_cohort(cfg: PhantomConfig, n_cases: int, split_sizes: tuple[int, int, int, int],
                 repeats: int = 1, split_seed: int | None = None) -> Cohort:
    cases = {}
    for case_seed in range(n_cases):
        volume, labelmap = generate_case(cfg, case_seed)
        cases[volume.id] = (volume, labelmap)
    splits = make_splits(sorted(cases), split_sizes,
                         cfg.seed if split_seed is None else split_seed, repeats)
    return Cohort(cases, cfg.vocabulary(), cfg.hierarchy(), tuple(splits), phantom=cfg)


def write_dataset(cohort: Cohort, out_dir: str | Path) -> Path:
    """Write every case in the native volume format plus a dataset manifest."""
    out_dir = Path(out_dir)
    case_dir = out_dir / "cases"
    case_dir.mkdir(parents=True, exist_ok=True)
    for case_id in sorted(cohort.cases):
        image, labels = cohort.cases[case_id]
        volume_io.save_volume(image, case_dir / case_id)
        volume_io.save_labelmap(labels, case_dir / f"{case_id}_labels", spacing=image.spacing)
    manifest = {
        "format_version": 1,
        "vocabulary": [[i, n] for i, n in cohort.vocabulary],
        "hierarchy": {str(k): list(v) for k, v in cohort.hierarchy.items()},
        "cases": sorted(cohort.cases),
        "splits": [
            {"train": list(s.train), "atlas": s.atlas, "val": list(s.val), "test": list(s.test)}
            for s in cohort.splits
        ],
        "phantom_config": _phantom_to_json(cohort.phantom) if cohort.phantom else None,
    }
    manifest_path = out_dir / DATASET_MANIFEST
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(path: str | Path) -> Cohort:
    """Load a dataset directory written by `write_dataset`."""
    root = Path(path)
    manifest_path = root / DATASET_MANIFEST if root.is_dir() else root
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    cases = {}
    for case_id in manifest["cases"]:
        image = volume_io.load_volume(base / "cases" / f"{case_id}.f32raw")
        labels = volume_io.load_labelmap(base / "cases" / f"{case_id}_labels.f32raw")
        cases[case_id] = (image, LabelMap(labels.data, labels.vocabulary, labels.hierarchy, case_id))
    splits = tuple(
        Split(tuple(s["train"]), s["atlas"], tuple(s["val"]), tuple(s["test"]))
        for s in manifest["splits"]
    )
    phantom = _phantom_from_json(manifest.get("phantom_config"))
    return Cohort(
        cases,
        tuple((int(i), str(n)) for i, n in manifest["vocabulary"]),
        {int(k): tuple(v) for k, v in manifest["hierarchy"].items()},
        splits,
        phantom=phantom,
    )


def _phantom_to_json(cfg: PhantomConfig) -> dict:
    payload = asdict(cfg)
    payload["fine_split"] = {str(k): v for k, v in cfg.fine_split.items()}
    if cfg.intensities is not None:
        payload["intensities"] = {str(k): v for k, v in dict(cfg.intensities).items()}
    return payload


def _phantom_from_json(payload: dict | None) -> PhantomConfig | None:
    if payload is None:
        return None
    data = dict(payload)
    data["grid"] = tuple(data["grid"])
    data["fine_split"] = {int(k): int(v) for k, v in data.get("fine_split", {}).items()}
    if data.get("intensities") is not None:
        data["intensities"] = {int(k): float(v) for k, v in data["intensities"].items()}
    for key in ("shape_families", "intensity_range", "radius_range"):
        if key in data:
            data[key] = tuple(data[key])
    return PhantomConfig(**data)


def verify_hierarchy_exactness(labels: LabelMap) -> None:
    """Assert that every coarse region equals the union of its children.

    In the leaf-only representation this means a split coarse id never occurs
    as a raw voxel value; the union comparison then guards the id expansion.
    """
    raw_values = set(np.unique(labels.data).tolist())
    for coarse, children in labels.hierarchy.items():
        if not children:
            continue
        if coarse in raw_values:
            raise AssertionError(
                f"split coarse id {coarse} appears as a raw voxel value; "
                "its region would not equal the union of its children"
            )
        parent = binarize(labels, {coarse}).data
        union = np.zeros_like(parent)
        for child in children:
            union |= binarize(labels, {child}).data
        if not np.array_equal(parent, union):
            raise AssertionError(f"coarse {coarse} != union of children {children}")
