"""Volume file I/O.

Two formats are understood:

* the project-native pair `<case>.f32raw` + `<case>.json`: raw little-endian
  float32 voxels in C order, plus a sidecar with `shape`, `spacing_mm`,
  `dtype`, `vocabulary`, and `hierarchy`. The sidecar `dtype` is the logical
  element type; integer grids are stored as exact integral floats.
* NIfTI-1 (`.nii` / `.nii.gz`), read-only, for ingesting real scans.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .grids import BinaryMask, ImageVolume, LabelMap

SIDECAR_KEYS = ("shape", "spacing_mm", "dtype", "vocabulary", "hierarchy")
_LOGICAL_DTYPES = {"float32": np.float32, "int32": np.int32, "uint8": np.uint8}


class VolumeFormatError(ValueError):
    """A volume file exists but cannot be parsed as claimed."""


def _stem(path: Path) -> Path:
    if path.suffix in (".json", ".f32raw"):
        return path.with_suffix("")
    return path


def _write_native(stem: Path, data: np.ndarray, spacing, dtype: str,
                  vocabulary=(), hierarchy=None) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(data, dtype=np.float32)
    stem.with_suffix(".f32raw").write_bytes(raw.astype("<f4").tobytes())
    sidecar = {
        "shape": list(data.shape),
        "spacing_mm": [float(s) for s in spacing],
        "dtype": dtype,
        "vocabulary": [[int(i), str(n)] for i, n in vocabulary],
        "hierarchy": {str(k): [int(c) for c in v] for k, v in (hierarchy or {}).items()},
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def _read_native(path: Path) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    sidecar_path = stem.with_suffix(".json")
    raw_path = stem.with_suffix(".f32raw")
    if not sidecar_path.exists() or not raw_path.exists():
        raise FileNotFoundError(f"missing native volume pair for {stem}")
    try:
        meta = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{sidecar_path}: invalid JSON sidecar") from exc
    missing = [k for k in SIDECAR_KEYS if k not in meta]
    if missing:
        raise VolumeFormatError(f"{sidecar_path}: sidecar missing keys {missing}")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 3 or min(shape) < 1:
        raise VolumeFormatError(f"{sidecar_path}: bad shape {meta['shape']}")
    if any(s <= 0 for s in meta["spacing_mm"]):
        raise VolumeFormatError(f"{sidecar_path}: non-positive spacing {meta['spacing_mm']}")
    if meta["dtype"] not in _LOGICAL_DTYPES:
        raise VolumeFormatError(f"{sidecar_path}: unsupported dtype {meta['dtype']!r}")
    buf = raw_path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(buf) != expected:
        raise VolumeFormatError(f"{raw_path}: {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f4").reshape(shape)
    data = data.astype(_LOGICAL_DTYPES[meta["dtype"]])
    meta["id"] = stem.name
    return data, meta


def save_volume(volume: ImageVolume, stem: str | Path) -> None:
    _write_native(Path(stem), volume.data, volume.spacing, "float32")


def save_labelmap(labels: LabelMap, stem: str | Path,
                  spacing=(1.0, 1.0, 1.0)) -> None:
    _write_native(Path(stem), labels.data, spacing, "int32",
                  vocabulary=labels.vocabulary, hierarchy=labels.hierarchy)


def save_mask(mask: BinaryMask, stem: str | Path, spacing=(1.0, 1.0, 1.0)) -> None:
    vocabulary = [[c, f"class_{c}"] for c in sorted(mask.source_classes)]
    _write_native(Path(stem), mask.data, spacing, "uint8", vocabulary=vocabulary)


def load_volume(path: str | Path) -> ImageVolume:
    """Load an intensity volume from a native pair or a NIfTI-1 file.

    Intensities are returned unmodified (no normalization).
    """
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        data, spacing = _read_nifti(path)
        return ImageVolume(data, spacing, id=path.name.split(".")[0])
    data, meta = _read_native(path)
    return ImageVolume(data.astype(np.float32), tuple(meta["spacing_mm"]), id=meta["id"])


def load_labelmap(path: str | Path) -> LabelMap:
    """Load a label map, validating vocabulary and hierarchy consistency."""
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        data, _ = _read_nifti(path)
        if not np.allclose(data, np.round(data)):
            raise VolumeFormatError(f"{path}: label volume has non-integer values")
        return LabelMap(
            data.astype(np.int32),
            vocabulary=tuple((int(i), f"class_{int(i)}") for i in np.unique(data) if i != 0),
            hierarchy={},
            id=path.name.split(".")[0],
        )
    data, meta = _read_native(path)
    labels = LabelMap(
        data.astype(np.int32),
        vocabulary=tuple((int(i), str(n)) for i, n in meta["vocabulary"]),
        hierarchy={int(k): tuple(v) for k, v in meta["hierarchy"].items()},
        id=meta["id"],
    )
    validate_hierarchy(labels)
    return labels


def load_mask(path: str | Path) -> BinaryMask:
    data, meta = _read_native(Path(path))
    source = frozenset(int(i) for i, _ in meta["vocabulary"])
    return BinaryMask((data > 0.5).astype(np.uint8), source_classes=source)


def validate_hierarchy(labels: LabelMap) -> None:
    """Check that each coarse region is exactly the union of its children.

    With leaf-only grids this reduces to: an id with children must never occur
    as a raw voxel value (its region exists only as the union of its leaves).
    """
    present = set(np.unique(labels.data).tolist())
    for coarse, children in labels.hierarchy.items():
        if not children:
            continue
        if coarse in present:
            raise VolumeFormatError(
                f"label {coarse} has children {children} but also appears as a raw voxel value; "
                "its region would not equal the union of its children"
            )


# --- NIfTI-1 ingestion (read-only) -----------------------------------------

_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
    64: np.float64, 256: np.int8, 512: np.uint16, 768: np.uint32,
}


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    if not path.exists():
        raise FileNotFoundError(path)
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "rb") as f:
        header = f.read(348)
        if len(header) < 348:
            raise VolumeFormatError(f"{path}: truncated NIfTI header")
        endian = "<"
        (sizeof_hdr,) = struct.unpack("<i", header[:4])
        if sizeof_hdr != 348:
            endian = ">"
            (sizeof_hdr,) = struct.unpack(">i", header[:4])
            if sizeof_hdr != 348:
                raise VolumeFormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
        magic = header[344:348]
        if magic not in (b"n+1\x00", b"ni1\x00"):
            raise VolumeFormatError(f"{path}: bad NIfTI magic {magic!r}")
        if magic == b"ni1\x00":
            raise VolumeFormatError(f"{path}: detached .hdr/.img pairs are not supported")
        dim = struct.unpack(endian + "8h", header[40:56])
        ndim = dim[0]
        shape = tuple(int(d) for d in dim[1:1 + ndim])
        if ndim > 3 and all(d == 1 for d in shape[3:]):
            shape = shape[:3]
        if len(shape) != 3 or min(shape) < 1:
            raise VolumeFormatError(f"{path}: expected a 3D volume, got dims {shape}")
        (datatype,) = struct.unpack(endian + "h", header[70:72])
        if datatype not in _NIFTI_DTYPES:
            raise VolumeFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
        pixdim = struct.unpack(endian + "8f", header[76:108])
        spacing = tuple(float(p) for p in pixdim[1:4])
        if any(s <= 0 or not np.isfinite(s) for s in spacing):
            raise VolumeFormatError(f"{path}: non-positive voxel spacing {spacing}")
        (vox_offset,) = struct.unpack(endian + "f", header[108:112])
        slope, inter = struct.unpack(endian + "2f", header[112:120])
        f.seek(int(vox_offset))
        count = int(np.prod(shape))
        dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
        buf = f.read(count * dtype.itemsize)
        if len(buf) != count * dtype.itemsize:
            raise VolumeFormatError(f"{path}: data section shorter than header claims")
        # On-disk order is Fortran (first axis fastest); keep header axis order.
        data = np.frombuffer(buf, dtype=dtype).reshape(shape, order="F")
        data = np.ascontiguousarray(data).astype(np.float32)
        if slope not in (0.0, 1.0) or inter != 0.0:
            scale = slope if slope != 0.0 else 1.0
            data = data * scale + inter
        return data, spacing
