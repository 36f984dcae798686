"""Volume loading, nnU-Net-style preprocessing and patch extraction.

Arrays are held in (D, H, W) order. For NIfTI input that is (k, j, i): the
file's fastest axis ``i`` becomes the last array axis, and ``spacing`` is
reported in the same order, i.e. ``(pixdim[3], pixdim[2], pixdim[1])``.
"""

from __future__ import annotations

import gzip
import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .datapool import Modality
from .errors import (
    CorruptHeader,
    DegenerateOutput,
    DimensionalityError,
    EmptyForeground,
    IncompatibleVersion,
    UnsupportedDatatype,
    VolumeError,
)

DEFAULT_PATCH_SIZE = (112, 160, 192)

# NIfTI-1 datatype code -> numpy dtype
NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple
    modality: Modality = Modality.OTHER
    labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.modality = Modality.parse(self.modality)
        if self.data.ndim != 3:
            raise DimensionalityError(f"volume data must be 3D, got shape {self.data.shape}")
        if len(self.spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be three positive numbers, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise VolumeError("volume data contains NaN or Inf")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.data.shape:
                raise VolumeError(f"label shape {self.labels.shape} != data shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class PreprocessSpec:
    target_spacing: tuple
    normalization: str = "zscore"
    clip_percentiles: tuple = (0.5, 99.5)

    def __post_init__(self):
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        if len(self.target_spacing) != 3 or any(s <= 0 for s in self.target_spacing):
            raise VolumeError(f"target spacing must be positive, got {self.target_spacing}")
        if self.normalization not in ("ct_clip_zscore", "zscore"):
            raise VolumeError(f"unknown normalization {self.normalization!r}")
        lo, hi = self.clip_percentiles
        if not 0 <= lo < hi <= 100:
            raise VolumeError(f"bad clip percentiles {self.clip_percentiles}")

    @classmethod
    def for_modality(cls, modality, target_spacing) -> "PreprocessSpec":
        scheme = "ct_clip_zscore" if Modality.parse(modality) is Modality.CT else "zscore"
        return cls(target_spacing=target_spacing, normalization=scheme)


@dataclass
class Patch:
    image: np.ndarray
    label: np.ndarray
    source_case: int = -1
    source_dataset: str = ""
    center_voxel: tuple = (0, 0, 0)


# ---------------------------------------------------------------- NIfTI-1


def _open_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise CorruptHeader(f"{path}: broken gzip stream ({exc})") from exc
    return raw


def read_nifti(path, modality=Modality.OTHER) -> Volume:
    """Read a single-file NIfTI-1 volume (``.nii`` or ``.nii.gz``)."""
    raw = _open_bytes(path)
    if len(raw) < 348:
        raise CorruptHeader(f"{path}: file shorter than a NIfTI-1 header")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", raw[:4])[0] == 348:
            break
    else:
        raise CorruptHeader(f"{path}: sizeof_hdr is not 348")
    if raw[344:348] != b"n+1\x00":
        raise CorruptHeader(f"{path}: magic {raw[344:348]!r} is not 'n+1'")

    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = struct.unpack(endian + "f", raw[108:112])[0]
    scl_slope, scl_inter = struct.unpack(endian + "2f", raw[112:120])

    if dim[0] != 3:
        raise DimensionalityError(f"{path}: dim[0]={dim[0]}, only 3D volumes are supported")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) < 1:
        raise CorruptHeader(f"{path}: non-positive dimension {dim[1:4]}")
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatype(f"{path}: NIfTI datatype code {datatype}")

    dtype = np.dtype(NIFTI_DTYPES[datatype]).newbyteorder(endian)
    offset = int(vox_offset)
    count = nx * ny * nz
    if offset < 348 or offset + count * dtype.itemsize > len(raw):
        raise CorruptHeader(f"{path}: voxel data truncated or vox_offset invalid")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    arr = arr.reshape((nz, ny, nx)).astype(dtype.newbyteorder("="))

    if scl_slope != 0 and np.isfinite(scl_slope) and not (scl_slope == 1 and scl_inter == 0):
        arr = arr.astype(np.float64) * float(scl_slope) + float(scl_inter)

    spacing = tuple(abs(float(p)) or 1.0 for p in (pixdim[3], pixdim[2], pixdim[1]))
    meta = {"qform_code": struct.unpack(endian + "h", raw[252:254])[0],
            "sform_code": struct.unpack(endian + "h", raw[254:256])[0],
            "srow": [list(struct.unpack(endian + "4f", raw[280 + 16 * r:296 + 16 * r])) for r in range(3)],
            "source": Path(path).name}
    return Volume(arr, spacing, modality=modality, meta=meta)


def read_case(image_path, label_path=None, modality=Modality.OTHER) -> Volume:
    """Load an image (NIfTI or internal format) with its optional label file."""
    image_path = str(image_path)
    if image_path.endswith(".tsv3d"):
        vol = read_internal(image_path)
        if label_path and str(label_path) != image_path:
            vol.labels = _read_labels(label_path)
        return vol
    vol = read_nifti(image_path, modality=modality)
    if label_path:
        labels = _read_labels(label_path)
        vol = Volume(vol.data, vol.spacing, vol.modality, labels, vol.meta)
    return vol


def _read_labels(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".tsv3d"):
        vol = read_internal(path)
        return vol.labels if vol.labels is not None else vol.data
    data = read_nifti(path).data
    if not np.issubdtype(data.dtype, np.integer):
        rounded = np.rint(data)
        if not np.array_equal(rounded, data):
            raise VolumeError(f"{path}: label file holds non-integer values")
        data = rounded
    return data.astype(np.int64) if data.min() < 0 or data.max() > 65535 else data.astype(np.uint16)


# ---------------------------------------------------------------- preprocessing


def resampled_shape(shape, spacing, target_spacing):
    return tuple(int(round(n * s / t)) for n, s, t in zip(shape, spacing, target_spacing))


def resample(v: Volume, target_spacing) -> Volume:
    """Trilinear for the image, nearest-neighbour for labels (align_corners=False)."""
    target_spacing = tuple(float(s) for s in target_spacing)
    out_shape = resampled_shape(v.shape, v.spacing, target_spacing)
    if min(out_shape) < 1:
        raise DegenerateOutput(f"resampling {v.shape} at {v.spacing} to {target_spacing} gives {out_shape}")
    if out_shape == v.shape:
        data, labels = v.data.copy(), None if v.labels is None else v.labels.copy()
    else:
        data = kernels.resample_linear(v.data, out_shape).astype(np.float32)
        labels = None if v.labels is None else kernels.resample_nearest(v.labels, out_shape)
    return Volume(data, target_spacing, v.modality, labels, dict(v.meta))


def median_spacing(spacings: Sequence) -> tuple:
    return tuple(float(s) for s in np.median(np.asarray(spacings, dtype=np.float64), axis=0))


def normalize(v: Volume, spec: PreprocessSpec, foreground_mask=None) -> Volume:
    """Intensity normalization.

    ``ct_clip_zscore`` clips the whole volume to the foreground percentiles and
    standardizes with the clipped foreground statistics. ``zscore`` uses the
    statistics of the masked region (whole volume when no mask is given).
    """
    x = v.data.astype(np.float64)
    if foreground_mask is None and spec.normalization == "ct_clip_zscore" and v.labels is not None:
        foreground_mask = v.labels > 0
    if foreground_mask is not None:
        foreground_mask = np.asarray(foreground_mask, dtype=bool)
        if not foreground_mask.any():
            foreground_mask = None
    region = x[foreground_mask] if foreground_mask is not None else x.ravel()
    if spec.normalization == "ct_clip_zscore":
        lo, hi = np.percentile(region, spec.clip_percentiles)
        x = np.clip(x, lo, hi)
        region = np.clip(region, lo, hi)
    mu = region.mean()
    sigma = max(region.std(), 1e-8)
    out = ((x - mu) / sigma).astype(np.float32)
    return Volume(out, v.spacing, v.modality, v.labels, dict(v.meta))


def preprocess(v: Volume, spec: PreprocessSpec) -> Volume:
    return normalize(resample(v, spec.target_spacing), spec)


# ---------------------------------------------------------------- patches


def choose_center(v: Volume, patch_size, oversample_foreground: float, rng: np.random.Generator, _fg=None):
    """Pick a patch center: a foreground voxel with probability ``oversample_foreground``, else uniform."""
    want_fg = oversample_foreground > 0 and rng.random() < oversample_foreground
    if want_fg:
        fg = _fg if _fg is not None else _foreground_index(v)
        if fg.size:
            return tuple(int(i) for i in np.unravel_index(fg[rng.integers(fg.size)], v.shape))
        warnings.warn("foreground oversampling requested but the label grid is empty", EmptyForeground, stacklevel=2)
    return tuple(int(rng.integers(n)) for n in v.shape)


def _foreground_index(v: Volume) -> np.ndarray:
    if v.labels is None:
        return np.empty(0, dtype=np.int64)
    return np.flatnonzero(v.labels)


def extract_patch(
    v: Volume,
    patch_size=DEFAULT_PATCH_SIZE,
    center=None,
    oversample_foreground: float = 0.33,
    rng: np.random.Generator | None = None,
    source_case: int = -1,
    source_dataset: str = "",
) -> Patch:
    """Crop a ``patch_size`` window around ``center``; out-of-volume voxels are zero."""
    patch_size = tuple(int(p) for p in patch_size)
    if center is None:
        rng = rng if rng is not None else np.random.default_rng()
        center = choose_center(v, patch_size, oversample_foreground, rng)
    center = tuple(int(c) for c in center)
    image = np.zeros(patch_size, dtype=np.float32)
    label = np.zeros(patch_size, dtype=np.uint16 if v.labels is None else v.labels.dtype)
    src, dst = [], []
    for c, p, n in zip(center, patch_size, v.shape):
        start = c - p // 2
        lo, hi = max(start, 0), min(start + p, n)
        if hi <= lo:
            src.append(slice(0, 0))
            dst.append(slice(0, 0))
        else:
            src.append(slice(lo, hi))
            dst.append(slice(lo - start, hi - start))
    src, dst = tuple(src), tuple(dst)
    image[dst] = v.data[src]
    if v.labels is not None:
        label[dst] = v.labels[src]
    return Patch(image[None], label, source_case, source_dataset, center)


# ---------------------------------------------------------------- internal format

MAGIC = b"TSFM-VOLUME-3D\x00\x00"
FORMAT_VERSION = 1


def write_internal(v: Volume, path) -> None:
    """Write ``.tsv3d``: magic, u32 version, u32 header length, JSON header, f32 image, u16 labels."""
    labels = v.labels
    if labels is not None:
        if labels.size and (labels.min() < 0 or labels.max() > 65535):
            raise VolumeError("labels do not fit in uint16")
        labels = labels.astype("<u2")
    header = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "modality": v.modality.value,
        "dtype": "float32",
        "has_labels": labels is not None,
        "label_dtype": "uint16",
        "meta": v.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels).tobytes())


def read_internal(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:16] != MAGIC:
        raise IncompatibleVersion(f"{path}: not a tsv3d file")
    version, hlen = struct.unpack("<II", raw[16:24])
    if version != FORMAT_VERSION:
        raise IncompatibleVersion(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(raw[24:24 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IncompatibleVersion(f"{path}: corrupt header") from exc
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    pos = 24 + hlen
    if len(raw) < pos + 4 * n + (2 * n if header["has_labels"] else 0):
        raise IncompatibleVersion(f"{path}: truncated payload")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
    labels = None
    if header["has_labels"]:
        labels = np.frombuffer(raw, dtype="<u2", count=n, offset=pos + 4 * n).reshape(shape).astype(np.uint16)
    return Volume(data, tuple(header["spacing"]), header["modality"], labels, header.get("meta", {}))


def with_labels(v: Volume, labels) -> Volume:
    return replace(v, labels=None if labels is None else np.asarray(labels))
