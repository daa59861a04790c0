"""Read, write and normalize 3D intensity volumes.

Two containers are supported:

* NIfTI-1 single files (``.nii``/``.nii.gz``) through `nibabel`, for
  interoperability with neuroimaging tools.
* A minimal raw format (``.mgv``): the magic ``MGV1``, three little-endian
  ``uint32`` dimensions, then the little-endian ``float32`` payload.
  Spacing and meta data live in an optional JSON sidecar (``<file>.json``).

"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import attrs
import nibabel as nib
import numpy as np
import structlog
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError

from .errors import (
    ConstantVolume,
    InvalidVolume,
    IoFailure,
    MalformedHeader,
    PayloadSizeMismatch,
    UnsupportedDtype,
)

logger = structlog.get_logger()

RAW_MAGIC = b"MGV1"
RAW_HEADER = struct.Struct("<4s3I")
RAW_SUFFIX = ".mgv"

# NIfTI data types we accept on read, everything is written as float32
NIFTI_DTYPES = {
    np.dtype("float32"): "float32",
    np.dtype("int16"): "int16",
    np.dtype("uint8"): "uint8",
}

BACKGROUND = -1.0


def _as_spacing(value) -> tuple[float, float, float]:
    spacing = tuple(float(v) for v in value)
    if len(spacing) != 3 or not all(v > 0 for v in spacing):
        raise InvalidVolume(f"spacing must be three positive values, got {value!r}")
    return spacing  # type: ignore[return-value]


def _as_data(value) -> np.ndarray:
    data = np.array(value, dtype=np.float32)
    if data.ndim != 3:
        raise InvalidVolume(f"volume data must be 3D, got shape {data.shape}")
    data.flags.writeable = False
    return data


def _as_mask(value) -> np.ndarray | None:
    if value is None:
        return None
    mask = np.array(value, dtype=bool)
    mask.flags.writeable = False
    return mask


@attrs.frozen(eq=False)
class Volume:
    """Single-channel 3D intensity field ``[D, H, W]``.

    Arrays are copied on construction and marked read-only,
    so instances can be shared freely.

    """

    data: np.ndarray = attrs.field(converter=_as_data)
    spacing: tuple[float, float, float] = attrs.field(
        default=(1.0, 1.0, 1.0), converter=_as_spacing
    )
    mask: np.ndarray | None = attrs.field(default=None, converter=_as_mask)
    meta: dict[str, str] = attrs.field(factory=dict, converter=dict)

    def __attrs_post_init__(self):
        if not np.isfinite(self.data).all():
            raise InvalidVolume("volume data contains NaN or Inf values")
        if self.mask is not None and self.mask.shape != self.data.shape:
            raise InvalidVolume(
                f"mask shape {self.mask.shape} does not match data {self.data.shape}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def evolve(self, **changes) -> Volume:
        return attrs.evolve(self, **changes)

    def with_mask(self, mask: np.ndarray | Volume | None) -> Volume:
        if isinstance(mask, Volume):
            mask = mask.data > 0
        return attrs.evolve(self, mask=mask)


@attrs.frozen
class VolumeHeader:
    dims: tuple[int, int, int]
    dtype: str
    spacing: tuple[float, float, float]
    affine: tuple[float, ...]
    """4x4 matrix, row-major."""

    @property
    def payload_size(self) -> int:
        return math.prod(self.dims) * np.dtype(self.dtype).itemsize


def _is_raw(path: Path) -> bool:
    return path.suffix.lower() == RAW_SUFFIX


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _default_affine(spacing) -> tuple[float, ...]:
    return tuple(np.diag([*spacing, 1.0]).ravel().tolist())


def read_header(path: Path) -> VolumeHeader:
    """Read just the header of a volume file."""
    path = Path(path)
    if _is_raw(path):
        return _read_raw_header(path)[0]
    return _read_nifti(path, header_only=True)[0]


def read_volume(path: Path) -> Volume:
    """Load a volume, converting the payload to 32-bit floats."""
    path = Path(path)
    logger.debug("Reading volume", path=str(path))
    if _is_raw(path):
        header, data, meta = _read_raw(path)
    else:
        header, data = _read_nifti(path)
        meta = {}
    data = np.nan_to_num(data, nan=0.0, posinf=0.0, neginf=0.0)
    return Volume(data, spacing=header.spacing, meta=meta)


def write_volume(volume: Volume, path: Path) -> None:
    """Write a volume so that `read_volume` reproduces it bit-exactly."""
    path = Path(path)
    logger.debug("Writing volume", path=str(path), shape=volume.shape)
    try:
        if _is_raw(path):
            _write_raw(volume, path)
        else:
            _write_nifti(volume, path)
    except OSError as exc:
        raise IoFailure(f"Failed to write volume {path!s}: {exc}") from exc


def _read_raw_header(path: Path) -> tuple[VolumeHeader, int]:
    try:
        with open(path, "rb") as f:
            raw_header = f.read(RAW_HEADER.size)
        file_size = path.stat().st_size
    except OSError as exc:
        raise IoFailure(f"Failed to read volume {path!s}: {exc}") from exc
    if len(raw_header) < RAW_HEADER.size:
        raise MalformedHeader(f"{path!s}: file shorter than the raw header")
    magic, *dims = RAW_HEADER.unpack(raw_header)
    if magic != RAW_MAGIC:
        raise MalformedHeader(f"{path!s}: bad magic bytes {magic!r}")
    if not all(dims):
        raise MalformedHeader(f"{path!s}: zero dimension in {tuple(dims)}")

    spacing = (1.0, 1.0, 1.0)
    sidecar = _sidecar(path)
    if sidecar.exists():
        spacing = _as_spacing(json.loads(sidecar.read_text())["spacing"])

    header = VolumeHeader(
        dims=tuple(dims),  # type: ignore[arg-type]
        dtype="float32",
        spacing=spacing,
        affine=_default_affine(spacing),
    )
    return header, file_size - RAW_HEADER.size


def _read_raw(path: Path) -> tuple[VolumeHeader, np.ndarray, dict[str, str]]:
    header, payload_size = _read_raw_header(path)
    if payload_size != header.payload_size:
        raise PayloadSizeMismatch(
            f"{path!s}: expected {header.payload_size:,d} payload bytes, "
            f"found {payload_size:,d}"
        )
    data = np.fromfile(path, dtype="<f4", offset=RAW_HEADER.size)
    data = data.reshape(header.dims).astype(np.float32)
    meta = {}
    sidecar = _sidecar(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())["meta"]
        meta = {str(k): str(v) for k, v in meta.items()}
    return header, data, meta


def _write_raw(volume: Volume, path: Path) -> None:
    with open(path, "wb") as f:
        f.write(RAW_HEADER.pack(RAW_MAGIC, *volume.shape))
        f.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    _sidecar(path).write_text(
        json.dumps({"spacing": list(volume.spacing), "meta": volume.meta}, indent=2)
    )


def _read_nifti(
    path: Path, *, header_only: bool = False
) -> tuple[VolumeHeader, np.ndarray | None]:
    try:
        image = nib.load(str(path))
    except FileNotFoundError as exc:
        raise IoFailure(f"Volume not found: {path!s}") from exc
    except (ImageFileError, HeaderDataError) as exc:
        raise MalformedHeader(f"{path!s}: {exc}") from exc

    if not isinstance(image, nib.Nifti1Image):
        raise MalformedHeader(f"{path!s}: not a single-file NIfTI-1 image")

    nifti_header = image.header
    dtype = np.dtype(nifti_header.get_data_dtype()).newbyteorder("=")
    if dtype not in NIFTI_DTYPES:
        raise UnsupportedDtype(f"{path!s}: unsupported voxel type {dtype}")
    dims = tuple(int(d) for d in image.shape[:3])
    if len(image.shape) != 3 or not all(dims):
        raise MalformedHeader(f"{path!s}: expected a 3D image, got {image.shape}")

    header = VolumeHeader(
        dims=dims,  # type: ignore[arg-type]
        dtype=NIFTI_DTYPES[dtype],
        spacing=_as_spacing(nifti_header.get_zooms()[:3]),
        affine=tuple(image.affine.ravel().tolist()),
    )
    if header_only:
        return header, None

    if not path.name.lower().endswith(".gz"):
        # compressed files can't be checked without decompressing them
        expected = int(nifti_header["vox_offset"]) + header.payload_size
        actual = path.stat().st_size
        if actual < expected:
            raise PayloadSizeMismatch(
                f"{path!s}: expected {expected:,d} bytes, found {actual:,d}"
            )
    try:
        data = image.get_fdata(dtype=np.float32)
    except (OSError, ValueError, EOFError) as exc:
        raise PayloadSizeMismatch(f"{path!s}: {exc}") from exc
    return header, data


def _write_nifti(volume: Volume, path: Path) -> None:
    affine = np.diag([*volume.spacing, 1.0])
    image = nib.Nifti1Image(np.asarray(volume.data, dtype=np.float32), affine)
    image.header.set_zooms(volume.spacing)
    image.header.set_xyzt_units("mm")
    nib.save(image, str(path))


def _region(volume: Volume) -> np.ndarray:
    if volume.mask is None:
        return volume.data
    return volume.data[volume.mask]


def normalize_intensity(volume: Volume) -> Volume:
    """Map ``[min, max]`` (within the mask) affinely onto ``[-1, 1]``.

    Voxels outside of the mask are set to the background value -1.
    The original range is recorded in ``meta`` for `denormalize_intensity`.

    """
    region = _region(volume)
    if region.size == 0:
        raise ConstantVolume("mask selects no voxels")
    low = float(region.min())
    high = float(region.max())
    if high == low:
        raise ConstantVolume(f"volume is constant ({low})")

    if low == -1.0 and high == 1.0:
        data = np.array(volume.data, dtype=np.float32)
    else:
        scaled = (volume.data.astype(np.float64) - low) * (2.0 / (high - low)) - 1.0
        data = np.clip(scaled, -1.0, 1.0).astype(np.float32)
    if volume.mask is not None:
        data[~volume.mask] = BACKGROUND

    meta = {**volume.meta, "norm_min": repr(low), "norm_max": repr(high)}
    return volume.evolve(data=data, meta=meta)


def denormalize_intensity(volume: Volume) -> Volume:
    """Undo `normalize_intensity` using the range recorded in ``meta``."""
    try:
        low = float(volume.meta["norm_min"])
        high = float(volume.meta["norm_max"])
    except KeyError:
        raise InvalidVolume("volume has no recorded normalization range") from None
    data = (volume.data.astype(np.float64) + 1.0) * ((high - low) / 2.0) + low
    meta = {k: v for k, v in volume.meta.items() if k not in ("norm_min", "norm_max")}
    return volume.evolve(data=data.astype(np.float32), meta=meta)
