"""Cut volumes into cubic patches and stitch patch predictions back together."""

from __future__ import annotations

import itertools
from collections.abc import Sequence
from typing import Literal

import attrs
import numpy as np
import structlog
import torch

from .errors import GridMismatch, InvalidConfig, PatchTooLarge
from .volume import BACKGROUND, Volume

logger = structlog.get_logger()

Offset = tuple[int, int, int]
Blend = Literal["mean", "gaussian"]


def _as_offsets(value) -> tuple[Offset, ...]:
    return tuple(  # type: ignore[misc]
        tuple(int(v) for v in offset) for offset in value
    )


@attrs.frozen
class PatchGrid:
    """Corner offsets of cubic patches inside a volume."""

    volume_shape: tuple[int, int, int] = attrs.field(
        converter=lambda value: tuple(int(v) for v in value)
    )
    patch_size: int
    stride: int
    offsets: tuple[Offset, ...] = attrs.field(converter=_as_offsets)

    def __attrs_post_init__(self):
        if any(self.patch_size > n for n in self.volume_shape):
            raise PatchTooLarge(
                f"patch size {self.patch_size} exceeds volume shape {self.volume_shape}"
            )
        limits = [n - self.patch_size for n in self.volume_shape]
        for offset in self.offsets:
            if len(offset) != 3 or not all(
                0 <= o <= limit for o, limit in zip(offset, limits)
            ):
                raise GridMismatch(f"offset {offset} outside of {self.volume_shape}")

    def __len__(self) -> int:
        return len(self.offsets)

    def slices(self, offset: Offset) -> tuple[slice, slice, slice]:
        return tuple(  # type: ignore[return-value]
            slice(o, o + self.patch_size) for o in offset
        )


def axis_offsets(size: int, patch: int, stride: int) -> list[int]:
    """Offsets along one axis, with a final one flush against the far edge."""
    offsets = list(range(0, size - patch + 1, stride))
    if offsets[-1] != size - patch:
        offsets.append(size - patch)
    return offsets


def _box_sums(mask: np.ndarray, patch: int, offsets: Sequence[Offset]) -> np.ndarray:
    """Count of mask voxels in each patch, from a summed-volume table."""
    table = np.zeros(tuple(n + 1 for n in mask.shape), dtype=np.int64)
    table[1:, 1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    corners = np.asarray(offsets, dtype=np.int64).reshape(-1, 3)
    z0, y0, x0 = corners.T
    z1, y1, x1 = (corners + patch).T
    return (
        table[z1, y1, x1]
        - table[z0, y1, x1]
        - table[z1, y0, x1]
        - table[z1, y1, x0]
        + table[z0, y0, x1]
        + table[z0, y1, x0]
        + table[z1, y0, x0]
        - table[z0, y0, x0]
    )


def plan_patch_offsets(
    shape: Sequence[int],
    patch: int,
    stride: int,
    mask: np.ndarray | Volume | None = None,
    min_fg: float = 0.1,
) -> PatchGrid:
    """Plan a regular patch grid, optionally restricted to the foreground.

    Patches with a foreground fraction below ``min_fg`` are dropped unless they
    are the only cover of some foreground voxel, so every foreground voxel is
    always inside at least one patch.

    """
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3:
        raise GridMismatch(f"expected a 3D shape, got {shape}")
    if stride < 1:
        raise InvalidConfig(f"stride must be at least 1, got {stride}")
    if any(patch > n for n in shape):
        raise PatchTooLarge(f"patch size {patch} exceeds volume shape {shape}")

    offsets = list(
        itertools.product(*(axis_offsets(n, patch, stride) for n in shape))
    )
    if isinstance(mask, Volume):
        mask = mask.data > 0
    if mask is None:
        return PatchGrid(shape, patch, stride, offsets)

    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise GridMismatch(f"mask shape {mask.shape} does not match {shape}")

    fractions = _box_sums(mask, patch, offsets) / patch**3
    kept = [offset for offset, f in zip(offsets, fractions) if f >= min_fg]
    dropped = [offset for offset, f in zip(offsets, fractions) if 0 < f < min_fg]

    covered = np.zeros(shape, dtype=bool)
    for offset in kept:
        covered[tuple(slice(o, o + patch) for o in offset)] = True
    repaired = 0
    for offset in dropped:
        window = tuple(slice(o, o + patch) for o in offset)
        if (mask[window] & ~covered[window]).any():
            covered[window] = True
            kept.append(offset)
            repaired += 1

    logger.debug(
        "Planned patch grid",
        shape=shape,
        patch=patch,
        stride=stride,
        total=len(offsets),
        kept=len(kept),
        repaired=repaired,
    )
    return PatchGrid(shape, patch, stride, sorted(kept))


def _volume_array(volume: Volume | np.ndarray) -> np.ndarray:
    if isinstance(volume, Volume):
        return volume.data
    return np.asarray(volume, dtype=np.float32)


def extract_patches(volume: Volume | np.ndarray, grid: PatchGrid) -> list[torch.Tensor]:
    """Copy patches out of a volume, in the order of ``grid.offsets``."""
    data = _volume_array(volume)
    if data.shape != grid.volume_shape:
        raise GridMismatch(
            f"volume shape {data.shape} does not match grid {grid.volume_shape}"
        )
    return [
        torch.from_numpy(np.array(data[grid.slices(offset)], dtype=np.float32))
        for offset in grid.offsets
    ]


def blend_weights(patch: int, blend: Blend = "mean") -> np.ndarray:
    """Per-voxel weight of a patch when averaging overlaps."""
    if blend == "mean":
        return np.ones((patch,) * 3, dtype=np.float64)
    if blend == "gaussian":
        sigma = patch / 8
        axis = np.arange(patch) - (patch - 1) / 2
        profile = np.exp(-(axis**2) / (2 * sigma**2))
        return profile[:, None, None] * profile[None, :, None] * profile[None, None, :]
    raise InvalidConfig(f"unknown blend mode {blend!r}")


def stitch_patches(
    patches: Sequence[torch.Tensor | np.ndarray],
    grid: PatchGrid,
    *,
    blend: Blend = "mean",
    background: float = BACKGROUND,
) -> Volume:
    """Average overlapping patches into a full volume.

    Voxels that no patch covers get the ``background`` value.

    """
    if len(patches) != len(grid.offsets):
        raise GridMismatch(
            f"got {len(patches)} patches for a grid of {len(grid.offsets)}"
        )
    expected = (grid.patch_size,) * 3
    weights = blend_weights(grid.patch_size, blend)
    total = np.zeros(grid.volume_shape, dtype=np.float64)
    count = np.zeros(grid.volume_shape, dtype=np.float64)
    for patch, offset in zip(patches, grid.offsets):
        if isinstance(patch, torch.Tensor):
            patch = patch.detach().cpu().numpy()
        patch = np.asarray(patch)
        # drop leading batch/channel axes of size one
        while patch.ndim > 3 and patch.shape[0] == 1:
            patch = patch[0]
        if patch.shape != expected:
            raise GridMismatch(f"patch shape {patch.shape} is not {expected}")
        window = grid.slices(offset)
        total[window] += weights * patch
        count[window] += weights

    covered = count > 0
    data = np.full(grid.volume_shape, background, dtype=np.float64)
    data[covered] = total[covered] / count[covered]
    return Volume(data.astype(np.float32))
