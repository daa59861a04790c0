"""Full-volume prediction by patch-wise inference and stitching."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import structlog
import torch

from .networks import Discriminator, Generator, MultiScaleOutput
from .patches import (
    Blend,
    PatchGrid,
    extract_patches,
    plan_patch_offsets,
    stitch_patches,
)
from .volume import BACKGROUND, Volume

logger = structlog.get_logger()


def _run_patches(
    network: Callable[[torch.Tensor], MultiScaleOutput],
    volume: Volume,
    grid: PatchGrid,
    *,
    device: str | torch.device,
    batch_size: int,
) -> list[torch.Tensor]:
    patches = extract_patches(volume, grid)
    outputs = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            batch = torch.stack(patches[start : start + batch_size])[:, None].to(device)
            outputs.extend(network(batch).s1[:, 0].cpu())
    return outputs


def _masked(result: Volume, like: Volume) -> Volume:
    data = np.array(result.data)
    if like.mask is not None:
        data[~like.mask] = BACKGROUND
    return Volume(data, spacing=like.spacing, mask=like.mask, meta=like.meta)


def predict_volume(
    generator: Generator,
    volume: Volume,
    *,
    patch_size: int = 64,
    stride: int = 32,
    blend: Blend = "mean",
    dropout: bool = False,
    rng: torch.Generator | None = None,
    keep: float | None = None,
    device: str | torch.device = "cpu",
    batch_size: int = 1,
) -> Volume:
    """Translate a normalized volume, patch by patch.

    Voxels outside of the volume's mask are set to the background value.
    With ``dropout`` the Monte-Carlo dropout sites draw from ``rng``.

    """
    grid = plan_patch_offsets(volume.shape, patch_size, stride)
    generator.eval()
    logger.debug(
        "Predicting volume", shape=volume.shape, patches=len(grid), dropout=dropout
    )

    def network(batch: torch.Tensor) -> MultiScaleOutput:
        return generator(batch, dropout=dropout, generator=rng, keep=keep)

    outputs = _run_patches(network, volume, grid, device=device, batch_size=batch_size)
    return _masked(stitch_patches(outputs, grid, blend=blend), volume)


def quality_volume(
    critic: Discriminator,
    volume: Volume,
    *,
    patch_size: int = 64,
    stride: int = 32,
    blend: Blend = "mean",
    device: str | torch.device = "cpu",
    batch_size: int = 1,
) -> Volume:
    """Stitch the full-resolution quality map of a (predicted) volume."""
    grid = plan_patch_offsets(volume.shape, patch_size, stride)
    critic.eval()
    outputs = _run_patches(critic, volume, grid, device=device, batch_size=batch_size)
    stitched = stitch_patches(outputs, grid, blend=blend, background=0.0)
    data = np.array(stitched.data)
    if volume.mask is not None:
        data[~volume.mask] = 0.0
    return Volume(data, spacing=volume.spacing, mask=volume.mask)
