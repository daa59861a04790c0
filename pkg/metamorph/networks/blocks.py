"""Building blocks shared by the generator and the discriminator."""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from ..errors import InvalidConfig, ShapeMismatch

INIT_STD = 0.02


class MultiScaleOutput(NamedTuple):
    """Outputs at full (``s1``), half (``s2``) and quarter (``s3``) resolution."""

    s1: torch.Tensor
    s2: torch.Tensor
    s3: torch.Tensor

    def detach(self) -> MultiScaleOutput:
        return MultiScaleOutput(*(t.detach() for t in self))


def conv_block(
    in_channels: int,
    out_channels: int,
    *,
    kernel: int = 3,
    stride: int = 1,
    padding: int = 1,
) -> nn.Sequential:
    """Conv, instance norm, ReLU."""
    return nn.Sequential(
        nn.Conv3d(in_channels, out_channels, kernel, stride=stride, padding=padding),
        nn.InstanceNorm3d(out_channels),
        nn.ReLU(inplace=True),
    )


def deconv_block(
    in_channels: int,
    out_channels: int,
    *,
    kernel: int = 3,
    stride: int = 2,
    padding: int = 1,
    output_padding: int = 1,
) -> nn.Sequential:
    """Transposed conv doubling the resolution, instance norm, ReLU."""
    return nn.Sequential(
        nn.ConvTranspose3d(
            in_channels,
            out_channels,
            kernel,
            stride=stride,
            padding=padding,
            output_padding=output_padding,
        ),
        nn.InstanceNorm3d(out_channels),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    """``x + IN(conv(ReLU(IN(conv(x)))))`` with 3x3x3 kernels."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.block = nn.Sequential(
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.InstanceNorm3d(channels),
            nn.ReLU(inplace=True),
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.InstanceNorm3d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != self.channels:
            raise ShapeMismatch(
                f"residual block expects (N, {self.channels}, D, H, W), "
                f"got {tuple(x.shape)}"
            )
        return x + self.block(x)


def check_keep(keep: float) -> float:
    if not 0.0 < keep <= 1.0:
        raise InvalidConfig(f"keep rate must be in (0, 1], got {keep}")
    return keep


class McDropout(nn.Module):
    """Voxelwise dropout that only runs when asked to, independent of ``train()``.

    Kept values are scaled by ``1 / keep``.
    Pass a `torch.Generator` to make the masks reproducible.

    """

    def __init__(self, keep: float = 0.8):
        super().__init__()
        self.keep = check_keep(keep)

    def forward(
        self,
        x: torch.Tensor,
        *,
        active: bool = False,
        generator: torch.Generator | None = None,
        keep: float | None = None,
    ) -> torch.Tensor:
        keep = self.keep if keep is None else check_keep(keep)
        if not active or keep >= 1.0:
            return x
        noise = torch.rand(x.shape, generator=generator, device=x.device, dtype=x.dtype)
        return x * (noise < keep).to(x.dtype) / keep

    def extra_repr(self) -> str:
        return f"keep={self.keep}"


def init_weights(module: nn.Module, seed: int = 0) -> None:
    """Draw conv weights from N(0, 0.02) and zero the biases, reproducibly."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, (nn.Conv3d, nn.ConvTranspose3d)):
                weight = torch.empty(layer.weight.shape).normal_(
                    0.0, INIT_STD, generator=generator
                )
                layer.weight.copy_(weight)
                if layer.bias is not None:
                    layer.bias.zero_()


def check_patch(x: torch.Tensor, channels: int, multiple: int) -> None:
    """Raise `ShapeMismatch` unless ``x`` is ``(N, channels, D, H, W)`` with
    every spatial size a multiple of ``multiple``."""
    if x.dim() != 5 or x.shape[1] != channels:
        raise ShapeMismatch(
            f"expected a (N, {channels}, D, H, W) tensor, got {tuple(x.shape)}"
        )
    if any(n % multiple for n in x.shape[-3:]):
        raise ShapeMismatch(
            f"spatial shape {tuple(x.shape[-3:])} must be a multiple of {multiple}"
        )
