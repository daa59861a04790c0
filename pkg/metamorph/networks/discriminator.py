"""U-shaped discriminator emitting voxelwise quality maps at three scales."""

from __future__ import annotations

import attrs
import torch
from torch import nn

from ..errors import InvalidConfig
from .blocks import MultiScaleOutput, check_patch, init_weights

N_SCALES = 3


def _int_tuple(value) -> tuple[int, ...]:
    return tuple(int(v) for v in value)


@attrs.frozen
class DiscriminatorConfig:
    in_channels: int = 1
    channels: tuple[int, ...] = attrs.field(
        default=(64, 128, 256), converter=_int_tuple
    )
    kernel: int = 4
    n_levels: int = 3

    def __attrs_post_init__(self):
        if self.n_levels != len(self.channels):
            raise InvalidConfig(
                f"n_levels ({self.n_levels}) must match channels {self.channels}"
            )
        if self.n_levels < N_SCALES:
            raise InvalidConfig(f"at least {N_SCALES} levels are needed")
        if self.kernel % 2:
            raise InvalidConfig("kernel must be even for exact 2x resampling")


def _down(in_channels: int, out_channels: int, kernel: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_channels, out_channels, kernel, stride=2, padding=kernel // 2 - 1),
        nn.InstanceNorm3d(out_channels),
        nn.ReLU(inplace=True),
    )


def _up(in_channels: int, out_channels: int, kernel: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose3d(
            in_channels, out_channels, kernel, stride=2, padding=kernel // 2 - 1
        ),
        nn.InstanceNorm3d(out_channels),
        nn.ReLU(inplace=True),
    )


class Discriminator(nn.Module):
    """Map a target-domain patch to probabilities that its regions are real.

    Encoder stages halve the resolution, decoder stages double it and
    concatenate the matching encoder features (the input patch at the top).
    A 1x1x1 conv with a sigmoid reads a probability map after each of the last
    three decoder stages.

    """

    def __init__(self, config: DiscriminatorConfig | None = None, *, seed: int = 0):
        super().__init__()
        self.config = config = config or DiscriminatorConfig()
        channels = config.channels
        self.down = nn.ModuleList()
        previous = config.in_channels
        for width in channels:
            self.down.append(_down(previous, width, config.kernel))
            previous = width

        skips = [config.in_channels, *channels[:-1]]
        outs = [max(channels[0] // 2, 1), *channels[:-1]]
        self.up = nn.ModuleList()
        self.heads = nn.ModuleList()
        for level in reversed(range(config.n_levels)):
            self.up.append(_up(previous, outs[level], config.kernel))
            previous = outs[level] + skips[level]
            if level < N_SCALES:
                self.heads.append(
                    nn.Sequential(nn.Conv3d(previous, 1, 1), nn.Sigmoid())
                )
        init_weights(self, seed)

    def forward(self, x: torch.Tensor) -> MultiScaleOutput:
        check_patch(x, self.config.in_channels, 2**self.config.n_levels)
        skips = []
        features = x
        for stage in self.down:
            skips.append(features)
            features = stage(features)

        maps = []
        heads = iter(self.heads)
        for number, stage in enumerate(self.up):
            features = torch.cat([stage(features), skips.pop()], dim=1)
            if number >= len(self.up) - N_SCALES:
                maps.append(next(heads)(features))
        s3, s2, s1 = maps
        return MultiScaleOutput(s1=s1, s2=s2, s3=s3)
