"""Metamorphic generator: encoder, spatial-frequency transfer block, decoder."""

from __future__ import annotations

import math

import attrs
import torch
from torch import nn

from ..errors import InvalidConfig, InvalidRange
from ..wavelet import DEFAULT_WAVELET, DWT3d, IDWT3d, filter_bank
from .blocks import (
    McDropout,
    MultiScaleOutput,
    ResidualBlock,
    check_patch,
    conv_block,
    deconv_block,
    init_weights,
)

# encoder stride 2 followed by the stride-2 spatial branch (or the DWT)
SIZE_MULTIPLE = 4


def _int_pair(value) -> tuple[int, int]:
    return tuple(int(v) for v in value)  # type: ignore[return-value]


@attrs.frozen
class GeneratorConfig:
    in_channels: int = 1
    enc_channels: tuple[int, int] = attrs.field(default=(64, 32), converter=_int_pair)
    enc_strides: tuple[int, int] = attrs.field(default=(1, 2), converter=_int_pair)
    sft_channels: int = 64
    n_res_blocks: int = 9
    use_frequency_branch: bool = True
    dropout_keep: float = 0.8
    wavelet: str = DEFAULT_WAVELET

    def __attrs_post_init__(self):
        if self.n_res_blocks < 1:
            raise InvalidConfig("n_res_blocks must be at least 1")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise InvalidConfig("dropout_keep must be in (0, 1]")
        if len(self.enc_channels) != 2 or len(self.enc_strides) != 2:
            raise InvalidConfig("the encoder has exactly two stages")
        if math.prod(self.enc_strides) != 2:
            raise InvalidConfig("encoder strides must halve the resolution once")
        filter_bank(self.wavelet)


class FrequencyBranch(nn.Module):
    """DWT, transfer in the stacked subband domain, IDWT."""

    def __init__(self, channels: int, width: int, n_res_blocks: int, wavelet: str):
        super().__init__()
        self.dwt = DWT3d(wavelet)
        self.project = nn.Conv3d(8 * channels, width, 3, padding=1)
        self.transfer = nn.Sequential(
            *(ResidualBlock(width) for _ in range(n_res_blocks))
        )
        self.unproject = nn.Conv3d(width, 8 * channels, 3, padding=1)
        self.idwt = IDWT3d(wavelet)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bands = self.dwt(x)
        return self.idwt(self.unproject(self.transfer(self.project(bands))))


class SpatialBranch(nn.Module):
    def __init__(self, channels: int, width: int, n_res_blocks: int):
        super().__init__()
        self.down = nn.Conv3d(channels, width, 3, stride=2, padding=1)
        self.transfer = nn.Sequential(
            *(ResidualBlock(width) for _ in range(n_res_blocks))
        )
        self.up = nn.ConvTranspose3d(
            width, width, 3, stride=2, padding=1, output_padding=1
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(self.transfer(self.down(x)))


class SpatialFrequencyTransfer(nn.Module):
    """Parallel spatial and frequency branches fused by a 3x3x3 conv.

    The branches don't share weights.
    Without the frequency branch only the spatial features reach the fusion.

    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        channels = config.enc_channels[-1]
        width = config.sft_channels
        self.spatial = SpatialBranch(channels, width, config.n_res_blocks)
        self.frequency: FrequencyBranch | None = None
        fused = width
        if config.use_frequency_branch:
            self.frequency = FrequencyBranch(
                channels, width, config.n_res_blocks, config.wavelet
            )
            fused += channels
        self.fuse = conv_block(fused, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = self.spatial(x)
        if self.frequency is not None:
            features = torch.cat([features, self.frequency(x)], dim=1)
        return self.fuse(features)


class Generator(nn.Module):
    """Translate a ``(N, 1, D, H, W)`` patch in [-1, 1] between time points.

    Besides the full resolution prediction, two deep supervision heads predict
    the target at half and quarter resolution.
    The two Monte-Carlo dropout sites are inactive unless ``dropout=True``.

    """

    def __init__(self, config: GeneratorConfig | None = None, *, seed: int = 0):
        super().__init__()
        self.config = config = config or GeneratorConfig()
        first, second = config.enc_channels
        width = config.sft_channels
        self.encoder = nn.Sequential(
            conv_block(config.in_channels, first, stride=config.enc_strides[0]),
            conv_block(first, second, stride=config.enc_strides[1]),
        )
        self.encoder_dropout = McDropout(config.dropout_keep)
        self.sft = SpatialFrequencyTransfer(config)
        self.sft_dropout = McDropout(config.dropout_keep)
        self.head_s2 = nn.Sequential(nn.Conv3d(width, 1, 3, padding=1), nn.Tanh())
        self.head_s3 = nn.Sequential(
            conv_block(width, width, stride=2),
            nn.Conv3d(width, 1, 3, padding=1),
            nn.Tanh(),
        )
        self.decoder = nn.Sequential(
            deconv_block(width, width),
            nn.Conv3d(width, config.in_channels, 3, padding=1),
            nn.Tanh(),
        )
        init_weights(self, seed)

    def forward(
        self,
        x: torch.Tensor,
        *,
        dropout: bool = False,
        generator: torch.Generator | None = None,
        keep: float | None = None,
    ) -> MultiScaleOutput:
        check_patch(x, self.config.in_channels, SIZE_MULTIPLE)
        if x.numel() and (x.min() < -1.0 or x.max() > 1.0):
            raise InvalidRange(
                f"generator input must be in [-1, 1], got "
                f"[{x.min().item():.4g}, {x.max().item():.4g}]"
            )
        features = self.encoder(x)
        features = self.encoder_dropout(
            features, active=dropout, generator=generator, keep=keep
        )
        features = self.sft(features)
        features = self.sft_dropout(
            features, active=dropout, generator=generator, keep=keep
        )
        return MultiScaleOutput(
            s1=self.decoder(features),
            s2=self.head_s2(features),
            s3=self.head_s3(features),
        )
