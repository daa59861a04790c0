"""Single-level 3D discrete wavelet transform as fixed strided convolutions.

Each axis is filtered with the low/high pass analysis filters using a stride
of two under periodic extension, the inverse uses transposed convolutions with
the reconstruction filters.
Subband keys spell the filter applied along (depth, height, width),
``L`` for low pass and ``H`` for high pass.

"""

from __future__ import annotations

import functools

import attrs
import pywt
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BandShapeMismatch, InvalidConfig, OddDimension, ShapeMismatch

DEFAULT_WAVELET = "bior1.3"

BAND_KEYS = ("LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH")


def _as_floats(value) -> tuple[float, ...]:
    return tuple(float(v) for v in value)


@attrs.frozen
class FilterBank:
    name: str
    dec_lo: tuple[float, ...] = attrs.field(converter=_as_floats)
    dec_hi: tuple[float, ...] = attrs.field(converter=_as_floats)
    rec_lo: tuple[float, ...] = attrs.field(converter=_as_floats)
    rec_hi: tuple[float, ...] = attrs.field(converter=_as_floats)

    def __attrs_post_init__(self):
        lengths = {len(f) for f in (self.dec_lo, self.dec_hi, self.rec_lo, self.rec_hi)}
        if len(lengths) != 1 or self.length % 2:
            raise InvalidConfig(f"{self.name}: filters must share one even length")

    @property
    def length(self) -> int:
        return len(self.dec_lo)

    @property
    def pad(self) -> int:
        """Periodic extension on each side that aligns the filters."""
        return self.length // 2 - 1

    def analysis_weight(self, dtype=torch.float32, device=None) -> torch.Tensor:
        """Correlation weights ``(2, 1, F)`` for ``conv1d`` (filters reversed)."""
        weight = torch.tensor([self.dec_lo[::-1], self.dec_hi[::-1]], dtype=dtype)
        return weight.to(device)[:, None, :]

    def synthesis_weight(self, dtype=torch.float32, device=None) -> torch.Tensor:
        """Weights ``(2, 1, F)`` for ``conv_transpose1d``."""
        weight = torch.tensor([self.rec_lo, self.rec_hi], dtype=dtype)
        return weight.to(device)[:, None, :]


@functools.cache
def filter_bank(name: str = DEFAULT_WAVELET) -> FilterBank:
    """Look up a wavelet's filter bank in PyWavelets."""
    try:
        wavelet = pywt.Wavelet(name)
    except ValueError as exc:
        raise InvalidConfig(f"unknown wavelet {name!r}") from exc
    return FilterBank(name, *wavelet.filter_bank)


def bior13_filter_bank() -> FilterBank:
    return filter_bank("bior1.3")


@attrs.frozen(eq=False)
class WaveletBands:
    """The eight subbands of one decomposition level."""

    bands: dict[str, torch.Tensor]
    source_shape: tuple[int, ...]

    def __attrs_post_init__(self):
        if set(self.bands) != set(BAND_KEYS):
            raise BandShapeMismatch(
                f"expected bands {BAND_KEYS}, got {sorted(self.bands)}"
            )
        shapes = {tuple(band.shape) for band in self.bands.values()}
        if len(shapes) != 1:
            raise BandShapeMismatch(f"subbands differ in shape: {sorted(shapes)}")
        (shape,) = shapes
        expected = (*self.source_shape[:-3], *(n // 2 for n in self.source_shape[-3:]))
        if shape != expected:
            raise BandShapeMismatch(f"subband shape {shape}, expected {expected}")

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.bands[key]

    def stacked(self) -> torch.Tensor:
        """Bands on a new axis in front of the spatial axes, in `BAND_KEYS` order."""
        return torch.stack([self.bands[key] for key in BAND_KEYS], dim=-4)


def _shift_matrix(
    size: int, source: int, shift: int, like: torch.Tensor
) -> torch.Tensor:
    """One-hot ``(source, size)`` matrix mapping periodic index ``i - shift``."""
    index = (torch.arange(size, device=like.device) - shift) % source
    return F.one_hot(index, source).T.to(like.dtype)


def _analyze_axis(
    x: torch.Tensor, weight: torch.Tensor, pad: int, dim: int
) -> torch.Tensor:
    """Filter along ``dim``; the result has a band axis (size 2) at ``dim``."""
    size = x.shape[dim]
    if size % 2:
        raise OddDimension(f"dimension {dim} has odd size {size}")
    moved = x.movedim(dim, -1)
    lead = moved.shape[:-1]
    flat = moved.reshape(-1, 1, size)
    # periodic extension as a one-hot product
    padded = flat @ _shift_matrix(size + 2 * pad, size, pad, flat)
    coeffs = F.conv1d(padded, weight, stride=2)
    coeffs = coeffs.reshape(*lead, 2, size // 2)
    return coeffs.movedim((-2, -1), (dim, dim + 1))


def _synthesize_axis(
    y: torch.Tensor, weight: torch.Tensor, pad: int, dim: int
) -> torch.Tensor:
    """Inverse of `_analyze_axis`: band axis at ``dim - 1``, samples at ``dim``."""
    half = y.shape[dim]
    moved = y.movedim((dim - 1, dim), (-2, -1))
    lead = moved.shape[:-2]
    flat = moved.reshape(-1, 2, half)
    upsampled = F.conv_transpose1d(flat, weight, stride=2)[:, 0]
    size = 2 * half
    folded = upsampled @ _shift_matrix(upsampled.shape[-1], size, pad, upsampled).T
    return folded.reshape(*lead, size).movedim(-1, dim - 1)


def analysis_3d(
    x: torch.Tensor, bank: FilterBank, weight: torch.Tensor | None = None
) -> torch.Tensor:
    """Decompose ``(..., D, H, W)`` into ``(..., 8, D/2, H/2, W/2)``."""
    if x.dim() < 3:
        raise ShapeMismatch(
            f"expected at least 3 dimensions, got shape {tuple(x.shape)}"
        )
    odd = [n for n in x.shape[-3:] if n % 2]
    if odd:
        raise OddDimension(f"spatial shape {tuple(x.shape[-3:])} has odd sizes")
    if weight is None:
        weight = bank.analysis_weight(x.dtype, x.device)
    spatial = x.dim() - 3
    out = x
    # width, then height, then depth; each band axis moves in front of the volume
    for step in range(3):
        dim = out.dim() - 1 - step
        out = _analyze_axis(out, weight, bank.pad, dim).movedim(dim, spatial)
    # (..., bd, bh, bw, d, h, w) with the depth band outermost
    return out.reshape(*x.shape[:-3], 8, *out.shape[-3:])


def synthesis_3d(
    coeffs: torch.Tensor, bank: FilterBank, weight: torch.Tensor | None = None
) -> torch.Tensor:
    """Reconstruct ``(..., D, H, W)`` from ``(..., 8, D/2, H/2, W/2)``."""
    if coeffs.dim() < 4 or coeffs.shape[-4] != 8:
        raise BandShapeMismatch(f"expected 8 subbands, got shape {tuple(coeffs.shape)}")
    if weight is None:
        weight = bank.synthesis_weight(coeffs.dtype, coeffs.device)
    lead = coeffs.shape[:-4]
    out = coeffs.reshape(*lead, 2, 2, 2, *coeffs.shape[-3:])
    spatial = len(lead)
    # depth, then height, then width: the outermost band axis is moved next to
    # the spatial axis it belongs to
    for _ in range(3):
        out = out.movedim(spatial, spatial + 2)
        out = _synthesize_axis(out, weight, bank.pad, spatial + 3)
    return out


def dwt3(x: torch.Tensor, bank: FilterBank | None = None) -> WaveletBands:
    """Single-level 3D DWT of a ``(C, D, H, W)`` (or batched) tensor."""
    bank = bank or filter_bank()
    coeffs = analysis_3d(x, bank)
    bands = {key: coeffs[..., index, :, :, :] for index, key in enumerate(BAND_KEYS)}
    return WaveletBands(bands, tuple(x.shape))


def idwt3(bands: WaveletBands, bank: FilterBank | None = None) -> torch.Tensor:
    bank = bank or filter_bank()
    return synthesis_3d(bands.stacked(), bank)


class DWT3d(nn.Module):
    """Wavelet analysis of ``(N, C, D, H, W)`` into ``(N, 8 * C, D/2, H/2, W/2)``.

    Channels are band-major: channel ``b * C + c`` holds band ``b`` of input
    channel ``c``.
    The filters are non-persistent buffers.

    """

    def __init__(self, wavelet: str = DEFAULT_WAVELET):
        super().__init__()
        self.bank = filter_bank(wavelet)
        self.register_buffer("weight", self.bank.analysis_weight(), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (N, C, 8, d, h, w)
        coeffs = analysis_3d(x, self.bank, self.weight.to(x.dtype))
        n, c = coeffs.shape[:2]
        return coeffs.transpose(1, 2).reshape(n, 8 * c, *coeffs.shape[-3:])


class IDWT3d(nn.Module):
    """Inverse of `DWT3d`."""

    def __init__(self, wavelet: str = DEFAULT_WAVELET):
        super().__init__()
        self.bank = filter_bank(wavelet)
        self.register_buffer("weight", self.bank.synthesis_weight(), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, channels = x.shape[:2]
        if channels % 8:
            raise BandShapeMismatch(f"{channels} channels is not a multiple of 8")
        coeffs = x.reshape(n, 8, channels // 8, *x.shape[-3:]).transpose(1, 2)
        return synthesis_3d(coeffs, self.bank, self.weight.to(x.dtype))
