"""Objective terms and their weighted composition over the three scales."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence

import attrs
import torch
import torch.nn.functional as F

from .errors import InvalidConfig, ShapeMismatch
from .networks.blocks import MultiScaleOutput
from .types import Scale
from .wavelet import FilterBank, analysis_3d, filter_bank

EPSILON = 1e-7
TEXTURE_BLOCK = 4

GENERATOR = "generator"
DISCRIMINATOR = "discriminator"


def _non_negative(instance, attribute, value):
    values = value if isinstance(value, tuple) else (value,)
    if any(v < 0 for v in values):
        raise InvalidConfig(f"{attribute.name} must not be negative, got {value!r}")


def _float_triple(value) -> tuple[float, float, float]:
    triple = tuple(float(v) for v in value)
    if len(triple) != 3:
        raise InvalidConfig(f"expected one weight per scale, got {value!r}")
    return triple  # type: ignore[return-value]


@attrs.frozen
class LossWeights:
    adversarial: float = attrs.field(default=1.0, validator=_non_negative)
    paired: float = attrs.field(default=10.0, validator=_non_negative)
    cycle: float = attrs.field(default=10.0, validator=_non_negative)
    beta: float = attrs.field(default=1.5, validator=_non_negative)
    scale_weights: tuple[float, float, float] = attrs.field(
        default=(1.0, 1.0, 1.0), converter=_float_triple, validator=_non_negative
    )
    quality_guidance: bool = True
    texture: bool = True
    frequency: bool = True


@attrs.frozen
class LossTerm:
    name: str
    scale: str
    value: float
    weight: float
    objective: str = GENERATOR


@attrs.define
class LossReport:
    """Scalar value of every term, plus the differentiable generator objective."""

    terms: list[LossTerm] = attrs.field(factory=list)
    loss: torch.Tensor | None = attrs.field(default=None, repr=False)

    def _weighted(self, objective: str) -> float:
        return sum(t.weight * t.value for t in self.terms if t.objective == objective)

    @property
    def total(self) -> float:
        return self._weighted(GENERATOR)

    @property
    def discriminator_total(self) -> float:
        return self._weighted(DISCRIMINATOR)

    def is_finite(self) -> bool:
        return all(math.isfinite(t.value) for t in self.terms)

    def value(self, name: str, scale: str | None = None) -> float:
        """Sum of the unweighted values of matching terms."""
        return sum(
            t.value
            for t in self.terms
            if t.name == name and (scale is None or t.scale == scale)
        )

    def names(self) -> list[str]:
        return list(dict.fromkeys(t.name for t in self.terms))

    def extend(self, other: LossReport) -> LossReport:
        return LossReport(self.terms + other.terms, loss=self.loss)

    def records(self, **context) -> list[dict]:
        """Rows for the JSON-lines loss log."""
        return [
            {**context, "term": t.name, "scale": t.scale, "value": t.value}
            for t in self.terms
        ]


def _check_same(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"tensor shapes differ: {sorted(shapes)}")


def _clamped(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPSILON, 1.0 - EPSILON)


def discriminator_term(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """``-mean log D(real) - mean log(1 - D(fake))`` for one scale."""
    return -torch.log(_clamped(real)).mean() - torch.log(1.0 - _clamped(fake)).mean()


def generator_term(fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating ``-mean log D(G(x))`` for one scale."""
    return -torch.log(_clamped(fake)).mean()


def adversarial_losses(
    d_real: MultiScaleOutput,
    d_fake: MultiScaleOutput,
    scale_weights: Sequence[float] = (1.0, 1.0, 1.0),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and generator losses summed over the scales.

    ``d_fake`` should come from generator outputs that were detached for the
    discriminator update.

    """
    d_loss = sum(
        w * discriminator_term(real, fake)
        for w, real, fake in zip(scale_weights, d_real, d_fake)
    )
    g_loss = sum(w * generator_term(fake) for w, fake in zip(scale_weights, d_fake))
    return d_loss, g_loss  # type: ignore[return-value]


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same(pred, target)
    return (target - pred).abs().mean()


def quality_loss(
    pred: torch.Tensor, target: torch.Tensor, q: torch.Tensor, beta: float = 1.5
) -> torch.Tensor:
    """L1 weighted by ``(1 - q) ** beta``: low quality voxels weigh more.

    The quality map is treated as a constant.

    """
    _check_same(pred, target, q)
    weight = (1.0 - q.detach()).clamp(min=0.0) ** beta
    return ((target - pred).abs() * weight).mean()


def gram_matrix(x: torch.Tensor, block: int = TEXTURE_BLOCK) -> torch.Tensor:
    """Gram matrix of non-overlapping ``block``-cubes of each volume.

    Each volume is cut into ``n`` blocks flattened to rows of ``F``, the result
    is ``F.T @ F / (n * block ** 3)`` with shape ``(..., block ** 3, block ** 3)``.

    """
    depth, height, width = x.shape[-3:]
    if any(n % block for n in (depth, height, width)):
        raise ShapeMismatch(
            f"spatial shape {tuple(x.shape[-3:])} is not a multiple of {block}"
        )
    volumes = x.reshape(
        -1, depth // block, block, height // block, block, width // block, block
    )
    rows = volumes.permute(0, 1, 3, 5, 2, 4, 6).reshape(volumes.shape[0], -1, block**3)
    n_blocks = rows.shape[1]
    gram = rows.transpose(1, 2) @ rows / (n_blocks * block**3)
    return gram.reshape(*x.shape[:-3], block**3, block**3)


def texture_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same(pred, target)
    return F.mse_loss(gram_matrix(pred), gram_matrix(target))


def frequency_loss(
    pred: torch.Tensor, target: torch.Tensor, bank: FilterBank | None = None
) -> torch.Tensor:
    """Sum over the eight subbands of the mean absolute coefficient difference."""
    _check_same(pred, target)
    # the transform is linear, so transform the residual once
    coeffs = analysis_3d(target - pred, bank or filter_bank())
    per_band = coeffs.abs().movedim(-4, 0).reshape(8, -1).mean(dim=1)
    return per_band.sum()


def cycle_loss(
    x_a: torch.Tensor,
    rec_a: torch.Tensor,
    x_b: torch.Tensor,
    rec_b: torch.Tensor,
) -> torch.Tensor:
    return l1_loss(rec_a, x_a) + l1_loss(rec_b, x_b)


def target_pyramid(target: torch.Tensor) -> MultiScaleOutput:
    """Targets at full, half and quarter resolution by 2x average pooling."""
    half = F.avg_pool3d(target, 2)
    return MultiScaleOutput(target, half, F.avg_pool3d(half, 2))


@attrs.frozen(eq=False)
class DirectionPass:
    """Everything the generator objective needs for one translation direction.

    ``critic`` is the opposite discriminator applied to the (non-detached)
    prediction, ``quality`` the detached quality maps.

    """

    direction: str
    prediction: MultiScaleOutput
    target: torch.Tensor
    quality: MultiScaleOutput | None = None
    critic: MultiScaleOutput | None = None
    source: torch.Tensor | None = None
    reconstruction: torch.Tensor | None = None


def _report(
    terms: Iterable[tuple[str, str, torch.Tensor, float]], objective: str
) -> LossReport:
    entries = []
    loss = None
    for name, scale, value, weight in terms:
        entries.append(LossTerm(name, scale, float(value.detach()), weight, objective))
        weighted = weight * value
        loss = weighted if loss is None else loss + weighted
    return LossReport(entries, loss=loss)


def _direction_terms(run: DirectionPass, weights: LossWeights):
    scales = list(Scale)
    targets = target_pyramid(run.target)
    for index, scale in enumerate(scales):
        scale_weight = weights.scale_weights[index]
        pred = run.prediction[index]
        if run.critic is not None:
            yield (
                f"{run.direction}.adv_g",
                str(scale),
                generator_term(run.critic[index]),
                weights.adversarial * scale_weight,
            )
        if run.quality is not None and weights.quality_guidance:
            q = run.quality[index]
        else:
            q = torch.zeros_like(pred)
        yield (
            f"{run.direction}.quality",
            str(scale),
            quality_loss(pred, targets[index], q, weights.beta),
            weights.paired * scale_weight,
        )

    paired = weights.paired * weights.scale_weights[0]
    if weights.texture:
        yield (
            f"{run.direction}.texture",
            str(Scale.S1),
            texture_loss(run.prediction.s1, run.target),
            paired,
        )
    if weights.frequency:
        yield (
            f"{run.direction}.frequency",
            str(Scale.S1),
            frequency_loss(run.prediction.s1, run.target),
            paired,
        )


def total_objective(
    passes: Sequence[DirectionPass], weights: LossWeights
) -> LossReport:
    """Generator objective over all directions and scales.

    Per scale: adversarial, quality-driven and (at full resolution) texture and
    frequency terms; the cycle term is evaluated at full resolution only.

    """

    def terms():
        for run in passes:
            yield from _direction_terms(run, weights)
        cycles = [
            (run.source, run.reconstruction)
            for run in passes
            if run.source is not None and run.reconstruction is not None
        ]
        if len(cycles) == 2:
            (x_a, rec_a), (x_b, rec_b) = cycles
            value = cycle_loss(x_a, rec_a, x_b, rec_b)
        elif cycles:
            value = l1_loss(cycles[0][1], cycles[0][0])
        else:
            return
        yield "cycle", str(Scale.S1), value, weights.cycle * weights.scale_weights[0]

    return _report(terms(), GENERATOR)


def discriminator_objective(
    real: dict[str, MultiScaleOutput],
    fake: dict[str, MultiScaleOutput],
    weights: LossWeights,
) -> LossReport:
    """Discriminator objective, ``real``/``fake`` keyed by direction."""

    def terms():
        for direction, d_real in real.items():
            for index, scale in enumerate(Scale):
                yield (
                    f"{direction}.adv_d",
                    str(scale),
                    discriminator_term(d_real[index], fake[direction][index]),
                    weights.scale_weights[index],
                )

    return _report(terms(), DISCRIMINATOR)
