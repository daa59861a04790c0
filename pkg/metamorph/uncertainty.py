"""Voxelwise uncertainty of full-volume predictions.

Epistemic uncertainty is the spread of predictions with Monte-Carlo dropout
enabled, aleatoric uncertainty the spread of predictions over random test-time
augmentations mapped back to the original orientation.
Both use the population standard deviation over the ``N`` passes.

"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from pathlib import Path

import attrs
import numpy as np
import structlog
import torch
from scipy import ndimage, stats

from .errors import InvalidConfig
from .inference import predict_volume
from .networks import Generator
from .types import UncertaintyKind
from .volume import BACKGROUND, Volume, write_volume

logger = structlog.get_logger()

# rotation plane for a rotation about each axis
ROTATION_PLANES = ((1, 2), (0, 2), (0, 1))

Predict = Callable[..., Volume]


def pass_seed(seed: int, number: int) -> int:
    """Seed of one inference pass, derived from the run seed."""
    return int(np.random.SeedSequence([seed, number]).generate_state(1)[0])


def _bool_triple(value) -> tuple[bool, bool, bool]:
    return tuple(bool(v) for v in value)  # type: ignore[return-value]


def _float_triple(value) -> tuple[float, float, float]:
    return tuple(float(v) for v in value)  # type: ignore[return-value]


@attrs.frozen
class TtaTransform:
    """Random flips, rotations (radians, about each axis) and additive noise."""

    flips: tuple[bool, bool, bool] = attrs.field(
        default=(False, False, False), converter=_bool_triple
    )
    angles: tuple[float, float, float] = attrs.field(
        default=(0.0, 0.0, 0.0), converter=_float_triple
    )
    noise_sigma: float = 0.05
    seed: int = 0

    @classmethod
    def sample(cls, seed: int, noise_sigma: float = 0.05) -> TtaTransform:
        rng = np.random.default_rng(seed)
        flips = rng.random(3) < 0.5
        angles = rng.uniform(0.0, 2 * math.pi, size=3)
        return cls(flips, angles, noise_sigma, seed)

    @classmethod
    def identity(cls) -> TtaTransform:
        return cls(noise_sigma=0.0)


def _rotate(data: np.ndarray, angle: float, axis: int) -> np.ndarray:
    if math.remainder(angle, 2 * math.pi) == 0:
        return data
    return ndimage.rotate(
        data,
        math.degrees(angle),
        axes=ROTATION_PLANES[axis],
        reshape=False,
        order=1,
        mode="constant",
        cval=BACKGROUND,
    )


def apply_tta(volume: Volume, transform: TtaTransform) -> Volume:
    """Add noise, then flip, then rotate about the depth, height and width axes.

    The noisy volume is clipped to [-1, 1] so it stays a valid network input.
    The result has no mask.

    """
    data = volume.data.astype(np.float64)
    if transform.noise_sigma > 0:
        rng = np.random.default_rng(transform.seed)
        data = np.clip(data + rng.normal(0.0, transform.noise_sigma, data.shape), -1, 1)
    for axis, flip in enumerate(transform.flips):
        if flip:
            data = np.flip(data, axis)
    for axis, angle in enumerate(transform.angles):
        data = _rotate(data, angle, axis)
    return Volume(data, spacing=volume.spacing, meta=volume.meta)


def invert_tta(volume: Volume, transform: TtaTransform) -> Volume:
    """Undo the rotations (in reverse order) and flips; noise is not undone."""
    data = volume.data.astype(np.float64)
    for axis in reversed(range(3)):
        data = _rotate(data, -transform.angles[axis], axis)
    for axis, flip in enumerate(transform.flips):
        if flip:
            data = np.flip(data, axis)
    return Volume(data, spacing=volume.spacing, meta=volume.meta)


class RunningMoments:
    """Streaming mean and population variance (Welford), in float64."""

    def __init__(self, keep_samples: bool = False):
        self.count = 0
        self.mean: np.ndarray | None = None
        self._m2: np.ndarray | None = None
        self.samples: list[np.ndarray] | None = [] if keep_samples else None

    def update(self, sample: np.ndarray) -> None:
        sample = np.asarray(sample, dtype=np.float64)
        if self.mean is None:
            self.mean = np.zeros_like(sample)
            self._m2 = np.zeros_like(sample)
        self.count += 1
        delta = sample - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (sample - self.mean)
        if self.samples is not None:
            self.samples.append(sample)

    @property
    def std(self) -> np.ndarray:
        if self.mean is None or self._m2 is None:
            raise ValueError("no samples")
        return np.sqrt(np.maximum(self._m2, 0.0) / self.count)


@attrs.frozen(eq=False)
class UncertaintyMap:
    kind: UncertaintyKind
    sigma: Volume
    n_samples: int
    mean_prediction: Volume
    seeds: tuple[int, ...] = ()
    samples: np.ndarray | None = attrs.field(default=None, repr=False)

    def write(self, prefix: Path) -> Path:
        """Write sigma as ``<prefix>.<kind>.nii``."""
        prefix = Path(prefix)
        path = prefix.with_name(f"{prefix.name}.{self.kind}.nii")
        write_volume(self.sigma, path)
        return path


def _summarize(
    kind: UncertaintyKind,
    moments: RunningMoments,
    seeds: Sequence[int],
    like: Volume,
) -> UncertaintyMap:
    sigma = moments.std
    mean = moments.mean
    if like.mask is not None:
        sigma = np.where(like.mask, sigma, 0.0)
    samples = np.stack(moments.samples) if moments.samples is not None else None
    logger.info(
        "Computed uncertainty map",
        kind=str(kind),
        samples=moments.count,
        mean_sigma=float(sigma.mean()),
    )
    return UncertaintyMap(
        kind,
        Volume(sigma, spacing=like.spacing, mask=like.mask),
        moments.count,
        Volume(mean, spacing=like.spacing, mask=like.mask, meta=like.meta),
        tuple(seeds),
        samples,
    )


def epistemic_map(
    generator: Generator,
    volume: Volume,
    n_samples: int = 20,
    keep: float = 0.8,
    seed: int = 0,
    *,
    predict: Predict | None = None,
    device: str | torch.device = "cpu",
    store_samples: bool = False,
    **predict_options,
) -> UncertaintyMap:
    """Spread of ``n_samples`` predictions with Monte-Carlo dropout enabled."""
    if n_samples < 1:
        raise InvalidConfig("n_samples must be at least 1")
    if not 0.0 < keep <= 1.0:
        raise InvalidConfig(f"keep rate must be in (0, 1], got {keep}")
    predict = predict or predict_volume

    moments = RunningMoments(keep_samples=store_samples)
    seeds = [pass_seed(seed, number) for number in range(n_samples)]
    for number, sample_seed in enumerate(seeds):
        rng = torch.Generator(device=device).manual_seed(sample_seed)
        prediction = predict(
            generator,
            volume,
            dropout=True,
            rng=rng,
            keep=keep,
            device=device,
            **predict_options,
        )
        moments.update(prediction.data)
        logger.debug("Finished dropout pass", number=number + 1, of=n_samples)
    return _summarize(UncertaintyKind.EPISTEMIC, moments, seeds, volume)


def aleatoric_map(
    generator: Generator,
    volume: Volume,
    n_samples: int = 20,
    seed: int = 0,
    *,
    noise_sigma: float = 0.05,
    transforms: Sequence[TtaTransform] | None = None,
    predict: Predict | None = None,
    device: str | torch.device = "cpu",
    store_samples: bool = False,
    **predict_options,
) -> UncertaintyMap:
    """Spread of predictions over random test-time augmentations.

    Each augmented prediction is mapped back before the statistics are taken;
    voxels outside of the volume's mask are reset to the background first.
    Dropout stays off.

    """
    if transforms is not None:
        n_samples = len(transforms)
    if n_samples < 1:
        raise InvalidConfig("n_samples must be at least 1")
    predict = predict or predict_volume

    seeds = [pass_seed(seed, number) for number in range(n_samples)]
    if transforms is None:
        transforms = [TtaTransform.sample(s, noise_sigma) for s in seeds]

    moments = RunningMoments(keep_samples=store_samples)
    for transform in transforms:
        augmented = apply_tta(volume, transform)
        prediction = predict(generator, augmented, device=device, **predict_options)
        restored = invert_tta(prediction, transform).data
        if volume.mask is not None:
            restored = np.where(volume.mask, restored, BACKGROUND)
        moments.update(restored)
    return _summarize(UncertaintyKind.ALEATORIC, moments, seeds, volume)


def error_correlation(
    sigma: Volume | np.ndarray,
    error: Volume | np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[float, float]:
    """Spearman rank correlation (and p-value) between uncertainty and error."""
    sigma = sigma.data if isinstance(sigma, Volume) else np.asarray(sigma)
    error = error.data if isinstance(error, Volume) else np.asarray(error)
    if mask is not None:
        sigma = sigma[mask]
        error = error[mask]
    result = stats.spearmanr(sigma.ravel(), error.ravel())
    return float(result[0]), float(result[1])
