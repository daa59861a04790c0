"""Synthetic longitudinal phantoms.

A phantom is a smooth ellipsoidal "brain" with two internal tissue classes.
The second time point changes the class intensities (optionally swapping their
ordering, like the white/grey matter contrast inversion of the first postnatal
year) and moves the class boundary with a smooth displacement field.

"""

from __future__ import annotations

from collections.abc import Sequence
from multiprocessing.pool import Pool
from pathlib import Path

import attrs
import numpy as np
import structlog
from scipy import ndimage

from .dataset import Manifest, ManifestRow, mask_path
from .errors import DuplicateSubject, InvalidSpec, IoFailure
from .volume import Volume, write_volume

logger = structlog.get_logger()

MIN_SIZE = 32

# class intensities (inner, outer) at the earlier time point, background is 0
CLASS_INTENSITIES = (0.35, 0.75)
AGE_BRIGHTENING = 0.15
# level of the boundary between the inner and outer class
CLASS_BOUNDARY = 0.45
BOUNDARY_BUMP = 0.12
PARTIAL_VOLUME_SIGMA = 0.6
# displacement is capped at this fraction of the smallest dimension
MAX_DISPLACEMENT = 0.1


def _as_size(value) -> tuple[int, int, int]:
    return tuple(int(v) for v in value)  # type: ignore[return-value]


@attrs.frozen
class PhantomSpec:
    """Recipe for one subject; the same spec always produces the same volumes."""

    subject: str = "sub-001"
    size: tuple[int, int, int] = attrs.field(default=(64, 64, 64), converter=_as_size)
    n_blobs: int = 4
    age_a: float = 0.0
    age_b: float = 1.0
    contrast_flip: bool = True
    deform_amplitude: float = 3.0
    noise_sigma: float = 0.02
    seed: int = 0

    def __attrs_post_init__(self):
        if len(self.size) != 3 or min(self.size) < MIN_SIZE:
            raise InvalidSpec(f"size must be 3 values >= {MIN_SIZE}, got {self.size}")
        if self.n_blobs < 1:
            raise InvalidSpec(f"n_blobs must be at least 1, got {self.n_blobs}")
        for name in ("age_a", "age_b"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidSpec(f"{name} must be in [0, 1]")
        if self.deform_amplitude < 0:
            raise InvalidSpec("deform_amplitude must not be negative")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must not be negative")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must fit in an unsigned 64-bit integer")


@attrs.frozen
class _Geometry:
    """Random quantities drawn for one spec, in normalized [-1, 1] coordinates."""

    radii: np.ndarray
    bump_centers: np.ndarray
    bump_heights: np.ndarray
    bump_widths: np.ndarray
    warp_centers: np.ndarray
    warp_directions: np.ndarray
    warp_widths: np.ndarray


def _draw_geometry(spec: PhantomSpec, rng: np.random.Generator) -> _Geometry:
    radii = np.array([0.85, 0.8, 0.8]) + rng.uniform(-0.04, 0.04, size=3)
    n_bumps = 2 * spec.n_blobs
    bump_centers = rng.uniform(-0.6, 0.6, size=(n_bumps, 3))
    bump_heights = rng.uniform(-BOUNDARY_BUMP, BOUNDARY_BUMP, size=n_bumps)
    bump_widths = rng.uniform(0.12, 0.25, size=n_bumps)
    warp_centers = rng.uniform(-0.5, 0.5, size=(spec.n_blobs, 3))
    directions = rng.normal(size=(spec.n_blobs, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    warp_widths = rng.uniform(0.2, 0.35, size=spec.n_blobs)
    return _Geometry(
        radii,
        bump_centers,
        bump_heights,
        bump_widths,
        warp_centers,
        directions,
        warp_widths,
    )


def _grid(size: tuple[int, int, int]) -> np.ndarray:
    """Normalized voxel coordinates, shape ``(3, D, H, W)``."""
    axes = [np.linspace(-1.0, 1.0, n) for n in size]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def _gaussians(
    coords: np.ndarray, centers: np.ndarray, widths: np.ndarray
) -> np.ndarray:
    """Evaluate one isotropic Gaussian per center, shape ``(n, D, H, W)``."""
    diff = coords[None] - centers[:, :, None, None, None]
    dist2 = (diff**2).sum(axis=1)
    return np.exp(-dist2 / (2.0 * widths[:, None, None, None] ** 2))


def _level_set(coords: np.ndarray, geometry: _Geometry) -> np.ndarray:
    """Smooth field whose sub-level set below `CLASS_BOUNDARY` is the inner class."""
    radius2 = ((coords / geometry.radii[:, None, None, None]) ** 2).sum(axis=0)
    bumps = _gaussians(coords, geometry.bump_centers, geometry.bump_widths)
    return radius2 + np.tensordot(geometry.bump_heights, bumps, axes=1)


def _displacement(
    spec: PhantomSpec, coords: np.ndarray, geometry: _Geometry
) -> np.ndarray:
    """Displacement at ``age_b`` in voxels, shape ``(3, D, H, W)``.

    The field is a sum of Gaussian bumps. It is scaled down as a whole when
    its largest voxel norm exceeds the cap.

    """
    amplitude = spec.deform_amplitude * abs(spec.age_b - spec.age_a)
    if amplitude == 0:
        return np.zeros_like(coords)
    weights = _gaussians(coords, geometry.warp_centers, geometry.warp_widths)
    field = amplitude * np.einsum("nk,n...->k...", geometry.warp_directions, weights)
    peak = float(np.sqrt((field**2).sum(axis=0)).max())
    cap = MAX_DISPLACEMENT * min(spec.size)
    if peak > cap:
        field *= cap / peak
    return field


def _to_normalized(field: np.ndarray, size: tuple[int, int, int]) -> np.ndarray:
    # coordinates span 2 over size - 1 voxels along each axis
    scale = np.array([2.0 / (n - 1) for n in size])
    return field * scale[:, None, None, None]


def displacement_field(spec: PhantomSpec) -> np.ndarray:
    """Displacement of the class boundary between the two ages, in voxels."""
    rng = np.random.default_rng(spec.seed)
    geometry = _draw_geometry(spec, rng)
    return _displacement(spec, _grid(spec.size), geometry)


def _fractions(time_points: int) -> list[float]:
    if time_points < 2:
        raise InvalidSpec(f"need at least 2 time points, got {time_points}")
    return [k / (time_points - 1) for k in range(time_points)]


def series_labels(
    spec: PhantomSpec, time_points: int = 2
) -> tuple[list[np.ndarray], np.ndarray]:
    """Label maps of evenly spaced time points from ``age_a`` to ``age_b``.

    The boundary moves by the same fraction of the full displacement as the
    time point's fraction of the age span.
    Labels are 0 for background, 1 for the inner and 2 for the outer class.

    """
    fractions = _fractions(time_points)
    rng = np.random.default_rng(spec.seed)
    geometry = _draw_geometry(spec, rng)
    coords = _grid(spec.size)

    radius2 = ((coords / geometry.radii[:, None, None, None]) ** 2).sum(axis=0)
    mask = radius2 <= 1.0
    shift = _to_normalized(_displacement(spec, coords, geometry), spec.size)

    labels = []
    for fraction in fractions:
        warped = coords - fraction * shift if fraction else coords
        inner = _level_set(warped, geometry) < CLASS_BOUNDARY
        label = np.where(inner, 1, 2).astype(np.uint8)
        label[~mask] = 0
        labels.append(label)
    return labels, mask


def phantom_labels(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return the label maps of both time points plus the foreground mask."""
    (labels_a, labels_b), mask = series_labels(spec, 2)
    return labels_a, labels_b, mask


def _age_at(spec: PhantomSpec, fraction: float) -> float:
    if fraction == 1:
        return spec.age_b
    return spec.age_a + fraction * (spec.age_b - spec.age_a)


def series_ages(spec: PhantomSpec, time_points: int = 2) -> list[float]:
    return [_age_at(spec, fraction) for fraction in _fractions(time_points)]


def intensities_at(spec: PhantomSpec, fraction: float) -> tuple[float, float]:
    """Intensities of the (inner, outer) class part way from ``age_a`` to ``age_b``.

    With ``contrast_flip`` the two classes move towards each other's intensity
    and have swapped places at ``age_b``.

    """
    inner, outer = CLASS_INTENSITIES
    if spec.contrast_flip:
        inner, outer = (
            (1 - fraction) * inner + fraction * outer,
            (1 - fraction) * outer + fraction * inner,
        )
    age = _age_at(spec, fraction)
    return inner + AGE_BRIGHTENING * age, outer + AGE_BRIGHTENING * age


def class_intensities(spec: PhantomSpec, *, later: bool) -> tuple[float, float]:
    """Intensities of the (inner, outer) class at one of the time points."""
    return intensities_at(spec, 1.0 if later else 0.0)


def _render(
    spec: PhantomSpec,
    labels: np.ndarray,
    mask: np.ndarray,
    intensities: tuple[float, float],
    noise_rng: np.random.Generator,
) -> np.ndarray:
    lut = np.array([0.0, *intensities])
    image = ndimage.gaussian_filter(lut[labels], sigma=PARTIAL_VOLUME_SIGMA)
    image[~mask] = 0.0
    if spec.noise_sigma > 0:
        image = image + noise_rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return image.astype(np.float32)


def generate_phantom_series(
    spec: PhantomSpec, time_points: int = 2
) -> tuple[list[Volume], Volume]:
    """Generate evenly spaced time points from ``age_a`` to ``age_b`` plus the mask.

    Deformation and contrast change grow step by step; the first and last
    volume are the pair `generate_phantom_pair` returns.

    """
    labels, mask = series_labels(spec, time_points)
    fractions = _fractions(time_points)
    # noise uses its own stream so that geometry doesn't depend on noise_sigma
    noise = [
        np.random.default_rng(seq)
        for seq in np.random.SeedSequence(spec.seed).spawn(time_points)
    ]
    if time_points > 2:
        # the last time point keeps the pair's second stream
        noise[1], noise[-1] = noise[-1], noise[1]

    meta = {"subject": spec.subject}
    volumes = []
    for label, fraction, age, rng in zip(
        labels, fractions, series_ages(spec, time_points), noise
    ):
        image = _render(spec, label, mask, intensities_at(spec, fraction), rng)
        volumes.append(Volume(image, mask=mask, meta={**meta, "age": repr(age)}))
    return volumes, Volume(mask.astype(np.float32), meta=meta)


def generate_phantom_pair(spec: PhantomSpec) -> tuple[Volume, Volume, Volume]:
    """Generate ``(I_ta, I_tb, mask)`` for a spec.

    Both intensity volumes carry the shared foreground mask,
    the mask volume holds it as 0/1 values.

    """
    (volume_a, volume_b), mask_volume = generate_phantom_series(spec, 2)
    return volume_a, volume_b, mask_volume


def default_specs(
    count: int,
    *,
    size: int = 64,
    seed: int = 0,
    **overrides,
) -> list[PhantomSpec]:
    """Build ``count`` specs with subject ids ``sub-001``... and derived seeds."""
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    return [
        PhantomSpec(
            subject=f"sub-{index + 1:03d}",
            size=(size, size, size),
            seed=int(subject_seed),
            **overrides,
        )
        for index, subject_seed in enumerate(seeds)
    ]


def time_point_tags(time_points: int = 2) -> tuple[str, ...]:
    """Manifest tags: ``ta``/``tb`` for a pair, ``t0``, ``t1``... for a series."""
    if time_points == 2:
        return ("ta", "tb")
    _fractions(time_points)
    return tuple(f"t{k}" for k in range(time_points))


def _write_subject(
    spec: PhantomSpec, out_dir: Path, suffix: str, time_points: int
) -> list[ManifestRow]:
    volumes, mask = generate_phantom_series(spec, time_points)
    rows = []
    for tag, volume in zip(time_point_tags(time_points), volumes):
        filename = f"{spec.subject}_{tag}{suffix}"
        write_volume(volume, out_dir / filename)
        rows.append(ManifestRow(spec.subject, tag, filename))
    write_volume(mask, mask_path(out_dir, spec.subject, suffix))
    logger.debug("Wrote phantom subject", subject=spec.subject, volumes=len(rows))
    return rows


def generate_cohort(
    specs: Sequence[PhantomSpec],
    out_dir: Path,
    *,
    suffix: str = ".nii",
    workers: int | None = None,
    time_points: int = 2,
) -> Manifest:
    """Write the volumes of all specs and the manifest that lists them.

    Each subject gets ``time_points`` volumes, see `time_point_tags`,
    and its mask under ``masks/``.

    """
    out_dir = Path(out_dir)
    time_point_tags(time_points)
    subjects = [spec.subject for spec in specs]
    duplicates = sorted({s for s in subjects if subjects.count(s) > 1})
    if duplicates:
        raise DuplicateSubject(f"duplicate subject ids: {', '.join(duplicates)}")

    try:
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"Failed to create directory {out_dir!s}: {exc}") from exc

    if len(specs) > 1 and workers != 1:
        with Pool(workers) as pool:
            results = pool.starmap(
                _write_subject,
                [(spec, out_dir, suffix, time_points) for spec in specs],
            )
    else:
        results = [
            _write_subject(spec, out_dir, suffix, time_points) for spec in specs
        ]

    manifest = Manifest([row for rows in results for row in rows], root=out_dir)
    manifest.write(out_dir / "manifest.csv")
    logger.info("Generated phantom cohort", subjects=len(specs), path=str(out_dir))
    return manifest


def foreground_fraction(spec: PhantomSpec) -> float:
    _, _, mask = phantom_labels(spec)
    return float(mask.mean())


__all__ = [
    "PhantomSpec",
    "class_intensities",
    "default_specs",
    "displacement_field",
    "foreground_fraction",
    "generate_cohort",
    "generate_phantom_pair",
    "generate_phantom_series",
    "intensities_at",
    "phantom_labels",
    "series_ages",
    "series_labels",
    "time_point_tags",
]
