"""Image quality metrics and cohort evaluation of a trained checkpoint."""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from pathlib import Path

import attrs
import numpy as np
import structlog
from matplotlib.figure import Figure
from scipy import ndimage
from structlog.contextvars import bound_contextvars

from .checkpoint import load_critic, load_generator, read_checkpoint
from .dataset import Manifest
from .errors import (
    EmptyCohort,
    EmptyMask,
    InvalidConfig,
    IoFailure,
    ShapeMismatch,
    VolumeTooSmall,
)
from .inference import predict_volume, quality_volume
from .types import Direction
from .uncertainty import epistemic_map
from .volume import Volume

logger = structlog.get_logger()

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_WINDOW = 2 * SSIM_RADIUS + 1
K1 = 0.01
K2 = 0.03

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.csv"


def _arrays(pred: Volume, target: Volume, masked: bool):
    if pred.shape != target.shape:
        raise ShapeMismatch(
            f"prediction {pred.shape} does not match target {target.shape}"
        )
    mask = None
    if masked:
        mask = target.mask if target.mask is not None else pred.mask
    if mask is not None and not mask.any():
        raise EmptyMask("the mask selects no voxel")
    return pred.data.astype(np.float64), target.data.astype(np.float64), mask


def psnr(
    pred: Volume, target: Volume, data_range: float = 2.0, *, masked: bool = True
) -> float:
    """Peak signal-to-noise ratio in dB, ``inf`` for identical volumes."""
    if data_range <= 0:
        raise InvalidConfig("data_range must be positive")
    x, y, mask = _arrays(pred, target, masked)
    squared = (x - y) ** 2
    mse = float(squared[mask].mean() if mask is not None else squared.mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def ssim(
    pred: Volume, target: Volume, data_range: float = 2.0, *, masked: bool = True
) -> float:
    """Mean structural similarity with an isotropic 11-voxel Gaussian window.

    Voxels closer than the window radius to the border are left out.

    """
    x, y, mask = _arrays(pred, target, masked)
    if min(x.shape) < SSIM_WINDOW:
        raise VolumeTooSmall(
            f"volume {x.shape} is smaller than the {SSIM_WINDOW} voxel window"
        )
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2

    def smooth(a: np.ndarray) -> np.ndarray:
        return ndimage.gaussian_filter(a, SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA)

    mu_x = smooth(x)
    mu_y = smooth(y)
    var_x = smooth(x * x) - mu_x**2
    var_y = smooth(y * y) - mu_y**2
    cov = smooth(x * y) - mu_x * mu_y
    local = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )

    inner = (slice(SSIM_RADIUS, -SSIM_RADIUS),) * 3
    local = local[inner]
    if mask is None:
        return float(local.mean())
    if not mask[inner].any():
        raise EmptyMask(
            f"no mask voxel lies {SSIM_RADIUS} or more voxels inside the border"
        )
    return float(local[mask[inner]].mean())


def error_map(pred: Volume, target: Volume) -> Volume:
    if pred.shape != target.shape:
        raise ShapeMismatch(
            f"prediction {pred.shape} does not match target {target.shape}"
        )
    error = np.abs(pred.data.astype(np.float64) - target.data.astype(np.float64))
    return Volume(error, spacing=target.spacing, mask=target.mask)


@attrs.frozen
class SubjectMetrics:
    subject: str
    direction: str
    psnr_db: float
    ssim: float


@attrs.frozen
class Summary:
    direction: str
    count: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float


def mean_std(values: Sequence[float], ddof: int = 0) -> tuple[float, float]:
    """Mean and standard deviation (``ddof=0`` for the population form)."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        return math.nan, math.nan
    if array.size <= ddof:
        return float(array.mean()), math.nan
    return float(array.mean()), float(array.std(ddof=ddof))


@attrs.define
class MetricReport:
    rows: list[SubjectMetrics] = attrs.field(factory=list)
    std_ddof: int = 0

    def directions(self) -> list[str]:
        return list(dict.fromkeys(row.direction for row in self.rows))

    def summary(self) -> list[Summary]:
        summaries = []
        for direction in self.directions():
            rows = [row for row in self.rows if row.direction == direction]
            psnr_mean, psnr_std = mean_std([r.psnr_db for r in rows], self.std_ddof)
            ssim_mean, ssim_std = mean_std([r.ssim for r in rows], self.std_ddof)
            summaries.append(
                Summary(direction, len(rows), psnr_mean, psnr_std, ssim_mean, ssim_std)
            )
        return summaries

    @property
    def std_convention(self) -> str:
        if self.std_ddof == 0:
            return "population standard deviation (ddof=0)"
        return f"sample standard deviation (ddof={self.std_ddof})"

    def write_metrics(self, path: Path) -> Path:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(("subject", "direction", "psnr_db", "ssim"))
            for row in self.rows:
                writer.writerow(
                    (row.subject, row.direction, repr(row.psnr_db), repr(row.ssim))
                )
        return path

    def write_summary(self, path: Path) -> Path:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# std: {self.std_convention}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(
                ("direction", "n", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std")
            )
            for s in self.summary():
                writer.writerow(
                    (
                        s.direction,
                        s.count,
                        s.psnr_mean,
                        s.psnr_std,
                        s.ssim_mean,
                        s.ssim_std,
                    )
                )
        return path


# panels shown in grey levels, everything else gets a colour map and a bar
INTENSITY_PANELS = {"source", "target", "prediction"}


def mid_slice(volume: Volume) -> np.ndarray:
    return volume.data[volume.shape[0] // 2]


def write_montage(path: Path, panels: dict[str, Volume]) -> Path:
    """Save the middle axial slice of each volume side by side."""
    fig = Figure(figsize=(3 * len(panels), 3.2))
    axes = fig.subplots(1, len(panels), squeeze=False)[0]
    for ax, (title, volume) in zip(axes, panels.items()):
        intensity = title in INTENSITY_PANELS
        image = ax.imshow(mid_slice(volume), cmap="gray" if intensity else "magma")
        ax.set_title(title)
        ax.axis("off")
        if not intensity:
            fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    try:
        fig.savefig(path, dpi=100)
    except OSError as exc:
        raise IoFailure(f"Failed to write montage {path!s}: {exc}") from exc
    return path


def evaluate_cohort(
    manifest: Manifest,
    checkpoint: Path,
    out_dir: Path,
    *,
    source_tag: str = "ta",
    target_tag: str = "tb",
    patch_size: int = 64,
    stride: int = 32,
    blend: str = "mean",
    data_range: float = 2.0,
    masked: bool = True,
    std_ddof: int = 0,
    uncertainty_samples: int = 0,
    keep: float = 0.8,
    seed: int = 0,
    device: str = "cpu",
) -> MetricReport:
    """Predict both directions for every pair and score them against the truth.

    Writes ``metrics.csv``, ``summary.csv`` and one montage per subject and
    direction (prediction, error, quality and, with ``uncertainty_samples``,
    epistemic uncertainty) under ``out_dir``.

    """
    pairs = manifest.pairs(source_tag, target_tag)
    if not pairs:
        raise EmptyCohort(
            f"manifest has no {source_tag}/{target_tag} pairs to evaluate"
        )

    out_dir = Path(out_dir)
    montage_dir = out_dir / "montages"
    try:
        montage_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"Failed to create {montage_dir!s}: {exc}") from exc

    loaded = read_checkpoint(checkpoint, map_location=device)
    networks = {
        direction: (
            load_generator(loaded, direction, device),
            load_critic(loaded, direction, device),
        )
        for direction in Direction
    }
    options = {
        "patch_size": patch_size,
        "stride": stride,
        "blend": blend,
        "device": device,
    }

    report = MetricReport(std_ddof=std_ddof)
    for pair in pairs:
        source, target = pair.load()
        for direction, (generator, critic) in networks.items():
            x, y = (
                (source, target) if direction is Direction.FORWARD else (target, source)
            )
            with bound_contextvars(subject=pair.subject, direction=str(direction)):
                prediction = predict_volume(generator, x, **options)
                row = SubjectMetrics(
                    pair.subject,
                    str(direction),
                    psnr(prediction, y, data_range, masked=masked),
                    ssim(prediction, y, data_range, masked=masked),
                )
                report.rows.append(row)
                logger.info("Evaluated subject", psnr_db=row.psnr_db, ssim=row.ssim)

                panels = {
                    "source": x,
                    "target": y,
                    "prediction": prediction,
                    "error": error_map(prediction, y),
                    "quality": quality_volume(critic, prediction, **options),
                }
                if uncertainty_samples > 0:
                    panels["epistemic"] = epistemic_map(
                        generator,
                        x,
                        uncertainty_samples,
                        keep,
                        seed,
                        **options,
                    ).sigma
                write_montage(montage_dir / f"{pair.subject}_{direction}.png", panels)

    report.write_metrics(out_dir / METRICS_FILE)
    report.write_summary(out_dir / SUMMARY_FILE)
    return report
