"""Print evaluation and uncertainty results to the terminal."""

from __future__ import annotations

import math

import numpy as np

from .evaluation import MetricReport
from .uncertainty import UncertaintyMap

# Define terminal colors for output
INFO = "\033[37m"  # white
NOTE = "\033[34m"  # blue
BAD = "\033[31m"  # red
WARN = "\033[33m"  # yellow
OK = "\033[32m"  # green
GOOD = "\033[32;1m"  # bright green
END = "\033[0m"

# (good, acceptable) thresholds, anything lower is shown as bad
PSNR_THRESHOLDS = (30.0, 25.0)
SSIM_THRESHOLDS = (0.9, 0.8)


def _colorize(value: float, thresholds: tuple[float, float], fmt: str) -> str:
    if math.isinf(value):
        return f"{GOOD}inf{END}"
    if math.isnan(value):
        return f"{WARN}n/a{END}"
    good, acceptable = thresholds
    if value >= good:
        color = GOOD
    elif value >= acceptable:
        color = OK
    else:
        color = BAD
    return f"{color}{value:{fmt}}{END}"


def _plain(value: float, fmt: str) -> str:
    return "n/a" if math.isnan(value) else f"{value:{fmt}}"


def print_metrics(report: MetricReport, *, details: bool = True) -> None:
    """Pretty print per-subject metrics and the mean ± std per direction."""
    if details:
        for row in report.rows:
            print(
                f"{INFO}{row.subject}{END} {row.direction:>8}: "
                f"PSNR {_colorize(row.psnr_db, PSNR_THRESHOLDS, '.2f')} dB, "
                f"SSIM {_colorize(row.ssim, SSIM_THRESHOLDS, '.4f')}"
            )
        print()

    for summary in report.summary():
        print(
            f"{NOTE}{summary.direction}{END} ({summary.count:,d} subjects): "
            f"PSNR {_colorize(summary.psnr_mean, PSNR_THRESHOLDS, '.2f')}"
            f" ± {_plain(summary.psnr_std, '.3f')} dB, "
            f"SSIM {_colorize(summary.ssim_mean, SSIM_THRESHOLDS, '.4f')}"
            f" ± {_plain(summary.ssim_std, '.4f')}"
        )
    print(f"{NOTE}std is the {report.std_convention}{END}")


def print_uncertainty(
    uncertainty: UncertaintyMap, correlation: tuple[float, float] | None = None
) -> None:
    """Summarize an uncertainty map (within its mask when it has one)."""
    sigma = uncertainty.sigma.data
    if uncertainty.sigma.mask is not None:
        sigma = sigma[uncertainty.sigma.mask]
    print(
        f"{INFO}{uncertainty.kind}{END} uncertainty over "
        f"{uncertainty.n_samples:,d} passes: "
        f"mean {sigma.mean():.4f}, p95 {np.percentile(sigma, 95):.4f}, "
        f"max {sigma.max():.4f}"
    )
    if correlation is not None:
        rho, p_value = correlation
        color = OK if rho > 0 and p_value < 0.01 else WARN
        print(
            f"Spearman correlation with error: {color}{rho:.3f}{END} "
            f"(p={p_value:.2g})"
        )
