"""Define some widely used types."""
# This module shouldn't import anything to avoid circular imports!

from __future__ import annotations

import enum


class Direction(enum.Enum):
    """Enumerate the two translation paths.

    The forward path predicts the later time point from the earlier one
    (generator ``G_a``, judged by ``D_b``), the backward path goes the other way.

    """

    FORWARD = "forward"
    BACKWARD = "backward"

    def __str__(self):
        return self.value


class Phase(enum.Enum):
    """Enumerate the training phases."""

    PRETRAIN = "pretrain"
    ADVERSARIAL = "adversarial"

    def __str__(self):
        return self.value


class Scale(enum.Enum):
    """Enumerate the deep-supervision scales (full, half, quarter resolution)."""

    S1 = "s1"
    S2 = "s2"
    S3 = "s3"

    def __str__(self):
        return self.value


class UncertaintyKind(enum.Enum):
    EPISTEMIC = "epistemic"
    ALEATORIC = "aleatoric"

    def __str__(self):
        return self.value


class Ablation(enum.Enum):
    """Enumerate the named ablation configurations.

    Each value is the pair ``(use_frequency_branch, use_quality_guidance)``.

    """

    BACKBONE = (False, False)
    SFT_NCG = (True, False)
    ST_CG = (False, True)
    MGAN = (True, True)

    @classmethod
    def from_label(cls, label: str) -> Ablation:
        return cls[label.upper().replace("-", "_")]

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")

    def __str__(self):
        return self.label
