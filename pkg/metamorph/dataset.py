"""Cohort manifests and the patch dataset built from them.

A manifest is a CSV file with the columns ``subject,timepoint,path``,
paths are relative to the manifest's directory.
Foreground masks are looked up as ``masks/<subject><suffix>`` next to it.

"""

from __future__ import annotations

import csv
import hashlib
import io
from collections.abc import Iterable, Sequence
from pathlib import Path

import attrs
import numpy as np
import structlog
import torch
from torch.utils.data import Dataset

from .errors import InvalidConfig, IoFailure, ManifestMismatch
from .patches import PatchGrid, plan_patch_offsets
from .volume import Volume, normalize_intensity, read_volume

logger = structlog.get_logger()

FIELDS = ("subject", "timepoint", "path")


def mask_path(root: Path, subject: str, suffix: str = ".nii") -> Path:
    return Path(root) / "masks" / f"{subject}{suffix}"


def _volume_suffix(path: str) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii", ".mgv"):
        if name.endswith(suffix):
            return suffix
    return Path(path).suffix


@attrs.frozen
class ManifestRow:
    subject: str
    timepoint: str
    path: str


@attrs.frozen
class SubjectPair:
    """Source and target volume of one subject, plus the optional mask."""

    subject: str
    source: Path
    target: Path
    mask: Path | None = None

    def load(self) -> tuple[Volume, Volume]:
        """Read both volumes, apply the mask and normalize them to [-1, 1]."""
        source = read_volume(self.source)
        target = read_volume(self.target)
        if source.shape != target.shape:
            raise ManifestMismatch(
                f"{self.subject}: source shape {source.shape} "
                f"does not match target {target.shape}"
            )
        if self.mask is not None:
            mask = read_volume(self.mask)
            if mask.shape != source.shape:
                raise ManifestMismatch(f"{self.subject}: mask shape {mask.shape}")
            source = source.with_mask(mask)
            target = target.with_mask(mask)
        return normalize_intensity(source), normalize_intensity(target)


@attrs.define
class Manifest:
    rows: list[ManifestRow] = attrs.field(factory=list, converter=list)
    root: Path = attrs.field(default=Path("."), converter=Path)

    @classmethod
    def read(cls, path: Path) -> Manifest:
        path = Path(path)
        try:
            with open(path, newline="", encoding="utf-8") as f:
                reader = csv.DictReader(f)
                if tuple(reader.fieldnames or ()) != FIELDS:
                    raise ManifestMismatch(
                        f"{path!s}: expected columns {','.join(FIELDS)}, "
                        f"got {reader.fieldnames}"
                    )
                rows = [
                    ManifestRow(row["subject"], row["timepoint"], row["path"])
                    for row in reader
                ]
        except OSError as exc:
            raise IoFailure(f"Failed to read manifest {path!s}: {exc}") from exc
        logger.debug("Read manifest", path=str(path), rows=len(rows))
        return cls(rows, root=path.parent)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(FIELDS)
        writer.writerows(attrs.astuple(row) for row in self.rows)
        return buffer.getvalue()

    def write(self, path: Path) -> None:
        try:
            Path(path).write_text(self.to_csv(), encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"Failed to write manifest {path!s}: {exc}") from exc

    def digest(self) -> str:
        """SHA-256 of the manifest contents, recorded in checkpoints."""
        return hashlib.sha256(self.to_csv().encode("utf-8")).hexdigest()

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def subjects(self) -> list[str]:
        return list(dict.fromkeys(row.subject for row in self.rows))

    @property
    def timepoints(self) -> list[str]:
        return list(dict.fromkeys(row.timepoint for row in self.rows))

    def resolve(self, row: ManifestRow) -> Path:
        return self.root / row.path

    def subset(self, subjects: Iterable[str]) -> Manifest:
        wanted = set(subjects)
        return Manifest(
            [row for row in self.rows if row.subject in wanted], root=self.root
        )

    def pairs(
        self, source_tag: str = "ta", target_tag: str = "tb"
    ) -> list[SubjectPair]:
        """Pair every subject's source and target time point.

        Raises `ManifestMismatch` when a subject lacks one of the two time points
        or lists one of them twice.

        """
        paths: dict[tuple[str, str], ManifestRow] = {}
        for row in self.rows:
            if row.timepoint not in (source_tag, target_tag):
                continue
            key = (row.subject, row.timepoint)
            if key in paths:
                raise ManifestMismatch(
                    f"subject {row.subject} lists time point {row.timepoint} twice"
                )
            paths[key] = row

        pairs = []
        for subject in self.subjects:
            have = {tag for tag in (source_tag, target_tag) if (subject, tag) in paths}
            if not have:
                continue
            if len(have) == 1:
                missing = target_tag if source_tag in have else source_tag
                raise ManifestMismatch(f"subject {subject} has no {missing} volume")
            source = paths[(subject, source_tag)]
            mask = mask_path(self.root, subject, _volume_suffix(source.path))
            pairs.append(
                SubjectPair(
                    subject,
                    self.resolve(source),
                    self.resolve(paths[(subject, target_tag)]),
                    mask if mask.exists() else None,
                )
            )
        return pairs

    def split_folds(
        self, k: int, fold: int, seed: int = 0
    ) -> tuple[Manifest, Manifest]:
        """Split subjects into ``k`` folds, return ``(training, held_out)``."""
        subjects = self.subjects
        if not 2 <= k <= len(subjects):
            raise InvalidConfig(f"cannot split {len(subjects)} subjects into {k} folds")
        if not 0 <= fold < k:
            raise InvalidConfig(f"fold must be in [0, {k}), got {fold}")
        order = np.random.default_rng(seed).permutation(len(subjects))
        held_out = {subjects[i] for i in np.array_split(order, k)[fold]}
        training = [s for s in subjects if s not in held_out]
        return self.subset(training), self.subset(held_out)


def epoch_generator(seed: int, epoch: int) -> torch.Generator:
    """Random generator for the patch order of one epoch."""
    state = np.random.SeedSequence([seed, epoch]).generate_state(1, dtype=np.uint64)
    return torch.Generator().manual_seed(int(state[0]))


class PatchPairDataset(Dataset):
    """Aligned (source, target) patches of all pairs, as ``(1, p, p, p)`` tensors.

    The patch grid of each volume is planned once, on the subject's mask
    when available.

    """

    def __init__(
        self,
        volumes: Sequence[tuple[Volume, Volume]],
        patch_size: int = 64,
        stride: int = 10,
        min_foreground: float = 0.1,
    ):
        self.volumes = list(volumes)
        self.grids: list[PatchGrid] = []
        self.index: list[tuple[int, tuple[int, int, int]]] = []
        for number, (source, target) in enumerate(self.volumes):
            if source.shape != target.shape:
                raise ManifestMismatch(
                    f"pair {number}: {source.shape} does not match {target.shape}"
                )
            grid = plan_patch_offsets(
                source.shape, patch_size, stride, source.mask, min_foreground
            )
            self.grids.append(grid)
            self.index.extend((number, offset) for offset in grid.offsets)
        logger.info(
            "Planned training patches", pairs=len(self.volumes), patches=len(self)
        )

    @classmethod
    def from_pairs(cls, pairs: Sequence[SubjectPair], **kwargs) -> PatchPairDataset:
        return cls([pair.load() for pair in pairs], **kwargs)

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, item: int) -> tuple[torch.Tensor, torch.Tensor]:
        number, offset = self.index[item]
        grid = self.grids[number]
        window = grid.slices(offset)
        source, target = self.volumes[number]
        return (
            torch.from_numpy(np.array(source.data[window], dtype=np.float32))[None],
            torch.from_numpy(np.array(target.data[window], dtype=np.float32))[None],
        )
