"""Test manifests, subject pairing and the patch dataset."""

import numpy as np
import pytest
import torch
from faker import Faker

from metamorph.dataset import (
    Manifest,
    ManifestRow,
    PatchPairDataset,
    epoch_generator,
)
from metamorph.errors import IoFailure, ManifestMismatch
from metamorph.volume import BACKGROUND, Volume

fake = Faker()


def _manifest(subjects, tags=("ta", "tb"), root="."):
    return Manifest(
        [ManifestRow(s, t, f"{s}_{t}.nii") for s in subjects for t in tags], root=root
    )


def test_read_write(tmp_path):
    subjects = [fake.unique.user_name() for _ in range(3)]
    manifest = _manifest(subjects, root=tmp_path)

    manifest.write(tmp_path / "manifest.csv")
    loaded = Manifest.read(tmp_path / "manifest.csv")

    assert loaded.rows == manifest.rows
    assert loaded.root == tmp_path
    assert loaded.subjects == subjects
    assert loaded.digest() == manifest.digest()


def test_read_missing_manifest(tmp_path):
    with pytest.raises(IoFailure):
        Manifest.read(tmp_path / "nope.csv")


def test_read_wrong_columns(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("id,when,file\na,ta,a.nii\n")

    with pytest.raises(ManifestMismatch):
        Manifest.read(path)


def test_digest_changes_with_content():
    assert _manifest(["a", "b"]).digest() != _manifest(["a", "c"]).digest()


def test_pairs(cohort):
    manifest = Manifest.read(cohort)

    pairs = manifest.pairs()

    assert [p.subject for p in pairs] == ["sub-001", "sub-002"]
    assert pairs[0].source == cohort.parent / "sub-001_ta.nii"
    assert pairs[0].target == cohort.parent / "sub-001_tb.nii"
    assert pairs[0].mask == cohort.parent / "masks" / "sub-001.nii"


def test_pairs_reversed(cohort):
    pairs = Manifest.read(cohort).pairs("tb", "ta")

    assert pairs[0].source.name == "sub-001_tb.nii"


def test_pairs_missing_timepoint():
    manifest = Manifest(
        [
            ManifestRow("sub-001", "ta", "a.nii"),
            ManifestRow("sub-001", "tb", "b.nii"),
            ManifestRow("sub-002", "ta", "c.nii"),
        ]
    )

    with pytest.raises(ManifestMismatch, match="sub-002"):
        manifest.pairs()


def test_pairs_duplicate_timepoint():
    manifest = Manifest(
        [
            ManifestRow("sub-001", "ta", "a.nii"),
            ManifestRow("sub-001", "ta", "b.nii"),
            ManifestRow("sub-001", "tb", "c.nii"),
        ]
    )

    with pytest.raises(ManifestMismatch):
        manifest.pairs()


def test_pairs_more_timepoints():
    manifest = _manifest(["a", "b"], tags=("0m", "6m", "12m"))

    pairs = manifest.pairs("6m", "12m")

    assert [(p.source.name, p.target.name) for p in pairs] == [
        ("a_6m.nii", "a_12m.nii"),
        ("b_6m.nii", "b_12m.nii"),
    ]
    assert manifest.timepoints == ["0m", "6m", "12m"]


def test_pair_load_normalizes(cohort):
    pair = Manifest.read(cohort).pairs()[0]

    source, target = pair.load()

    for volume in (source, target):
        assert volume.mask is not None
        assert volume.data.min() == -1.0
        assert volume.data.max() == 1.0
        assert (volume.data[~volume.mask] == BACKGROUND).all()
        assert "norm_min" in volume.meta


@pytest.mark.parametrize("k", [2, 3, 5])
def test_split_folds(k):
    manifest = _manifest([f"s{i}" for i in range(10)])

    held_out = set()
    for fold in range(k):
        training, test = manifest.split_folds(k, fold, seed=4)
        assert not set(training.subjects) & set(test.subjects)
        assert len(training.subjects) + len(test.subjects) == 10
        held_out |= set(test.subjects)
    assert held_out == set(manifest.subjects)


def test_split_folds_reproducible():
    manifest = _manifest([f"s{i}" for i in range(10)])

    assert manifest.split_folds(5, 2, seed=1)[1].rows == (
        manifest.split_folds(5, 2, seed=1)[1].rows
    )


@pytest.mark.parametrize("k, fold", [(1, 0), (11, 0), (5, 5), (5, -1)])
def test_split_folds_invalid(k, fold):
    with pytest.raises(ValueError):
        _manifest([f"s{i}" for i in range(10)]).split_folds(k, fold)


def test_epoch_generator():
    first = torch.randperm(10, generator=epoch_generator(3, 1))
    again = torch.randperm(10, generator=epoch_generator(3, 1))
    other = torch.randperm(100, generator=epoch_generator(3, 2))

    assert torch.equal(first, again)
    assert not torch.equal(torch.randperm(100, generator=epoch_generator(3, 1)), other)


def test_patch_dataset(rng):
    source = Volume(rng.uniform(-1, 1, size=(12, 12, 12)))
    target = Volume(rng.uniform(-1, 1, size=(12, 12, 12)))

    dataset = PatchPairDataset([(source, target)], patch_size=8, stride=4)

    assert len(dataset) == 8
    x, y = dataset[len(dataset) - 1]
    assert x.shape == (1, 8, 8, 8)
    assert x.dtype == torch.float32
    np.testing.assert_array_equal(x[0].numpy(), source.data[4:, 4:, 4:])
    np.testing.assert_array_equal(y[0].numpy(), target.data[4:, 4:, 4:])


def test_patch_dataset_uses_mask():
    mask = np.zeros((16, 16, 16), dtype=bool)
    mask[:8, :8, :8] = True
    source = Volume(np.zeros((16, 16, 16)), mask=mask)

    dataset = PatchPairDataset([(source, source)], patch_size=8, stride=8)

    assert len(dataset) == 1
    assert dataset.index[0] == (0, (0, 0, 0))


def test_patch_dataset_shape_mismatch():
    with pytest.raises(ManifestMismatch):
        PatchPairDataset(
            [(Volume(np.zeros((8, 8, 8))), Volume(np.zeros((8, 8, 10))))], patch_size=8
        )
