"""Test the synthetic phantom generator."""

import numpy as np
import pytest
from faker import Faker

from metamorph import phantom
from metamorph.dataset import Manifest
from metamorph.errors import DuplicateSubject, InvalidSpec, IoFailure
from metamorph.phantom import PhantomSpec
from metamorph.volume import read_volume

fake = Faker()


def test_deterministic(phantom_spec):
    first = phantom.generate_phantom_pair(phantom_spec)
    second = phantom.generate_phantom_pair(phantom_spec)

    for a, b in zip(first, second):
        assert a.data.tobytes() == b.data.tobytes()


def test_degenerate_pair_is_identical():
    spec = PhantomSpec(
        size=(32, 32, 32),
        age_a=0.5,
        age_b=0.5,
        contrast_flip=False,
        deform_amplitude=0.0,
        noise_sigma=0.0,
        seed=3,
    )

    volume_a, volume_b, _ = phantom.generate_phantom_pair(spec)

    np.testing.assert_array_equal(volume_a.data, volume_b.data)


def test_contrast_flip(phantom_spec):
    labels_a, labels_b, _ = phantom.phantom_labels(phantom_spec)
    volume_a, volume_b, _ = phantom.generate_phantom_pair(phantom_spec)

    inner_a = volume_a.data[labels_a == 1].mean()
    outer_a = volume_a.data[labels_a == 2].mean()
    inner_b = volume_b.data[labels_b == 1].mean()
    outer_b = volume_b.data[labels_b == 2].mean()

    assert inner_a < outer_a
    assert inner_b > outer_b


def test_no_contrast_flip_keeps_ordering():
    spec = PhantomSpec(size=(32, 32, 32), contrast_flip=False, noise_sigma=0.0)

    assert phantom.class_intensities(spec, later=True) == pytest.approx(
        (0.5, 0.9)
    )
    assert phantom.class_intensities(spec, later=False) == pytest.approx(
        (0.35, 0.75)
    )


def test_labels(phantom_spec):
    labels_a, labels_b, mask = phantom.phantom_labels(phantom_spec)

    assert set(np.unique(labels_a)) == {0, 1, 2}
    np.testing.assert_array_equal(labels_a == 0, ~mask)
    np.testing.assert_array_equal(labels_b == 0, ~mask)
    # the boundary moves between the time points
    assert (labels_a != labels_b).any()


def test_mask_volume(phantom_pair):
    volume_a, volume_b, mask = phantom_pair

    assert set(np.unique(mask.data)) == {0.0, 1.0}
    np.testing.assert_array_equal(volume_a.mask, mask.data > 0)
    np.testing.assert_array_equal(volume_b.mask, mask.data > 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_foreground_fraction(seed):
    spec = phantom.default_specs(1, size=32, seed=seed)[0]

    assert 0.2 <= phantom.foreground_fraction(spec) <= 0.8


def _peak(field):
    return np.sqrt((field**2).sum(axis=0)).max()


@pytest.mark.parametrize("n_blobs", [1, 4, 8])
@pytest.mark.parametrize("seed", range(10))
def test_displacement_is_capped(n_blobs, seed):
    spec = PhantomSpec(
        size=(40, 40, 40), deform_amplitude=100.0, n_blobs=n_blobs, seed=seed
    )

    field = phantom.displacement_field(spec)

    assert field.shape == (3, 40, 40, 40)
    assert _peak(field) == pytest.approx(4.0)


def test_displacement_is_capped_by_smallest_side():
    spec = PhantomSpec(size=(32, 48, 64), deform_amplitude=50.0, n_blobs=8, seed=1)

    assert _peak(phantom.displacement_field(spec)) == pytest.approx(3.2)


def test_small_displacement_is_not_rescaled():
    spec = PhantomSpec(size=(40, 40, 40), deform_amplitude=0.5, n_blobs=1, seed=2)

    peak = _peak(phantom.displacement_field(spec))

    assert 0 < peak <= 0.5


def test_displacement_scales_with_age_gap():
    base = PhantomSpec(size=(32, 32, 32), deform_amplitude=0.5, age_a=0.0, age_b=1.0)
    half = PhantomSpec(size=(32, 32, 32), deform_amplitude=0.5, age_a=0.5, age_b=1.0)

    np.testing.assert_allclose(
        phantom.displacement_field(half), 0.5 * phantom.displacement_field(base)
    )


def test_series_ends_match_pair(phantom_spec):
    volumes, mask = phantom.generate_phantom_series(phantom_spec, 5)
    volume_a, volume_b, pair_mask = phantom.generate_phantom_pair(phantom_spec)

    assert len(volumes) == 5
    assert volumes[0].data.tobytes() == volume_a.data.tobytes()
    assert volumes[-1].data.tobytes() == volume_b.data.tobytes()
    np.testing.assert_array_equal(mask.data, pair_mask.data)


def test_series_ages():
    spec = PhantomSpec(size=(32, 32, 32), age_a=0.0, age_b=0.75)

    assert phantom.series_ages(spec, 4) == pytest.approx([0.0, 0.25, 0.5, 0.75])
    assert phantom.series_ages(spec, 4)[-1] == 0.75


def test_series_contrast_changes_step_by_step():
    spec = PhantomSpec(size=(32, 32, 32), age_a=0.0, age_b=0.0)

    gaps = [
        outer - inner
        for inner, outer in (
            phantom.intensities_at(spec, k / 4) for k in range(5)
        )
    ]

    assert gaps == pytest.approx([0.4, 0.2, 0.0, -0.2, -0.4])


def test_series_deformation_grows():
    spec = PhantomSpec(
        size=(48, 48, 48), deform_amplitude=4.0, contrast_flip=False, seed=4
    )

    labels, _ = phantom.series_labels(spec, 3)

    assert (labels[1] != labels[0]).any()
    # half way the boundary has moved less than at the end
    assert (labels[1] != labels[0]).sum() < (labels[2] != labels[0]).sum()


@pytest.mark.parametrize("time_points", [0, 1])
def test_series_needs_two_time_points(phantom_spec, time_points):
    with pytest.raises(InvalidSpec):
        phantom.generate_phantom_series(phantom_spec, time_points)


def test_time_point_tags():
    assert phantom.time_point_tags(2) == ("ta", "tb")
    assert phantom.time_point_tags(4) == ("t0", "t1", "t2", "t3")


@pytest.mark.parametrize(
    "changes",
    [
        {"size": (16, 32, 32)},
        {"n_blobs": 0},
        {"age_a": 1.5},
        {"deform_amplitude": -1.0},
        {"noise_sigma": -0.1},
        {"seed": -1},
    ],
)
def test_invalid_spec(changes):
    with pytest.raises(InvalidSpec):
        PhantomSpec(**changes)


def test_default_specs():
    specs = phantom.default_specs(3, size=32, seed=9, noise_sigma=0.0)

    assert [s.subject for s in specs] == ["sub-001", "sub-002", "sub-003"]
    assert len({s.seed for s in specs}) == 3
    assert all(s.noise_sigma == 0.0 for s in specs)
    assert specs == phantom.default_specs(3, size=32, seed=9, noise_sigma=0.0)


def test_generate_cohort(tmp_path):
    specs = phantom.default_specs(3, size=32)

    manifest = phantom.generate_cohort(specs, tmp_path, workers=1)

    assert len(manifest) == 6
    assert len(list(tmp_path.glob("sub-*.nii"))) == 6
    assert len(list((tmp_path / "masks").glob("*.nii"))) == 3
    assert Manifest.read(tmp_path / "manifest.csv").rows == manifest.rows
    assert read_volume(tmp_path / "sub-002_tb.nii").shape == (32, 32, 32)


def test_generate_cohort_in_pool(tmp_path):
    specs = phantom.default_specs(2, size=32)

    pooled = phantom.generate_cohort(specs, tmp_path / "pool", workers=2)
    serial = phantom.generate_cohort(specs, tmp_path / "serial", workers=1)

    assert pooled.rows == serial.rows
    for row in pooled.rows:
        a = read_volume(pooled.resolve(row))
        b = read_volume(serial.resolve(row))
        assert a.data.tobytes() == b.data.tobytes()


def test_empty_cohort(tmp_path):
    manifest = phantom.generate_cohort([], tmp_path)

    assert len(manifest) == 0
    assert (tmp_path / "manifest.csv").read_text() == "subject,timepoint,path\n"
    assert not list(tmp_path.glob("*.nii"))


def test_duplicate_subject(tmp_path):
    subject = fake.user_name()
    specs = [PhantomSpec(subject=subject, size=(32, 32, 32), seed=s) for s in (1, 2)]

    with pytest.raises(DuplicateSubject):
        phantom.generate_cohort(specs, tmp_path)


def test_unwritable_cohort(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")

    with pytest.raises(IoFailure):
        phantom.generate_cohort(phantom.default_specs(1, size=32), blocker)


def test_generate_series_cohort(tmp_path):
    specs = phantom.default_specs(2, size=32, noise_sigma=0.0)

    manifest = phantom.generate_cohort(specs, tmp_path, workers=1, time_points=4)

    assert len(manifest) == 8
    assert manifest.timepoints == ["t0", "t1", "t2", "t3"]
    assert len(list(tmp_path.glob("sub-*.nii"))) == 8
    pairs = manifest.pairs("t0", "t3")
    assert [pair.subject for pair in pairs] == ["sub-001", "sub-002"]
    _, volume_b, _ = phantom.generate_phantom_pair(specs[1])
    np.testing.assert_allclose(
        read_volume(tmp_path / "sub-002_t3.nii").data, volume_b.data
    )
