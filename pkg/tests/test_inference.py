"""Test full-volume prediction."""

import numpy as np
import pytest
import torch
from torch import nn

from metamorph.errors import PatchTooLarge
from metamorph.inference import predict_volume, quality_volume
from metamorph.networks import Discriminator, Generator, MultiScaleOutput
from metamorph.volume import BACKGROUND, normalize_intensity


class Passthrough(nn.Module):
    """Stands in for a generator that reproduces its input."""

    def __init__(self):
        super().__init__()
        self.calls = []

    def forward(self, x, **options):
        self.calls.append((tuple(x.shape), options))
        return MultiScaleOutput(x, x, x)


@pytest.fixture
def volume(phantom_pair):
    return normalize_intensity(phantom_pair[0])


def test_passthrough_reproduces_volume(volume):
    model = Passthrough()

    prediction = predict_volume(model, volume, patch_size=16, stride=8)

    np.testing.assert_allclose(prediction.data, volume.data, atol=1e-6)
    assert len(model.calls) == 27
    assert model.calls[0][1]["dropout"] is False
    assert prediction.spacing == volume.spacing
    np.testing.assert_array_equal(prediction.mask, volume.mask)


def test_batching(volume):
    model = Passthrough()

    prediction = predict_volume(
        model, volume, patch_size=16, stride=8, batch_size=5, blend="gaussian"
    )

    assert len(model.calls) == 6
    assert model.calls[0][0] == (5, 1, 16, 16, 16)
    assert model.calls[-1][0] == (2, 1, 16, 16, 16)
    np.testing.assert_allclose(prediction.data, volume.data, atol=1e-6)


def test_generator_prediction(volume, tiny_generator_config):
    generator = Generator(tiny_generator_config, seed=2)

    first = predict_volume(generator, volume, patch_size=16, stride=16)
    again = predict_volume(generator, volume, patch_size=16, stride=16, batch_size=4)

    assert first.shape == volume.shape
    assert first.data.min() >= -1.0
    assert first.data.max() <= 1.0
    assert (first.data[~volume.mask] == BACKGROUND).all()
    np.testing.assert_allclose(first.data, again.data, atol=1e-5)
    assert not generator.training


def test_dropout_prediction(volume, tiny_generator_config):
    generator = Generator(tiny_generator_config, seed=2)

    def run(seed):
        rng = torch.Generator().manual_seed(seed)
        return predict_volume(
            generator, volume, patch_size=16, stride=16, dropout=True, rng=rng
        ).data

    np.testing.assert_array_equal(run(1), run(1))
    assert not np.array_equal(run(1), run(2))


def test_quality_map(volume, tiny_discriminator_config):
    critic = Discriminator(tiny_discriminator_config)

    quality = quality_volume(critic, volume, patch_size=16, stride=16)

    inside = quality.data[volume.mask]
    assert quality.shape == volume.shape
    assert inside.min() > 0.0
    assert inside.max() < 1.0
    assert (quality.data[~volume.mask] == 0.0).all()


def test_volume_smaller_than_patch(volume):
    with pytest.raises(PatchTooLarge):
        predict_volume(Passthrough(), volume, patch_size=64)
