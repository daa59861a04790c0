"""Generator and discriminator networks."""

from __future__ import annotations

from .blocks import McDropout, MultiScaleOutput, ResidualBlock, init_weights  # noqa
from .discriminator import Discriminator, DiscriminatorConfig  # noqa
from .generator import Generator, GeneratorConfig  # noqa
