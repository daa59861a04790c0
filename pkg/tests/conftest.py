from pathlib import Path

import numpy as np
import pytest
import structlog

from metamorph.config import AppConfig
from metamorph.networks import DiscriminatorConfig, GeneratorConfig
from metamorph.phantom import (
    PhantomSpec,
    default_specs,
    generate_cohort,
    generate_phantom_pair,
)
from metamorph.volume import Volume


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow", action="store_true", default=False, help="run desk-scale training"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains networks for minutes to hours")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def reset_structlog():
    """Commands configure logging globally, undo that after each test."""
    yield
    structlog.reset_defaults()


@pytest.fixture
def app_config() -> AppConfig:
    """Defaults only, the process environment is ignored."""
    return AppConfig.from_environ({})


@pytest.fixture
def tiny_generator_config() -> GeneratorConfig:
    return GeneratorConfig(enc_channels=(4, 4), sft_channels=8, n_res_blocks=1)


@pytest.fixture
def tiny_discriminator_config() -> DiscriminatorConfig:
    return DiscriminatorConfig(channels=(4, 8, 8))


@pytest.fixture
def phantom_spec() -> PhantomSpec:
    return PhantomSpec(size=(32, 32, 32), seed=11)


@pytest.fixture
def phantom_pair(phantom_spec) -> tuple[Volume, Volume, Volume]:
    return generate_phantom_pair(phantom_spec)


@pytest.fixture
def cohort(tmp_path) -> Path:
    """Two 32³ phantom subjects, returns the manifest path."""
    out_dir = tmp_path / "cohort"
    generate_cohort(default_specs(2, size=32, seed=5), out_dir, workers=1)
    return out_dir / "manifest.csv"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
