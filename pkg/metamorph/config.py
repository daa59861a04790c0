"""Configuration for Metamorph from the environment and config files."""

from __future__ import annotations

import json
import logging
import os
import sys
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import attrs
import environ
import pendulum
import platformdirs
import structlog
from dotenv import load_dotenv

from . import __version__
from .errors import InvalidConfig, IoFailure
from .losses import LossWeights
from .networks import DiscriminatorConfig, GeneratorConfig
from .training import TrainingConfig
from .types import Ablation

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = structlog.get_logger()

FOLDER_NAME = "metamorph"
PREFIX = "METAMORPH"
RUN_FORMAT = "metamorph-run/1"
SNAPSHOT_FILE = "run-config.json"


def _get_log_level(level: str | int) -> int:
    if isinstance(level, int):
        return level
    return getattr(logging, level.upper())


def _ints(value) -> tuple[int, ...]:
    if isinstance(value, str):
        value = [v for v in value.replace(" ", "").split(",") if v]
    return tuple(int(v) for v in value)


def _floats(value) -> tuple[float, ...]:
    if isinstance(value, str):
        value = [v for v in value.replace(" ", "").split(",") if v]
    return tuple(float(v) for v in value)


def _build(section: str, factory, **kwargs):
    """Create a domain config, reporting bad values as `InvalidConfig`."""
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"invalid {section} settings: {exc}") from exc


def _ablation(value: str | Ablation | None) -> Ablation | None:
    if value is None or isinstance(value, Ablation):
        return value
    if value.strip() == "":
        return None
    return Ablation.from_label(value.strip())


@environ.config(prefix=PREFIX)
class AppConfig:
    @environ.config
    class Generator:
        in_channels: int = environ.var(default=1, converter=int)
        enc_channels: tuple[int, ...] = environ.var(default="64,32", converter=_ints)
        enc_strides: tuple[int, ...] = environ.var(default="1,2", converter=_ints)
        sft_channels: int = environ.var(default=64, converter=int)
        n_res_blocks: int = environ.var(default=9, converter=int)
        dropout_keep: float = environ.var(default=0.8, converter=float)
        wavelet: str = environ.var(default="bior1.3")

    @environ.config
    class Discriminator:
        channels: tuple[int, ...] = environ.var(default="64,128,256", converter=_ints)
        kernel: int = environ.var(default=4, converter=int)

    @environ.config
    class Loss:
        adversarial: float = environ.var(default=1.0, converter=float)
        paired: float = environ.var(default=10.0, converter=float)
        cycle: float = environ.var(default=10.0, converter=float)
        beta: float = environ.var(default=1.5, converter=float)
        scale_weights: tuple[float, ...] = environ.var(
            default="1,1,1", converter=_floats
        )

    @environ.config
    class Patches:
        size: int = environ.var(default=64, converter=int)
        train_stride: int = environ.var(default=10, converter=int)
        inference_stride: int = environ.var(default=32, converter=int)
        min_foreground: float = environ.var(default=0.1, converter=float)
        blend: str = environ.var(default="mean")

    @environ.config
    class Training:
        pretrain_epochs: int = environ.var(default=5, converter=int)
        adversarial_epochs: int = environ.var(default=50, converter=int)
        learning_rate: float = environ.var(default=1e-4, converter=float)
        betas: tuple[float, ...] = environ.var(default="0.9,0.999", converter=_floats)
        batch_size: int = environ.var(default=1, converter=int)
        discriminator_steps: int = environ.var(default=1, converter=int)
        workers: int = environ.var(default=0, converter=int)
        source_tag: str = environ.var(default="ta")
        target_tag: str = environ.var(default="tb")
        deterministic: bool = environ.bool_var(default=True)

    @environ.config
    class AblationFlags:
        # a named preset wins over the two network flags
        preset: Ablation | None = environ.var(default="", converter=_ablation)
        use_frequency_branch: bool = environ.bool_var(default=True)
        use_quality_guidance: bool = environ.bool_var(default=True)
        enable_texture_loss: bool = environ.bool_var(default=True)
        enable_frequency_loss: bool = environ.bool_var(default=True)

        @property
        def flags(self) -> tuple[bool, bool]:
            """``(use_frequency_branch, use_quality_guidance)``."""
            if self.preset is not None:
                return self.preset.value
            return self.use_frequency_branch, self.use_quality_guidance

    @environ.config
    class Uncertainty:
        samples: int = environ.var(default=20, converter=int)
        keep: float = environ.var(default=0.8, converter=float)
        noise_sigma: float = environ.var(default=0.05, converter=float)

    @environ.config
    class Evaluation:
        data_range: float = environ.var(default=2.0, converter=float)
        masked: bool = environ.bool_var(default=True)
        std_ddof: int = environ.var(default=0, converter=int)

    seed: int = environ.var(default=0, converter=int)
    device: str = environ.var(default="cpu")
    log_level: int = environ.var(default="WARNING", converter=_get_log_level)
    data_dir: Path = environ.var(default="")

    generator: Generator = environ.group(Generator)
    discriminator: Discriminator = environ.group(Discriminator)
    loss: Loss = environ.group(Loss)
    patches: Patches = environ.group(Patches)
    training: Training = environ.group(Training)
    ablation: AblationFlags = environ.group(AblationFlags)
    uncertainty: Uncertainty = environ.group(Uncertainty)
    evaluation: Evaluation = environ.group(Evaluation)

    def __attrs_post_init__(self):
        if self.data_dir == "":
            self.data_dir = platformdirs.user_data_path(FOLDER_NAME)
        else:
            self.data_dir = Path(self.data_dir)

    def generator_config(self) -> GeneratorConfig:
        use_frequency_branch, _ = self.ablation.flags
        g = self.generator
        return _build(
            "generator",
            GeneratorConfig,
            in_channels=g.in_channels,
            enc_channels=g.enc_channels,
            enc_strides=g.enc_strides,
            sft_channels=g.sft_channels,
            n_res_blocks=g.n_res_blocks,
            use_frequency_branch=use_frequency_branch,
            dropout_keep=g.dropout_keep,
            wavelet=g.wavelet,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        d = self.discriminator
        return _build(
            "discriminator",
            DiscriminatorConfig,
            in_channels=self.generator.in_channels,
            channels=d.channels,
            kernel=d.kernel,
            n_levels=len(d.channels),
        )

    def loss_weights(self) -> LossWeights:
        _, use_quality_guidance = self.ablation.flags
        loss = self.loss
        return _build(
            "loss",
            LossWeights,
            adversarial=loss.adversarial,
            paired=loss.paired,
            cycle=loss.cycle,
            beta=loss.beta,
            scale_weights=loss.scale_weights,
            quality_guidance=use_quality_guidance,
            texture=self.ablation.enable_texture_loss,
            frequency=self.ablation.enable_frequency_loss,
        )

    def training_config(self) -> TrainingConfig:
        t = self.training
        return _build(
            "training",
            TrainingConfig,
            pretrain_epochs=t.pretrain_epochs,
            adversarial_epochs=t.adversarial_epochs,
            learning_rate=t.learning_rate,
            betas=t.betas,
            batch_size=t.batch_size,
            discriminator_steps=t.discriminator_steps,
            workers=t.workers,
            patch_size=self.patches.size,
            stride=self.patches.train_stride,
            min_foreground=self.patches.min_foreground,
            source_tag=t.source_tag,
            target_tag=t.target_tag,
            deterministic=t.deterministic,
            device=self.device,
        )

    def inference_options(self) -> dict[str, Any]:
        """Keyword arguments shared by the full-volume prediction functions."""
        return {
            "patch_size": self.patches.size,
            "stride": self.patches.inference_stride,
            "blend": self.patches.blend,
            "device": self.device,
        }

    def to_dict(self) -> dict[str, Any]:
        """Plain JSON-friendly values, in the layout of a config file."""

        def serialize(inst, field, value):
            if isinstance(value, Path):
                return str(value)
            if isinstance(value, Ablation):
                return value.label
            if field is not None and field.name == "log_level":
                return logging.getLevelName(value)
            if isinstance(value, tuple):
                return list(value)
            return value

        data = attrs.asdict(self, value_serializer=serialize)
        if data["ablation"]["preset"] is None:
            data["ablation"]["preset"] = ""
        return data


def _env_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def flatten(settings: Mapping[str, Any]) -> dict[str, str]:
    """Map config file sections onto ``METAMORPH_*`` variable names.

    Unknown sections and keys are rejected so typos don't go unnoticed.

    """
    known = AppConfig.from_environ({}).to_dict()
    flat = {}
    for key, value in settings.items():
        if key not in known:
            raise InvalidConfig(f"unknown configuration key {key!r}")
        if isinstance(known[key], dict):
            if not isinstance(value, Mapping):
                raise InvalidConfig(f"section {key!r} must be a table")
            for name, item in value.items():
                if name not in known[key]:
                    raise InvalidConfig(f"unknown configuration key {key}.{name}")
                flat[f"{PREFIX}_{key}_{name}".upper()] = _env_value(item)
        else:
            flat[f"{PREFIX}_{key}".upper()] = _env_value(value)
    return flat


def read_config_file(path: Path) -> dict[str, Any]:
    """Read a JSON or TOML config file, or the ``config`` of a run snapshot."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"Failed to read config file {path!s}: {exc}") from exc
    try:
        if path.suffix == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise InvalidConfig(f"{path!s} is not valid JSON or TOML: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidConfig(f"{path!s} must contain a table of settings")
    if data.get("format") == RUN_FORMAT:
        data = data["config"]
    return data


def load_config(
    path: Path | None = None, env: Mapping[str, str] | None = None
) -> AppConfig:
    """Layer defaults, an optional config file and the environment.

    Environment variables (including a ``.env`` file) override the file.
    Passing ``env`` skips the process environment altogether.

    """
    if env is None:
        # walks up the folder path looking for `.env` file
        load_dotenv()
        env = os.environ
    values = flatten(read_config_file(path)) if path is not None else {}
    values.update({k: v for k, v in env.items() if k.startswith(f"{PREFIX}_")})
    try:
        return AppConfig.from_environ(values)
    except (AttributeError, KeyError, TypeError, ValueError) as exc:
        raise InvalidConfig(f"invalid configuration: {exc}") from exc


def from_env() -> AppConfig:
    return load_config()


def write_snapshot(
    app_config: AppConfig, out_dir: Path, command: str, **arguments: Any
) -> Path:
    """Record the merged configuration of a run in its output directory."""
    path = Path(out_dir) / SNAPSHOT_FILE
    snapshot = {
        "format": RUN_FORMAT,
        "version": __version__,
        "created": pendulum.now("UTC").to_iso8601_string(),
        "command": command,
        "arguments": {
            k: str(v) if isinstance(v, Path) else v for k, v in arguments.items()
        },
        "config": app_config.to_dict(),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(snapshot, indent=2), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"Failed to write {path!s}: {exc}") from exc
    logger.debug("Wrote run snapshot", path=str(path))
    return path


def configure_logging(level: int):
    """Configure structlog with the specified level."""
    processors: list = [
        structlog.contextvars.merge_contextvars,
        structlog.processors.add_log_level,
        structlog.processors.StackInfoRenderer(),
        structlog.dev.set_exc_info,
    ]
    if "INVOCATION_ID" not in os.environ:
        # add timestamps when not running in systemd
        processors.append(structlog.processors.TimeStamper(fmt="iso", utc=False))
    processors.append(structlog.dev.ConsoleRenderer())

    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(level),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(sys.stderr),
        cache_logger_on_first_use=False,
    )
