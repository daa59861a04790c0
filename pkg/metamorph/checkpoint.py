"""Checkpoint archives and their JSON sidecars.

An archive (``.pt``) holds the state dicts of the four networks and both
optimizers. The sidecar (``<archive>.json``) records everything needed to
rebuild the networks without unpickling anything but tensors.

"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import attrs
import pendulum
import structlog
import torch
from torch import nn

from . import __version__
from .errors import CheckpointMismatch, IoFailure
from .losses import LossWeights
from .networks import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .types import Direction

logger = structlog.get_logger()

CHECKPOINT_FORMAT = "metamorph-checkpoint/1"

# network that translates in each direction, and the one that judges its output
GENERATOR_KEYS = {Direction.FORWARD: "g_a", Direction.BACKWARD: "g_b"}
CRITIC_KEYS = {Direction.FORWARD: "d_b", Direction.BACKWARD: "d_a"}


@attrs.frozen
class CheckpointMeta:
    epoch: int
    step: int
    seed: int
    generator: GeneratorConfig
    discriminator: DiscriminatorConfig
    loss: LossWeights
    manifest_digest: str = ""
    format: str = CHECKPOINT_FORMAT
    version: str = __version__
    created: str = attrs.field(factory=lambda: pendulum.now("UTC").to_iso8601_string())

    def to_json(self) -> str:
        return json.dumps(attrs.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> CheckpointMeta:
        data = json.loads(text)
        if data.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointMismatch(
                f"unsupported checkpoint format {data.get('format')!r}"
            )
        try:
            return cls(
                epoch=data["epoch"],
                step=data["step"],
                seed=data["seed"],
                generator=GeneratorConfig(**data["generator"]),
                discriminator=DiscriminatorConfig(**data["discriminator"]),
                loss=LossWeights(**data["loss"]),
                manifest_digest=data.get("manifest_digest", ""),
                version=data.get("version", ""),
                created=data.get("created", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointMismatch(f"invalid checkpoint metadata: {exc}") from exc


@attrs.frozen
class Checkpoint:
    meta: CheckpointMeta
    models: dict[str, dict[str, torch.Tensor]]
    optimizers: dict[str, dict[str, Any]]
    path: Path


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_checkpoint(
    path: Path,
    meta: CheckpointMeta,
    models: dict[str, nn.Module],
    optimizers: dict[str, torch.optim.Optimizer],
) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "models": {name: model.state_dict() for name, model in models.items()},
        "optimizers": {name: opt.state_dict() for name, opt in optimizers.items()},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
        sidecar_path(path).write_text(meta.to_json())
    except OSError as exc:
        raise IoFailure(f"Failed to write checkpoint {path!s}: {exc}") from exc
    logger.debug("Wrote checkpoint", path=str(path), epoch=meta.epoch, step=meta.step)
    return path


def read_checkpoint(path: Path, map_location: str | torch.device = "cpu") -> Checkpoint:
    path = Path(path)
    try:
        meta = CheckpointMeta.from_json(sidecar_path(path).read_text())
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except OSError as exc:
        raise IoFailure(f"Failed to read checkpoint {path!s}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path!s} is not a checkpoint archive")
    return Checkpoint(meta, payload["models"], payload.get("optimizers", {}), path)


def load_state(module: nn.Module, state: dict[str, torch.Tensor], name: str) -> None:
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointMismatch(f"weights of {name} don't fit: {exc}") from exc


def load_generator(
    checkpoint: Checkpoint | Path,
    direction: Direction = Direction.FORWARD,
    device: str | torch.device = "cpu",
) -> Generator:
    """Rebuild the generator that translates in ``direction``, in eval mode."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = read_checkpoint(checkpoint, map_location=device)
    key = GENERATOR_KEYS[direction]
    if key not in checkpoint.models:
        raise CheckpointMismatch(f"{checkpoint.path!s} has no {key} weights")
    generator = Generator(checkpoint.meta.generator)
    load_state(generator, checkpoint.models[key], key)
    return generator.to(device).eval()


def load_critic(
    checkpoint: Checkpoint | Path,
    direction: Direction = Direction.FORWARD,
    device: str | torch.device = "cpu",
) -> Discriminator:
    """Rebuild the discriminator judging predictions of ``direction``."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = read_checkpoint(checkpoint, map_location=device)
    key = CRITIC_KEYS[direction]
    if key not in checkpoint.models:
        raise CheckpointMismatch(f"{checkpoint.path!s} has no {key} weights")
    critic = Discriminator(checkpoint.meta.discriminator)
    load_state(critic, checkpoint.models[key], key)
    return critic.to(device).eval()
