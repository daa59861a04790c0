"""Paired pretraining followed by adversarial cycle training.

Both translation directions are trained together: ``g_a`` predicts time
point b from a and is judged by ``d_b``, ``g_b`` goes the other way and is
judged by ``d_a``.

"""

from __future__ import annotations

import itertools
import json
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

import attrs
import numpy as np
import structlog
import torch
from structlog.contextvars import bound_contextvars
from torch import nn
from torch.utils.data import DataLoader

from .checkpoint import CheckpointMeta, load_state, read_checkpoint, write_checkpoint
from .dataset import Manifest, PatchPairDataset, epoch_generator
from .errors import (
    CheckpointMismatch,
    EmptyCohort,
    InvalidConfig,
    IoFailure,
    NonFiniteLoss,
)
from .losses import (
    DirectionPass,
    LossReport,
    LossWeights,
    discriminator_objective,
    total_objective,
)
from .networks import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .types import Direction, Phase

logger = structlog.get_logger()

LOSS_LOG = "losses.jsonl"
CHECKPOINT_DIR = "checkpoints"

Batch = tuple[torch.Tensor, torch.Tensor]


def _float_pair(value) -> tuple[float, float]:
    return tuple(float(v) for v in value)  # type: ignore[return-value]


@attrs.frozen
class TrainingConfig:
    pretrain_epochs: int = 5
    adversarial_epochs: int = 50
    learning_rate: float = 1e-4
    betas: tuple[float, float] = attrs.field(
        default=(0.9, 0.999), converter=_float_pair
    )
    batch_size: int = 1
    discriminator_steps: int = 1
    workers: int = 0
    patch_size: int = 64
    stride: int = 10
    min_foreground: float = 0.1
    source_tag: str = "ta"
    target_tag: str = "tb"
    deterministic: bool = True
    device: str = "cpu"

    def __attrs_post_init__(self):
        if self.pretrain_epochs < 0 or self.adversarial_epochs < 0:
            raise InvalidConfig("epoch counts must not be negative")
        if self.batch_size < 1 or self.discriminator_steps < 1:
            raise InvalidConfig("batch_size and discriminator_steps must be at least 1")

    @property
    def total_epochs(self) -> int:
        return self.pretrain_epochs + self.adversarial_epochs

    def phase(self, epoch: int) -> Phase:
        return Phase.PRETRAIN if epoch < self.pretrain_epochs else Phase.ADVERSARIAL


@attrs.define(eq=False)
class TrainState:
    g_a: Generator
    g_b: Generator
    d_a: Discriminator
    d_b: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    weights: LossWeights = attrs.field(factory=LossWeights)
    epoch: int = 0
    step: int = 0
    seed: int = 0
    manifest_digest: str = ""

    @classmethod
    def create(
        cls,
        generator: GeneratorConfig | None = None,
        discriminator: DiscriminatorConfig | None = None,
        weights: LossWeights | None = None,
        training: TrainingConfig | None = None,
        *,
        seed: int = 0,
        manifest_digest: str = "",
    ) -> TrainState:
        """Build freshly initialized networks and their optimizers."""
        training = training or TrainingConfig()
        seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(4)]
        g_a = Generator(generator, seed=seeds[0]).to(training.device)
        g_b = Generator(generator, seed=seeds[1]).to(training.device)
        d_a = Discriminator(discriminator, seed=seeds[2]).to(training.device)
        d_b = Discriminator(discriminator, seed=seeds[3]).to(training.device)
        opt_g = torch.optim.Adam(
            itertools.chain(g_a.parameters(), g_b.parameters()),
            lr=training.learning_rate,
            betas=training.betas,
        )
        opt_d = torch.optim.Adam(
            itertools.chain(d_a.parameters(), d_b.parameters()),
            lr=training.learning_rate,
            betas=training.betas,
        )
        return cls(
            g_a,
            g_b,
            d_a,
            d_b,
            opt_g,
            opt_d,
            weights=weights or LossWeights(),
            seed=seed,
            manifest_digest=manifest_digest,
        )

    @property
    def models(self) -> dict[str, nn.Module]:
        return {"g_a": self.g_a, "g_b": self.g_b, "d_a": self.d_a, "d_b": self.d_b}

    @property
    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"generators": self.opt_g, "discriminators": self.opt_d}

    def meta(self) -> CheckpointMeta:
        return CheckpointMeta(
            epoch=self.epoch,
            step=self.step,
            seed=self.seed,
            generator=self.g_a.config,
            discriminator=self.d_a.config,
            loss=self.weights,
            manifest_digest=self.manifest_digest,
        )

    def save(self, path: Path) -> Path:
        return write_checkpoint(path, self.meta(), self.models, self.optimizers)

    @classmethod
    def load(cls, path: Path, training: TrainingConfig | None = None) -> TrainState:
        """Restore networks, optimizer moments and counters from a checkpoint."""
        training = training or TrainingConfig()
        checkpoint = read_checkpoint(path, map_location=training.device)
        meta = checkpoint.meta
        state = cls.create(
            meta.generator,
            meta.discriminator,
            meta.loss,
            training,
            seed=meta.seed,
            manifest_digest=meta.manifest_digest,
        )
        for name, model in state.models.items():
            if name not in checkpoint.models:
                raise CheckpointMismatch(f"{path!s} has no {name} weights")
            load_state(model, checkpoint.models[name], name)
        for name, optimizer in state.optimizers.items():
            if name not in checkpoint.optimizers:
                raise CheckpointMismatch(f"{path!s} has no {name} optimizer state")
            try:
                optimizer.load_state_dict(checkpoint.optimizers[name])
            except (ValueError, KeyError) as exc:
                raise CheckpointMismatch(
                    f"optimizer {name} doesn't fit: {exc}"
                ) from exc
        state.epoch = meta.epoch
        state.step = meta.step
        return state


@contextmanager
def frozen(*modules: nn.Module) -> Iterator[None]:
    """Temporarily exclude the parameters of ``modules`` from autograd."""
    parameters = [p for module in modules for p in module.parameters()]
    flags = [p.requires_grad for p in parameters]
    for parameter in parameters:
        parameter.requires_grad_(False)
    try:
        yield
    finally:
        for parameter, flag in zip(parameters, flags):
            parameter.requires_grad_(flag)


def _check_finite(report: LossReport, phase: Phase) -> None:
    if not report.is_finite() or (
        report.loss is not None and not torch.isfinite(report.loss).all()
    ):
        bad = [t.name for t in report.terms if not np.isfinite(t.value)]
        raise NonFiniteLoss(
            f"non-finite {phase} loss in {', '.join(bad) or 'total'}", report
        )


def _generator_report(
    state: TrainState, x_a: torch.Tensor, x_b: torch.Tensor, *, adversarial: bool
) -> LossReport:
    forward = state.g_a(x_a)
    backward = state.g_b(x_b)
    rec_a = state.g_b(forward.s1).s1
    rec_b = state.g_a(backward.s1).s1
    critic_b = state.d_b(forward.s1) if adversarial else None
    critic_a = state.d_a(backward.s1) if adversarial else None
    passes = [
        DirectionPass(
            str(Direction.FORWARD),
            forward,
            x_b,
            quality=critic_b.detach() if critic_b is not None else None,
            critic=critic_b,
            source=x_a,
            reconstruction=rec_a,
        ),
        DirectionPass(
            str(Direction.BACKWARD),
            backward,
            x_a,
            quality=critic_a.detach() if critic_a is not None else None,
            critic=critic_a,
            source=x_b,
            reconstruction=rec_b,
        ),
    ]
    return total_objective(passes, state.weights)


def pretrain_step(state: TrainState, batch: Batch) -> tuple[TrainState, LossReport]:
    """Update both generators on the paired and cycle terms only.

    There are no quality maps yet, so the quality term is plain L1.

    """
    x_a, x_b = batch
    state.g_a.train()
    state.g_b.train()
    report = _generator_report(state, x_a, x_b, adversarial=False)
    _check_finite(report, Phase.PRETRAIN)
    state.opt_g.zero_grad(set_to_none=True)
    report.loss.backward()
    state.opt_g.step()
    state.step += 1
    return state, report


def adversarial_step(
    state: TrainState,
    batch: Batch,
    *,
    discriminator_steps: int = 1,
    update_generators: bool = True,
    update_discriminators: bool = True,
) -> tuple[TrainState, LossReport]:
    """Update the discriminators on detached fakes, then the generators."""
    x_a, x_b = batch
    with torch.no_grad():
        fake_b = state.g_a(x_a).s1
        fake_a = state.g_b(x_b).s1

    d_report = LossReport()
    with frozen(state.g_a, state.g_b):
        for _ in range(discriminator_steps):
            d_report = discriminator_objective(
                real={
                    str(Direction.FORWARD): state.d_b(x_b),
                    str(Direction.BACKWARD): state.d_a(x_a),
                },
                fake={
                    str(Direction.FORWARD): state.d_b(fake_b),
                    str(Direction.BACKWARD): state.d_a(fake_a),
                },
                weights=state.weights,
            )
            _check_finite(d_report, Phase.ADVERSARIAL)
            if not update_discriminators:
                break
            state.opt_d.zero_grad(set_to_none=True)
            d_report.loss.backward()
            state.opt_d.step()

    with frozen(state.d_a, state.d_b):
        g_report = _generator_report(state, x_a, x_b, adversarial=True)
        _check_finite(g_report, Phase.ADVERSARIAL)
        if update_generators:
            state.opt_g.zero_grad(set_to_none=True)
            g_report.loss.backward()
            state.opt_g.step()

    state.step += 1
    return state, LossReport(d_report.terms + g_report.terms, loss=g_report.loss)


def dump_diagnostics(
    out_dir: Path, state: TrainState, batch: Batch, report: LossReport | None
) -> Path:
    """Save the offending batch and loss values next to the checkpoints."""
    path = Path(out_dir) / "diagnostics" / f"step-{state.step:06d}.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "epoch": state.epoch,
            "step": state.step,
            "x_a": batch[0].detach().cpu(),
            "x_b": batch[1].detach().cpu(),
            "terms": report.records() if report is not None else [],
        },
        path,
    )
    logger.error("Wrote diagnostic dump", path=str(path))
    return path


def checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return Path(out_dir) / CHECKPOINT_DIR / f"epoch-{epoch:03d}.pt"


@contextmanager
def deterministic_algorithms(enabled: bool) -> Iterator[None]:
    """Use deterministic kernels inside the block if ``enabled``.

    The process wide setting in effect before is restored on exit.

    """
    previous = torch.are_deterministic_algorithms_enabled()
    warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    if enabled:
        torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous, warn_only=warn_only)


def trim_loss_log(path: Path, epoch: int) -> int:
    """Drop the loss records written after ``epoch``, return how many went.

    Those come from an interrupted run that is being resumed from the
    checkpoint of ``epoch``.

    """
    path = Path(path)
    if not path.exists():
        return 0
    lines = path.read_text().splitlines(keepends=True)
    kept = [
        line for line in lines if line.strip() and json.loads(line)["epoch"] <= epoch
    ]
    dropped = len(lines) - len(kept)
    if dropped:
        path.write_text("".join(kept))
        logger.info("Trimmed loss log", path=str(path), dropped=dropped, epoch=epoch)
    return dropped


def train(
    manifest: Manifest,
    out_dir: Path,
    *,
    generator: GeneratorConfig | None = None,
    discriminator: DiscriminatorConfig | None = None,
    weights: LossWeights | None = None,
    training: TrainingConfig | None = None,
    seed: int = 0,
    resume: Path | None = None,
) -> Path:
    """Run the pretraining and adversarial epochs, return the last checkpoint.

    A checkpoint is written after every epoch and every loss term of every
    step is appended to ``losses.jsonl``.
    Resuming continues with the epoch after the checkpoint's.

    """
    training = training or TrainingConfig()
    out_dir = Path(out_dir)
    pairs = manifest.pairs(training.source_tag, training.target_tag)
    if not pairs:
        raise EmptyCohort(
            f"manifest has no {training.source_tag}/{training.target_tag} pairs"
        )
    with deterministic_algorithms(training.deterministic):
        return _run(
            manifest,
            pairs,
            out_dir,
            generator=generator,
            discriminator=discriminator,
            weights=weights,
            training=training,
            seed=seed,
            resume=resume,
        )


def _run(
    manifest: Manifest,
    pairs: list,
    out_dir: Path,
    *,
    generator: GeneratorConfig | None,
    discriminator: DiscriminatorConfig | None,
    weights: LossWeights | None,
    training: TrainingConfig,
    seed: int,
    resume: Path | None,
) -> Path:
    torch.manual_seed(seed)

    dataset = PatchPairDataset.from_pairs(
        pairs,
        patch_size=training.patch_size,
        stride=training.stride,
        min_foreground=training.min_foreground,
    )
    digest = manifest.digest()
    if resume is not None:
        state = TrainState.load(resume, training)
        if state.manifest_digest != digest:
            logger.warning("Resuming with a different manifest", checkpoint=str(resume))
        last = Path(resume)
    else:
        state = TrainState.create(
            generator,
            discriminator,
            weights,
            training,
            seed=seed,
            manifest_digest=digest,
        )
        last = None

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if resume is not None:
            trim_loss_log(out_dir / LOSS_LOG, state.epoch)
        loss_log = open(out_dir / LOSS_LOG, "a" if resume else "w")
    except OSError as exc:
        raise IoFailure(f"Failed to create run directory {out_dir!s}: {exc}") from exc

    with loss_log:
        for epoch in range(state.epoch, training.total_epochs):
            phase = training.phase(epoch)
            loader = DataLoader(
                dataset,
                batch_size=training.batch_size,
                shuffle=True,
                generator=epoch_generator(state.seed, epoch),
                num_workers=training.workers,
            )
            totals = []
            with bound_contextvars(epoch=epoch + 1, phase=str(phase)):
                for batch in loader:
                    batch = tuple(t.to(training.device) for t in batch)
                    try:
                        if phase is Phase.PRETRAIN:
                            state, report = pretrain_step(state, batch)
                        else:
                            state, report = adversarial_step(
                                state,
                                batch,
                                discriminator_steps=training.discriminator_steps,
                            )
                    except NonFiniteLoss as exc:
                        dump_diagnostics(out_dir, state, batch, exc.report)
                        raise
                    for record in report.records(
                        step=state.step, epoch=epoch + 1, phase=str(phase)
                    ):
                        loss_log.write(json.dumps(record) + "\n")
                    totals.append(report.total)
                loss_log.flush()

                state.epoch = epoch + 1
                last = state.save(checkpoint_path(out_dir, state.epoch))
                logger.info(
                    "Epoch complete",
                    steps=len(totals),
                    mean_loss=float(np.mean(totals)) if totals else None,
                    checkpoint=str(last),
                )

    if last is None:
        # nothing to train, still leave a checkpoint behind
        last = state.save(checkpoint_path(out_dir, state.epoch))
    return last
