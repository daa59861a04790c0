"""Main command-line entry point for `metamorph`."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import NoReturn

import pendulum
import structlog

from metamorph import (
    __version__,
    evaluation,
    inference,
    phantom,
    report,
    training,
    uncertainty,
)
from metamorph.checkpoint import load_critic, load_generator, read_checkpoint
from metamorph.config import AppConfig, configure_logging, load_config, write_snapshot
from metamorph.dataset import Manifest
from metamorph.errors import MetamorphError, UsageError
from metamorph.types import Ablation, Direction, UncertaintyKind
from metamorph.volume import Volume, normalize_intensity, read_volume, write_volume

logger = structlog.get_logger()

VERBOSE_TO_LOGGING = {0: "WARNING", 1: "INFO", 2: "DEBUG"}

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class ArgumentParser(argparse.ArgumentParser):
    """Raise `UsageError` with the (sub)command help instead of exiting."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(message, self.format_help())


def main(argv: list | None = None):
    """Main CLI entry point for 'metamorph'."""
    sys.exit(run_cli(argv))


def run_cli(argv: list | None = None) -> int:
    """Run one subcommand and return the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required", parser.format_help())
        app_config = load_config(args.config)
        apply_arguments(app_config, args)
        if args.verbose:
            app_config.log_level = getattr(
                logging, VERBOSE_TO_LOGGING[min(args.verbose, 2)]
            )
        configure_logging(app_config.log_level)
        return args.handler(app_config, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.help_text:
            print(exc.help_text, file=sys.stderr)
        return EXIT_USAGE
    except (MetamorphError, OSError) as exc:
        logger.exception("Command failed", error=str(exc))
        return EXIT_FAILURE
    except SystemExit as exc:
        # --help and --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK


def apply_arguments(app_config: AppConfig, args: argparse.Namespace) -> None:
    """Apply command line flags on top of the file and environment settings."""
    if args.seed is not None:
        app_config.seed = args.seed
    if args.device is not None:
        app_config.device = args.device
    for flag, group, name in (
        ("patch_size", app_config.patches, "size"),
        ("stride", app_config.patches, "inference_stride"),
        ("train_stride", app_config.patches, "train_stride"),
        ("blend", app_config.patches, "blend"),
        ("pretrain_epochs", app_config.training, "pretrain_epochs"),
        ("adversarial_epochs", app_config.training, "adversarial_epochs"),
        ("samples", app_config.uncertainty, "samples"),
        ("keep", app_config.uncertainty, "keep"),
        ("noise_sigma_tta", app_config.uncertainty, "noise_sigma"),
        ("std_ddof", app_config.evaluation, "std_ddof"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(group, name, value)
    if getattr(args, "ablation", None) is not None:
        app_config.ablation.preset = args.ablation
    if getattr(args, "full_volume", False):
        app_config.evaluation.masked = False


def _non_negative(value: str) -> int:
    number = int(value)
    if number < 0:
        raise argparse.ArgumentTypeError(f"must not be negative: {value}")
    return number


def _positive(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1: {value}")
    return number


def _ablation(value: str) -> Ablation:
    try:
        return Ablation.from_label(value)
    except KeyError:
        choices = ", ".join(a.label for a in Ablation)
        raise argparse.ArgumentTypeError(
            f"unknown ablation {value!r} ({choices})"
        ) from None


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="increase logging output by specifying",
    )
    common.add_argument("--config", type=Path, help="JSON or TOML config file")
    common.add_argument("--seed", type=int, help="seed for every random number stream")
    common.add_argument("--device", help="torch device (defaults to 'cpu')")

    parser = ArgumentParser(
        description="translate volumes between longitudinal time points",
    )
    parser.add_argument(
        "--version", action="version", version=f"metamorph version {__version__}"
    )
    sub_parsers = parser.add_subparsers(title="commands", dest="command")

    # Synthetic cohort
    phantom_parser = sub_parsers.add_parser(
        "phantom",
        parents=[common],
        help="generate a synthetic longitudinal cohort",
        description="Writes paired phantom volumes, their masks and a manifest.",
    )
    phantom_parser.add_argument(
        "--n",
        type=_non_negative,
        default=10,
        help="number of subjects (defaults to 10)",
    )
    phantom_parser.add_argument(
        "--size", type=int, default=64, help="edge length in voxels (defaults to 64)"
    )
    phantom_parser.add_argument(
        "--out", type=Path, required=True, help="directory for the cohort"
    )
    phantom_parser.add_argument("--noise-sigma", type=float, help="noise level")
    phantom_parser.add_argument(
        "--deform-amplitude", type=float, help="boundary displacement in voxels"
    )
    phantom_parser.add_argument(
        "--no-contrast-flip",
        action="store_true",
        help="keep the tissue contrast ordering between time points",
    )
    phantom_parser.add_argument(
        "--suffix",
        default=".nii",
        choices=(".nii", ".nii.gz", ".mgv"),
        help="volume file format (defaults to .nii)",
    )
    phantom_parser.add_argument(
        "--workers", type=_positive, help="number of worker processes"
    )
    phantom_parser.add_argument(
        "--time-points",
        type=_positive,
        default=2,
        help="volumes per subject from the earliest to the latest age (defaults "
        "to 2, tagged ta and tb; longer series are tagged t0, t1, ...)",
    )
    phantom_parser.set_defaults(handler=run_phantom, parser=phantom_parser)

    # Training
    train_parser = sub_parsers.add_parser(
        "train",
        parents=[common],
        help="train both translation directions",
        description="Pretrains the generators, then trains them adversarially. "
        "Writes a checkpoint per epoch and the loss log to the run directory.",
    )
    train_parser.add_argument(
        "--manifest", type=Path, required=True, help="cohort manifest (CSV)"
    )
    train_parser.add_argument(
        "--out", type=Path, help="run directory (defaults to a new one under data_dir)"
    )
    train_parser.add_argument("--resume", type=Path, help="checkpoint to continue from")
    train_parser.add_argument("--pretrain-epochs", type=_non_negative)
    train_parser.add_argument("--adversarial-epochs", type=_non_negative)
    train_parser.add_argument("--patch-size", type=_positive)
    train_parser.add_argument(
        "--train-stride", type=_positive, help="stride of the training patches"
    )
    train_parser.add_argument(
        "--ablation",
        type=_ablation,
        help="named configuration: backbone, sft-ncg, st-cg or mgan",
    )
    _add_fold_arguments(train_parser, "train on every fold except this one")
    train_parser.set_defaults(handler=run_train, parser=train_parser)

    # Prediction
    predict_parser = sub_parsers.add_parser(
        "predict",
        parents=[common],
        help="translate one volume",
        description="Predicts the other time point of a volume, patch by patch.",
    )
    _add_volume_arguments(predict_parser)
    predict_parser.add_argument(
        "--quality", action="store_true", help="also write the quality map"
    )
    predict_parser.set_defaults(handler=run_predict, parser=predict_parser)

    # Uncertainty
    uncertainty_parser = sub_parsers.add_parser(
        "uncertainty",
        parents=[common],
        help="estimate voxelwise uncertainty of a prediction",
        description="Estimates epistemic (dropout) and/or aleatoric (test-time "
        "augmentation) uncertainty maps.",
    )
    _add_volume_arguments(uncertainty_parser)
    uncertainty_parser.add_argument(
        "--kind",
        choices=("epistemic", "aleatoric", "both"),
        default="both",
        help="which map(s) to compute (defaults to both)",
    )
    uncertainty_parser.add_argument(
        "--samples", type=_positive, help="number of passes"
    )
    uncertainty_parser.add_argument("--keep", type=float, help="dropout keep rate")
    uncertainty_parser.add_argument(
        "--noise-sigma", dest="noise_sigma_tta", type=float, help="TTA noise level"
    )
    uncertainty_parser.add_argument(
        "--target", type=Path, help="ground truth to correlate the uncertainty with"
    )
    uncertainty_parser.set_defaults(handler=run_uncertainty, parser=uncertainty_parser)

    # Evaluation
    evaluate_parser = sub_parsers.add_parser(
        "evaluate",
        parents=[common],
        help="score a checkpoint on a cohort",
        description="Predicts both directions for every subject and writes PSNR/SSIM "
        "per subject, a summary and slice montages.",
    )
    evaluate_parser.add_argument(
        "--manifest", type=Path, required=True, help="cohort manifest (CSV)"
    )
    evaluate_parser.add_argument(
        "--checkpoint", type=Path, required=True, help="trained checkpoint"
    )
    evaluate_parser.add_argument(
        "--out", type=Path, required=True, help="directory for the results"
    )
    evaluate_parser.add_argument("--patch-size", type=_positive)
    evaluate_parser.add_argument("--stride", type=_positive, help="inference stride")
    evaluate_parser.add_argument("--blend", choices=("mean", "gaussian"))
    evaluate_parser.add_argument(
        "--uncertainty-samples",
        type=_non_negative,
        default=0,
        help="add epistemic maps from this many dropout passes to the montages",
    )
    evaluate_parser.add_argument(
        "--full-volume",
        action="store_true",
        help="score the whole volume, not the mask",
    )
    evaluate_parser.add_argument(
        "--std-ddof", type=_non_negative, help="delta degrees of freedom of the std"
    )
    _add_fold_arguments(evaluate_parser, "evaluate only this held-out fold")
    evaluate_parser.set_defaults(handler=run_evaluate, parser=evaluate_parser)

    return parser


def _add_fold_arguments(parser: argparse.ArgumentParser, fold_help: str) -> None:
    parser.add_argument(
        "--folds", type=_positive, help="number of cross-validation folds"
    )
    parser.add_argument("--fold", type=_non_negative, help=fold_help)


def _add_volume_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--checkpoint", type=Path, required=True, help="trained checkpoint"
    )
    parser.add_argument("--input", type=Path, required=True, help="volume to translate")
    parser.add_argument("--mask", type=Path, help="foreground mask of the input")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument(
        "--direction",
        type=Direction,
        choices=list(Direction),
        default=Direction.FORWARD,
        help="forward predicts the later time point (default), backward the earlier",
    )
    parser.add_argument("--patch-size", type=_positive)
    parser.add_argument("--stride", type=_positive, help="inference stride")
    parser.add_argument("--blend", choices=("mean", "gaussian"))


def _folds(manifest: Manifest, args: argparse.Namespace, seed: int):
    """Split the manifest when folds are requested, ``(training, held_out)``."""
    if args.folds is None and args.fold is None:
        return manifest, None
    if args.folds is None or args.fold is None:
        raise UsageError(
            "--folds and --fold must be given together", args.parser.format_help()
        )
    if args.fold >= args.folds:
        raise UsageError(
            f"--fold must be less than --folds ({args.folds})",
            args.parser.format_help(),
        )
    try:
        return manifest.split_folds(args.folds, args.fold, seed)
    except ValueError as exc:
        raise UsageError(str(exc), args.parser.format_help()) from exc


def _load_input(path: Path, mask: Path | None) -> Volume:
    volume = read_volume(path)
    if mask is not None:
        volume = volume.with_mask(read_volume(mask))
    return normalize_intensity(volume)


def default_run_dir(app_config: AppConfig) -> Path:
    return app_config.data_dir / "runs" / pendulum.now().format("YYYYMMDD-HHmmss")


def run_phantom(app_config: AppConfig, args: argparse.Namespace) -> int:
    overrides: dict = {}
    if args.noise_sigma is not None:
        overrides["noise_sigma"] = args.noise_sigma
    if args.deform_amplitude is not None:
        overrides["deform_amplitude"] = args.deform_amplitude
    if args.no_contrast_flip:
        overrides["contrast_flip"] = False

    specs = phantom.default_specs(
        args.n, size=args.size, seed=app_config.seed, **overrides
    )
    manifest = phantom.generate_cohort(
        specs,
        args.out,
        suffix=args.suffix,
        workers=args.workers,
        time_points=args.time_points,
    )
    write_snapshot(
        app_config,
        args.out,
        "phantom",
        n=args.n,
        size=args.size,
        time_points=args.time_points,
        **overrides,
    )
    print(f"Wrote {len(manifest.subjects):,d} subjects to {args.out!s}")
    return EXIT_OK


def run_train(app_config: AppConfig, args: argparse.Namespace) -> int:
    manifest = Manifest.read(args.manifest)
    manifest, held_out = _folds(manifest, args, app_config.seed)
    out_dir = args.out or default_run_dir(app_config)

    write_snapshot(
        app_config,
        out_dir,
        "train",
        manifest=args.manifest,
        resume=args.resume,
        folds=args.folds,
        fold=args.fold,
        held_out=held_out.subjects if held_out is not None else [],
    )
    checkpoint = training.train(
        manifest,
        out_dir,
        generator=app_config.generator_config(),
        discriminator=app_config.discriminator_config(),
        weights=app_config.loss_weights(),
        training=app_config.training_config(),
        seed=app_config.seed,
        resume=args.resume,
    )
    print(f"Final checkpoint: {checkpoint!s}")
    return EXIT_OK


def run_predict(app_config: AppConfig, args: argparse.Namespace) -> int:
    volume = _load_input(args.input, args.mask)
    options = app_config.inference_options()
    checkpoint = read_checkpoint(args.checkpoint, map_location=app_config.device)
    generator = load_generator(checkpoint, args.direction, app_config.device)

    prediction = inference.predict_volume(generator, volume, **options)
    write_snapshot(
        app_config,
        args.out,
        "predict",
        checkpoint=args.checkpoint,
        input=args.input,
        direction=str(args.direction),
    )
    write_volume(prediction, args.out / "prediction.nii")
    if args.quality:
        critic = load_critic(checkpoint, args.direction, app_config.device)
        write_volume(
            inference.quality_volume(critic, prediction, **options),
            args.out / "quality.nii",
        )
    print(f"Wrote prediction to {args.out!s}")
    return EXIT_OK


def run_uncertainty(app_config: AppConfig, args: argparse.Namespace) -> int:
    volume = _load_input(args.input, args.mask)
    options = app_config.inference_options()
    generator = load_generator(args.checkpoint, args.direction, app_config.device)
    settings = app_config.uncertainty
    kinds = (
        list(UncertaintyKind) if args.kind == "both" else [UncertaintyKind(args.kind)]
    )
    target = _load_input(args.target, args.mask) if args.target is not None else None

    write_snapshot(
        app_config,
        args.out,
        "uncertainty",
        checkpoint=args.checkpoint,
        input=args.input,
        direction=str(args.direction),
        kind=args.kind,
    )
    write_volume(
        inference.predict_volume(generator, volume, **options),
        args.out / "prediction.nii",
    )
    for kind in kinds:
        if kind is UncertaintyKind.EPISTEMIC:
            result = uncertainty.epistemic_map(
                generator,
                volume,
                settings.samples,
                settings.keep,
                app_config.seed,
                **options,
            )
        else:
            result = uncertainty.aleatoric_map(
                generator,
                volume,
                settings.samples,
                app_config.seed,
                noise_sigma=settings.noise_sigma,
                **options,
            )
        result.write(args.out / "prediction")
        correlation = None
        if target is not None:
            error = evaluation.error_map(result.mean_prediction, target)
            correlation = uncertainty.error_correlation(
                result.sigma, error, volume.mask
            )
        report.print_uncertainty(result, correlation)
    return EXIT_OK


def run_evaluate(app_config: AppConfig, args: argparse.Namespace) -> int:
    manifest = Manifest.read(args.manifest)
    _, held_out = _folds(manifest, args, app_config.seed)
    if held_out is not None:
        manifest = held_out

    write_snapshot(
        app_config,
        args.out,
        "evaluate",
        manifest=args.manifest,
        checkpoint=args.checkpoint,
        folds=args.folds,
        fold=args.fold,
    )
    result = evaluation.evaluate_cohort(
        manifest,
        args.checkpoint,
        args.out,
        source_tag=app_config.training.source_tag,
        target_tag=app_config.training.target_tag,
        patch_size=app_config.patches.size,
        stride=app_config.patches.inference_stride,
        blend=app_config.patches.blend,
        data_range=app_config.evaluation.data_range,
        masked=app_config.evaluation.masked,
        std_ddof=app_config.evaluation.std_ddof,
        uncertainty_samples=args.uncertainty_samples,
        keep=app_config.uncertainty.keep,
        seed=app_config.seed,
        device=app_config.device,
    )
    report.print_metrics(result)
    return EXIT_OK
