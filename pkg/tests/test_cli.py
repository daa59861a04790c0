"""Smoke tests for the CLI commands."""

import json
from pathlib import Path

import pytest

from metamorph import __version__, cli
from metamorph.config import SNAPSHOT_FILE
from metamorph.dataset import Manifest
from metamorph.evaluation import MetricReport, SubjectMetrics
from metamorph.training import TrainState
from metamorph.types import Ablation


@pytest.fixture(autouse=True)
def isolated_environment(mocker, monkeypatch, tmp_path):
    mocker.patch("metamorph.config.load_dotenv")
    monkeypatch.setenv("METAMORPH_DATA_DIR", str(tmp_path / "data"))


@pytest.fixture
def checkpoint(tmp_path, tiny_generator_config, tiny_discriminator_config):
    state = TrainState.create(tiny_generator_config, tiny_discriminator_config)
    return state.save(tmp_path / "run" / "epoch-000.pt")


def _snapshot(out_dir):
    return json.loads((Path(out_dir) / SNAPSHOT_FILE).read_text())


def test_main_exits(mocker, tmp_path):
    mock = mocker.patch("metamorph.phantom.generate_cohort")
    exit_mock = mocker.patch("sys.exit")

    cli.main(["phantom", "--n", "1", "--out", str(tmp_path)])

    mock.assert_called_once()
    exit_mock.assert_called_once_with(cli.EXIT_OK)


def test_version(capsys):
    assert cli.run_cli(["--version"]) == cli.EXIT_OK
    assert __version__ in capsys.readouterr().out


def test_no_command(capsys):
    assert cli.run_cli([]) == cli.EXIT_USAGE
    assert "a command is required" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["phantom"],
        ["phantom", "--out", "x", "--n", "-1"],
        ["train", "--manifest", "m.csv", "--ablation", "everything"],
        ["predict", "--checkpoint=c", "--input=v", "--out=o", "--direction=sideways"],
        ["frobnicate"],
    ],
)
def test_usage_errors(argv, capsys):
    assert cli.run_cli(argv) == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "usage:" in err


def test_phantom(tmp_path):
    out_dir = tmp_path / "cohort"

    code = cli.run_cli(
        ["phantom", "--n", "2", "--size", "32", "--out", str(out_dir), "--workers", "1"]
    )

    assert code == cli.EXIT_OK
    assert Manifest.read(out_dir / "manifest.csv").subjects == ["sub-001", "sub-002"]
    assert _snapshot(out_dir)["command"] == "phantom"


def test_phantom_options(mocker, tmp_path):
    mock = mocker.patch("metamorph.phantom.generate_cohort", return_value=Manifest([]))

    cli.run_cli(
        [
            "phantom",
            "--n",
            "3",
            "--out",
            str(tmp_path),
            "--noise-sigma",
            "0",
            "--no-contrast-flip",
            "--seed",
            "4",
            "--suffix",
            ".mgv",
        ]
    )

    specs = mock.call_args.args[0]
    assert len(specs) == 3
    assert all(s.noise_sigma == 0.0 and not s.contrast_flip for s in specs)
    assert mock.call_args.kwargs["suffix"] == ".mgv"
    assert _snapshot(tmp_path)["config"]["seed"] == 4


def test_train(mocker, cohort, tmp_path):
    mock = mocker.patch("metamorph.training.train", return_value=tmp_path / "x.pt")
    out_dir = tmp_path / "run"

    code = cli.run_cli(
        [
            "train",
            "--manifest",
            str(cohort),
            "--out",
            str(out_dir),
            "--pretrain-epochs",
            "0",
            "--patch-size",
            "16",
            "--ablation",
            "backbone",
        ]
    )

    assert code == cli.EXIT_OK
    manifest, run_dir = mock.call_args.args
    options = mock.call_args.kwargs
    assert manifest.subjects == ["sub-001", "sub-002"]
    assert run_dir == out_dir
    assert options["training"].pretrain_epochs == 0
    assert options["training"].patch_size == 16
    assert options["generator"].use_frequency_branch is False
    assert options["weights"].quality_guidance is False
    snapshot = _snapshot(out_dir)
    assert snapshot["config"]["ablation"]["preset"] == Ablation.BACKBONE.label
    assert snapshot["arguments"]["held_out"] == []


def test_train_default_run_dir(mocker, cohort, tmp_path):
    mock = mocker.patch("metamorph.training.train", return_value=tmp_path / "x.pt")

    cli.run_cli(["train", "--manifest", str(cohort)])

    run_dir = mock.call_args.args[1]
    assert run_dir.parent == tmp_path / "data" / "runs"


def test_train_fold(mocker, cohort, tmp_path):
    mock = mocker.patch("metamorph.training.train", return_value=tmp_path / "x.pt")

    cli.run_cli(
        [
            "train",
            "--manifest",
            str(cohort),
            "--out",
            str(tmp_path / "run"),
            "--folds",
            "2",
            "--fold",
            "1",
        ]
    )

    training_subjects = mock.call_args.args[0].subjects
    held_out = _snapshot(tmp_path / "run")["arguments"]["held_out"]
    assert len(training_subjects) == 1
    assert len(held_out) == 1
    assert set(training_subjects + held_out) == {"sub-001", "sub-002"}


@pytest.mark.parametrize(
    "fold_args", [["--folds", "2"], ["--fold", "0"], ["--folds", "2", "--fold", "2"]]
)
def test_train_fold_usage(mocker, cohort, fold_args, capsys):
    mock = mocker.patch("metamorph.training.train")

    code = cli.run_cli(["train", "--manifest", str(cohort), *fold_args])

    assert code == cli.EXIT_USAGE
    assert "--fold" in capsys.readouterr().err
    mock.assert_not_called()


def test_train_missing_manifest(tmp_path):
    code = cli.run_cli(["train", "--manifest", str(tmp_path / "missing.csv")])

    assert code == cli.EXIT_FAILURE


def test_predict(cohort, checkpoint, tmp_path):
    out_dir = tmp_path / "prediction"

    code = cli.run_cli(
        [
            "predict",
            "--checkpoint",
            str(checkpoint),
            "--input",
            str(cohort.parent / "sub-001_ta.nii"),
            "--mask",
            str(cohort.parent / "masks" / "sub-001.nii"),
            "--out",
            str(out_dir),
            "--patch-size",
            "16",
            "--stride",
            "16",
            "--quality",
        ]
    )

    assert code == cli.EXIT_OK
    assert (out_dir / "prediction.nii").exists()
    assert (out_dir / "quality.nii").exists()
    assert _snapshot(out_dir)["arguments"]["direction"] == "forward"


def test_predict_missing_checkpoint(cohort, tmp_path):
    code = cli.run_cli(
        [
            "predict",
            "--checkpoint",
            str(tmp_path / "missing.pt"),
            "--input",
            str(cohort.parent / "sub-001_ta.nii"),
            "--out",
            str(tmp_path / "prediction"),
        ]
    )

    assert code == cli.EXIT_FAILURE


def test_uncertainty(cohort, checkpoint, tmp_path, capsys):
    out_dir = tmp_path / "uncertainty"

    code = cli.run_cli(
        [
            "uncertainty",
            "--checkpoint",
            str(checkpoint),
            "--input",
            str(cohort.parent / "sub-002_tb.nii"),
            "--mask",
            str(cohort.parent / "masks" / "sub-002.nii"),
            "--target",
            str(cohort.parent / "sub-002_ta.nii"),
            "--direction",
            "backward",
            "--out",
            str(out_dir),
            "--patch-size",
            "16",
            "--stride",
            "16",
            "--samples",
            "2",
        ]
    )

    assert code == cli.EXIT_OK
    assert (out_dir / "prediction.nii").exists()
    assert (out_dir / "prediction.epistemic.nii").exists()
    assert (out_dir / "prediction.aleatoric.nii").exists()
    out = capsys.readouterr().out
    assert "uncertainty over 2 passes" in out
    assert "aleatoric" in out
    assert "Spearman" in out


def test_evaluate(mocker, cohort, checkpoint, tmp_path, capsys):
    mock = mocker.patch(
        "metamorph.evaluation.evaluate_cohort",
        return_value=MetricReport([SubjectMetrics("sub-001", "forward", 31.5, 0.91)]),
    )
    out_dir = tmp_path / "evaluation"

    code = cli.run_cli(
        [
            "evaluate",
            "--manifest",
            str(cohort),
            "--checkpoint",
            str(checkpoint),
            "--out",
            str(out_dir),
            "--full-volume",
            "--std-ddof",
            "1",
            "--folds",
            "2",
            "--fold",
            "0",
        ]
    )

    assert code == cli.EXIT_OK
    manifest, path, run_dir = mock.call_args.args
    options = mock.call_args.kwargs
    assert len(manifest.subjects) == 1
    assert path == checkpoint
    assert run_dir == out_dir
    assert options["masked"] is False
    assert options["std_ddof"] == 1
    assert "31.50" in capsys.readouterr().out
    assert _snapshot(out_dir)["command"] == "evaluate"


def test_config_file(mocker, cohort, tmp_path):
    mock = mocker.patch("metamorph.training.train", return_value=tmp_path / "x.pt")
    settings = tmp_path / "settings.toml"
    settings.write_text("[training]\nadversarial_epochs = 3\n")

    argv = ["train", "--manifest", str(cohort), "--config", str(settings), "-vv"]
    cli.run_cli(argv)

    assert mock.call_args.kwargs["training"].adversarial_epochs == 3


def test_bad_config_file(cohort, tmp_path):
    settings = tmp_path / "settings.toml"
    settings.write_text("[trainning]\nadversarial_epochs = 3\n")

    code = cli.run_cli(["train", "--manifest", str(cohort), "--config", str(settings)])

    assert code == cli.EXIT_FAILURE


def test_phantom_counts(tmp_path):
    out_dir = tmp_path / "cohort"

    code = cli.run_cli(
        ["phantom", "--n", "4", "--size", "32", "--seed", "7", "--out", str(out_dir)]
    )

    assert code == cli.EXIT_OK
    assert len(list(out_dir.glob("sub-*.nii"))) == 8
    assert len(Manifest.read(out_dir / "manifest.csv")) == 8


@pytest.mark.parametrize(
    "settings",
    [
        "[loss]\npaired = -1.0\n",
        "[loss]\nscale_weights = [1.0, 1.0]\n",
        "[training]\nbatch_size = 0\n",
        "[generator]\nwavelet = 'no-such-wavelet'\n",
        "[generator]\nn_res_blocks = 0\n",
        "[discriminator]\nkernel = 3\n",
    ],
)
def test_invalid_settings_fail(mocker, cohort, tmp_path, settings):
    mock = mocker.patch("metamorph.training.train")
    config_file = tmp_path / "settings.toml"
    config_file.write_text(settings)

    argv = ["train", "--manifest", str(cohort), "--config", str(config_file)]
    code = cli.run_cli(argv)

    assert code == cli.EXIT_FAILURE
    mock.assert_not_called()


@pytest.mark.parametrize(
    "name, value",
    [("METAMORPH_PATCHES_INFERENCE_STRIDE", "0"), ("METAMORPH_PATCHES_BLEND", "max")],
)
def test_invalid_inference_settings_fail(
    monkeypatch, cohort, checkpoint, tmp_path, name, value
):
    monkeypatch.setenv(name, value)

    code = cli.run_cli(
        [
            "predict",
            "--checkpoint",
            str(checkpoint),
            "--input",
            str(cohort.parent / "sub-001_ta.nii"),
            "--out",
            str(tmp_path / "prediction"),
            "--patch-size",
            "16",
        ]
    )

    assert code == cli.EXIT_FAILURE


@pytest.mark.parametrize("keep", ["0", "1.5"])
def test_invalid_keep_rate_fails(cohort, checkpoint, tmp_path, keep):
    code = cli.run_cli(
        [
            "uncertainty",
            "--checkpoint",
            str(checkpoint),
            "--input",
            str(cohort.parent / "sub-001_ta.nii"),
            "--out",
            str(tmp_path / "uncertainty"),
            "--kind",
            "epistemic",
            "--patch-size",
            "16",
            "--stride",
            "16",
            "--samples",
            "2",
            "--keep",
            keep,
        ]
    )

    assert code == cli.EXIT_FAILURE
