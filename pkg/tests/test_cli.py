import numpy as np
import pytest

from scripts.checkpoints import load_checkpoint, save_checkpoint
from scripts.cli import build_parser, load_train_config, main
from scripts.reports import read_report
from scripts.volume_io import list_cases, read_case, read_nifti, write_labels


def _write_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(
        "\n".join(
            [
                "train.lr=0.001",
                "train.stage1_max_epochs=1",
                "train.stage2_epochs=1",
                "train.batch_size=8",
                "model.depth=1",
                "model.base_channels=2",
                "model.dilation_rates=1,2",
                "preprocess.crop=32x32",
                "preprocess.clahe_tiles=4x4",
            ]
        )
        + "\n",
        encoding="utf-8",
    )
    return path


def test_load_train_config_sections(tmp_path):
    cfg = load_train_config(_write_config(tmp_path))
    assert cfg.lr == 0.001 and cfg.model.depth == 1
    assert cfg.preprocess.crop == (32, 32)
    bad = tmp_path / "bad.cfg"
    bad.write_text("optimizer.lr=1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="must start with"):
        load_train_config(bad)
    assert load_train_config(None).folds == 5


def test_phantom_command(tmp_path, capsys):
    code = main(["phantom", "--cases", "2", "--out", str(tmp_path / "d"), "--dims", "16x64x64", "--seed", "4"])
    assert code == 0
    assert list_cases(tmp_path / "d") == ["case_000", "case_001"]
    assert "case_001" in capsys.readouterr().out


def test_bad_arguments_exit_with_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["phantom", "--cases", "0", "--out", str(tmp_path)])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["phantom", "--cases", "1", "--out", str(tmp_path), "--dims", "16x64"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(tmp_path), "--out", str(tmp_path), "--stage", "2"])
    assert exc.value.code == 2


def test_runtime_errors_return_one(tmp_path, capsys):
    code = main(["evaluate", "--gt", str(tmp_path / "nope.nii"), "--pred", str(tmp_path / "nope.nii")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")


def test_evaluate_command_writes_report(tmp_path, small_phantom, capsys):
    case = tmp_path / "case"
    case.mkdir()
    write_labels(small_phantom.labels, small_phantom.spacing, case / "labels.nii")
    pred = small_phantom.labels.copy()
    pred[pred == 3] = 0
    write_labels(pred, small_phantom.spacing, tmp_path / "pred.nii")
    code = main(["evaluate", "--gt", str(case), "--pred", str(tmp_path / "pred.nii"), "--report", str(tmp_path / "r.txt")])
    assert code == 0
    report = read_report(tmp_path / "r.txt")
    assert report.per_class["heart"].dsc == 1.0
    assert report.per_class["trachea"].dsc == 0.0
    assert not report.per_class["trachea"].hd_defined
    assert "HD undefined (empty mask): trachea" in capsys.readouterr().out


def test_describe_command(capsys):
    assert main(["describe", "--depth", "2", "--base-channels", "4", "--residual", "concat"]) == 0
    out = capsys.readouterr().out
    assert "depth=2" in out and "residual=concat" in out
    assert "total parameters:" in out


def test_train_then_predict(tmp_path, tmp_dataset, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "runs"
    assert main(["-q", "train", "--data", str(tmp_dataset), "--out", str(out), "--fold", "0", "--config", str(cfg)]) == 0
    assert main(["-q", "train", "--data", str(tmp_dataset), "--out", str(out), "--fold", "0",
                 "--stage", "2", "--resume", str(out), "--config", str(cfg), "--loss", "dice"]) == 0
    assert "Cross-validation Summary" in capsys.readouterr().out

    pred_path = tmp_path / "pred.nii"
    case = tmp_dataset / "case_000"
    assert main(["predict", "--ckpt", str(out / "fold_0" / "stage2_best.ckpt"),
                 "--in", str(case / "image.nii"), "--out", str(pred_path)]) == 0
    labels, spacing = read_nifti(pred_path)
    vol = read_case(case)
    assert labels.shape == vol.shape
    assert spacing == pytest.approx(vol.spacing)
    assert set(np.unique(labels)) <= {0, 1, 2, 3, 4}


def test_resume_file_selects_its_fold(tmp_path, tmp_dataset):
    cfg = _write_config(tmp_path)
    out = tmp_path / "runs"
    base = ["-q", "train", "--data", str(tmp_dataset), "--config", str(cfg)]
    assert main(base + ["--out", str(out), "--fold", "0"]) == 0
    ckpt = out / "fold_0" / "stage1_best.ckpt"

    stage2 = tmp_path / "stage2"
    assert main(base + ["--out", str(stage2), "--stage", "2", "--resume", str(ckpt)]) == 0
    assert (stage2 / "fold_0" / "stage2_best.ckpt").is_file()
    assert not (stage2 / "fold_1").exists()

    with pytest.raises(SystemExit) as exc:
        main(base + ["--out", str(stage2), "--stage", "2", "--resume", str(ckpt), "--fold", "1"])
    assert exc.value.code == 2

    bare = load_checkpoint(ckpt)
    del bare.meta["fold"]
    bare_path = save_checkpoint(bare, tmp_path / "bare.ckpt")
    with pytest.raises(SystemExit) as exc:
        main(base + ["--out", str(stage2), "--stage", "2", "--resume", str(bare_path)])
    assert exc.value.code == 2


def test_parser_lists_subcommands():
    help_text = build_parser().format_help()
    for name in ("phantom", "train", "predict", "evaluate", "describe"):
        assert name in help_text
