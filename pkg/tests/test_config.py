import dataclasses

import pytest

from scripts.config import apply_overrides, class_names, fold_dir, read_config_file
from scripts.trainer import TrainConfig


def test_read_config_file_skips_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# header\ntrain.lr = 0.001  # faster\n\nloss.kind=tversky\n", encoding="utf-8")
    assert read_config_file(path) == {"train.lr": "0.001", "loss.kind": "tversky"}
    path.write_text("just words\n", encoding="utf-8")
    with pytest.raises(ValueError, match="key=value"):
        read_config_file(path)


def test_overrides_coerce_by_annotation():
    cfg = apply_overrides(
        TrainConfig(),
        {
            "lr": "5e-4",
            "batch_size": "2",
            "loss.alpha": "0.3",
            "loss.include_background": "no",
            "model.dilation_rates": "1,2,4,8",
            "preprocess.crop": "96x96",
            "preprocess.clahe_clip": "inf",
            "augment.zoom": "0.8,1.2",
        },
    )
    assert cfg.lr == 5e-4 and cfg.batch_size == 2
    assert cfg.loss.alpha == 0.3 and cfg.loss.include_background is False
    assert cfg.model.dilation_rates == (1, 2, 4, 8)
    assert cfg.preprocess.crop == (96, 96)
    assert cfg.preprocess.clahe_clip == float("inf")
    assert cfg.augment.zoom == (0.8, 1.2)
    assert dataclasses.is_dataclass(cfg.loss)


def test_overrides_reject_unknown_and_bad_values():
    with pytest.raises(ValueError, match="unknown config key 'loss.gamma'"):
        apply_overrides(TrainConfig(), {"loss.gamma": "2"})
    with pytest.raises(ValueError, match="cannot read"):
        apply_overrides(TrainConfig(), {"batch_size": "four"})
    with pytest.raises(ValueError, match="no sub-keys"):
        apply_overrides(TrainConfig(), {"lr.value": "1"})


def test_non_string_values_pass_through():
    assert apply_overrides(TrainConfig(), {"seed": 12}).seed == 12


def test_class_names_and_fold_dir(tmp_path):
    assert class_names(5)[1:] == ["esophagus", "heart", "trachea", "aorta"]
    assert class_names(3) == ["class_0", "class_1", "class_2"]
    assert fold_dir(tmp_path, 3) == tmp_path / "fold_3"
