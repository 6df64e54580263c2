import numpy as np
import pytest

from scripts.losses import LossConfig, one_hot, soft_dice_loss
from scripts.model import (
    ModelConfig,
    ParameterSet,
    bottleneck_sum,
    build_model,
    encoder_out_channels,
    forward,
    predict_labels,
)
from scripts.tensor_engine import Tape, Tensor, backward, conv2d, mul, sum_all
from tests.conftest import assert_grad_close, numeric_grad

TINY = ModelConfig(depth=2, base_channels=2, dilation_rates=(1, 2), seed=5)


def test_parameter_names_follow_layout():
    params, _ = build_model(TINY, input_hw=(8, 8))
    names = set(params.names())
    assert "enc1.conv1.weight" in names
    assert "enc1.conv1.bias" not in names
    assert "enc1.proj.weight" in names  # 1 -> 2 channels
    assert "bottleneck.dil1.weight" in names and "bottleneck.dil2.weight" in names
    assert "bottleneck.bn.gamma" in names
    assert "dec1.up_conv.weight" in names and "dec2.bn2.beta" in names
    assert "head.bias" in names
    assert params.names() == sorted(params.names())


def test_architecture_count_matches_parameters():
    for mode in ("add", "concat"):
        cfg = ModelConfig(depth=3, base_channels=4, residual_mode=mode)
        params, arch = build_model(cfg, input_hw=(64, 64))
        assert arch.total_params == params.count()
        text = arch.summary()
        assert f"total parameters: {params.count():,}" in text
        assert "d=4:9x9" in text


def test_bottleneck_width_and_head_shape():
    params, _ = build_model(ModelConfig(depth=4, base_channels=8))
    assert params["bottleneck.dil3.weight"].shape == (128, 64, 3, 3)
    assert params["head.weight"].shape == (5, 8, 1, 1)


def test_concat_mode_widens_encoder_outputs():
    cfg = ModelConfig(depth=2, base_channels=4, residual_mode="concat")
    assert encoder_out_channels(cfg, 1) == 1 + 4
    assert encoder_out_channels(cfg, 2) == 5 + 8
    params, _ = build_model(cfg)
    assert "enc1.proj.weight" not in params
    assert params["dec1.conv1.weight"].shape[1] == 5 + 4


def test_same_seed_same_init():
    a, _ = build_model(TINY)
    b, _ = build_model(TINY)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_forward_output_is_a_distribution(rng):
    params, _ = build_model(TINY)
    x = Tensor(rng.normal(size=(2, 1, 8, 12)))
    p = forward(params, TINY, x, mode="eval").data
    assert p.shape == (2, 5, 8, 12)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert np.all(p >= 0)


def test_concat_mode_forward_runs(rng):
    cfg = ModelConfig(depth=2, base_channels=2, dilation_rates=(1, 3), residual_mode="concat")
    params, _ = build_model(cfg)
    p = forward(params, cfg, Tensor(rng.normal(size=(1, 1, 8, 8))), mode="train")
    assert p.shape == (1, 5, 8, 8)


def test_forward_validates_input():
    params, _ = build_model(TINY)
    with pytest.raises(ValueError, match="divisible"):
        forward(params, TINY, Tensor(np.zeros((1, 1, 6, 8))))
    with pytest.raises(ValueError, match="channels"):
        forward(params, TINY, Tensor(np.zeros((1, 2, 8, 8))))
    with pytest.raises(ValueError):
        forward(params, TINY, Tensor(np.zeros((1, 1, 8, 8))), mode="predict")


def test_eval_forward_is_pure_and_train_forward_updates_stats(rng):
    params, _ = build_model(TINY)
    x = Tensor(rng.normal(size=(2, 1, 8, 8)))
    before = {k: v.copy() for k, v in params.buffers().items()}
    a = forward(params, TINY, x, mode="eval").data
    b = forward(params, TINY, x, mode="eval").data
    np.testing.assert_array_equal(a, b)
    for k, v in params.buffers().items():
        np.testing.assert_array_equal(v, before[k])
    forward(params, TINY, x, mode="train")
    assert not np.array_equal(params.buffers()["enc1.bn1.running_mean"], before["enc1.bn1.running_mean"])


@pytest.mark.parametrize("mode", ["train", "eval"])
@pytest.mark.parametrize("name", ["head.weight", "bottleneck.dil2.weight", "enc1.bn2.gamma", "dec1.conv2.weight"])
def test_end_to_end_gradient_matches_finite_differences(rng, mode, name):
    cfg = ModelConfig(depth=1, base_channels=2, dilation_rates=(1, 2), seed=2)
    base, _ = build_model(cfg)
    x = rng.normal(size=(2, 1, 4, 4))
    w = rng.normal(size=(2, 5, 4, 4))

    params = base.copy()
    with Tape() as tape:
        out = forward(params, cfg, Tensor(x), mode=mode)
        loss = sum_all(mul(out, Tensor(w)))
    backward(loss, tape)
    analytic = params[name].grad

    def value(arr):
        p = base.copy()
        arrays = p.arrays()
        arrays[name] = arr
        p = p.replace_arrays(arrays)
        return float((forward(p, cfg, Tensor(x), mode=mode).data * w).sum())

    assert_grad_close(analytic, numeric_grad(value, base[name].data), rtol=1e-4, atol=1e-6)


def test_parameter_set_round_trips_through_arrays():
    params, _ = build_model(TINY)
    clone = ParameterSet.from_arrays(params.arrays(), params.buffers())
    assert clone.names() == params.names()
    for k, v in params.buffers().items():
        np.testing.assert_array_equal(clone.buffers()[k], v)
    with pytest.raises(KeyError):
        params.replace_arrays({})
    with pytest.raises(KeyError):
        ParameterSet.from_arrays({}, {"enc1.bn1.running_median": np.zeros(2)})


def test_copy_is_independent():
    params, _ = build_model(TINY)
    clone = params.copy()
    clone.running["enc1.bn1"].mean[:] = 9.0
    assert not np.any(params.running["enc1.bn1"].mean == 9.0)


def test_predict_labels_ties_go_to_lowest_class():
    p = np.full((1, 3, 1, 2), 1 / 3)
    p[0, 2, 0, 1] = 0.5
    np.testing.assert_array_equal(predict_labels(p), [[[0, 2]]])
    with pytest.raises(ValueError):
        predict_labels(np.zeros((3, 2, 2)))


def test_config_validation_and_dict_round_trip():
    with pytest.raises(ValueError, match="residual_mode"):
        ModelConfig(residual_mode="mul").validate()
    with pytest.raises(ValueError, match="dilation_rates"):
        ModelConfig(dilation_rates=(1, 0)).validate()
    cfg = ModelConfig(depth=3, dilation_rates=(1, 2, 4, 8))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.divisor == 8


def test_bottleneck_is_a_sum_of_dilated_branches(rng):
    params, _ = build_model(TINY)
    x = Tensor(rng.normal(size=(2, 4, 6, 6)))
    k1 = params["bottleneck.dil1.weight"].data
    arrays = params.arrays()
    arrays["bottleneck.dil2.weight"] = np.zeros_like(arrays["bottleneck.dil2.weight"])
    only_rate_one = params.replace_arrays(arrays)
    plain = conv2d(x, Tensor(k1), padding=1)
    np.testing.assert_allclose(bottleneck_sum(only_rate_one, TINY, x).data, plain.data, atol=1e-12)

    k2 = params["bottleneck.dil2.weight"].data
    dilated = conv2d(x, Tensor(k2), padding=2, dilation=2)
    np.testing.assert_allclose(
        bottleneck_sum(params, TINY, x).data, plain.data + dilated.data, atol=1e-12
    )


def test_one_dice_step_reaches_every_parameter(rng):
    params, _ = build_model(TINY)
    x = Tensor(rng.normal(size=(2, 1, 16, 16)))
    y = one_hot(rng.integers(0, 5, size=(2, 16, 16)), 5)
    with Tape() as tape:
        loss = soft_dice_loss(forward(params, TINY, x, mode="train"), y, LossConfig())
    backward(loss, tape)
    silent = [name for name, g in params.grads().items() if g is None or not np.any(g)]
    assert silent == []


def test_full_network_dice_gradient_matches_finite_differences():
    cfg = ModelConfig(seed=4)
    base, _ = build_model(cfg)
    rng = np.random.default_rng(21)
    x = rng.normal(size=(1, 1, 32, 32))
    y = one_hot(rng.integers(0, 5, size=(1, 32, 32)), 5)
    loss_cfg = LossConfig()

    params = base.copy()
    with Tape() as tape:
        loss = soft_dice_loss(forward(params, cfg, Tensor(x), mode="train"), y, loss_cfg)
    backward(loss, tape)

    names = base.names()
    picks = set()
    while len(picks) < 50:
        name = names[rng.integers(len(names))]
        picks.add((name, int(rng.integers(base[name].data.size))))

    h = 1e-5
    for name, flat in sorted(picks):
        idx = np.unravel_index(flat, base[name].shape)

        def value(delta):
            p = base.copy()
            arrays = p.arrays()
            arr = arrays[name].copy()
            arr[idx] += delta
            arrays[name] = arr
            p = p.replace_arrays(arrays)
            return soft_dice_loss(forward(p, cfg, Tensor(x), mode="train"), y, loss_cfg).item()

        numeric = (value(h) - value(-h)) / (2 * h)
        analytic = params[name].grad[idx]
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8, (name, idx)
