import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scripts.losses import LossConfig, compute_loss, one_hot, soft_dice_loss, tversky_loss
from scripts.tensor_engine import Tensor, softmax_channels
from tests.conftest import analytic_grads, assert_grad_close, numeric_grad


def _random_probs(rng, shape):
    return softmax_channels(Tensor(rng.normal(size=shape))).data


def _labels(rng, n=2, k=4, h=5, w=5):
    return rng.integers(0, k, size=(n, h, w))


def test_one_hot_layout_and_range_check():
    y = one_hot(np.array([[[0, 2], [1, 1]]]), 3)
    assert y.shape == (1, 3, 2, 2)
    assert y[0, 2, 0, 1] == 1.0 and y[0, 0, 0, 1] == 0.0
    with pytest.raises(ValueError):
        one_hot(np.array([[[3]]]), 3)


def test_perfect_prediction_gives_near_zero_loss(rng):
    y = one_hot(_labels(rng), 4)
    for kind in ("dice", "tversky"):
        loss = compute_loss(Tensor(y), y, LossConfig(kind=kind))
        assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_disjoint_prediction_gives_loss_near_one():
    y = one_hot(np.zeros((1, 4, 4), dtype=int), 2)
    p = one_hot(np.ones((1, 4, 4), dtype=int), 2)
    assert soft_dice_loss(Tensor(p), y).item() == pytest.approx(1.0, abs=1e-6)


def test_tversky_with_equal_weights_matches_dice(rng):
    dice_cfg = LossConfig(kind="dice", smooth=1e-12)
    tv_cfg = LossConfig(kind="tversky", alpha=0.5, beta=0.5, smooth=1e-12)
    for _ in range(100):
        y = one_hot(_labels(rng), 4)
        p = _random_probs(rng, y.shape)
        dice = soft_dice_loss(Tensor(p), y, dice_cfg).item()
        tv = tversky_loss(Tensor(p), y, tv_cfg).item()
        assert tv == pytest.approx(dice, abs=1e-9)


def test_dice_hand_value():
    y = one_hot(np.ones((1, 1, 4), dtype=int), 2)
    p = np.zeros_like(y)
    p[:, 0], p[:, 1] = 0.25, 0.75
    loss = soft_dice_loss(Tensor(p), y, LossConfig(smooth=1e-12)).item()
    assert loss == pytest.approx(4 / 7, abs=1e-9)


def test_tversky_hand_value():
    y1 = np.array([1, 1, 1, 1, 1, 0], dtype=float)
    p1 = np.array([1, 1, 0, 0, 0, 1], dtype=float)  # TP=2, FN=3, FP=1
    y = np.stack([1 - y1, y1]).reshape(1, 2, 1, 6)
    p = np.stack([1 - p1, p1]).reshape(1, 2, 1, 6)
    cfg = LossConfig(kind="tversky", smooth=1e-12, include_background=False)
    assert tversky_loss(Tensor(p), y, cfg).item() == pytest.approx(0.5, abs=1e-9)


def test_alpha_penalizes_false_positives_beta_false_negatives():
    def pair(p1):
        y1 = np.array([0, 0, 1, 1], dtype=float)
        p1 = np.asarray(p1, dtype=float)
        y = np.stack([1 - y1, y1]).reshape(1, 2, 1, 4)
        p = np.stack([1 - p1, p1]).reshape(1, 2, 1, 4)
        return Tensor(p), y

    missed = pair([0, 0, 1, 0])  # one false negative
    extra = pair([1, 0, 1, 1])  # one false positive
    fp_heavy = LossConfig(kind="tversky", alpha=0.9, beta=0.1, include_background=False)
    fn_heavy = LossConfig(kind="tversky", alpha=0.1, beta=0.9, include_background=False)
    assert tversky_loss(*extra, fp_heavy).item() > tversky_loss(*missed, fp_heavy).item()
    assert tversky_loss(*missed, fn_heavy).item() > tversky_loss(*extra, fn_heavy).item()


def test_include_background_false_drops_class_zero(rng):
    y = one_hot(_labels(rng, k=3), 3)
    p = y.copy()
    p[:, 0] = 0.5  # only background is wrong
    cfg = LossConfig(include_background=False)
    assert soft_dice_loss(Tensor(p), y, cfg).item() == pytest.approx(0.0, abs=1e-9)
    assert soft_dice_loss(Tensor(p), y).item() > 0.0


@pytest.mark.parametrize(
    "config",
    [
        LossConfig(kind="dice"),
        LossConfig(kind="dice", dice_factor_two=False, include_background=False),
        LossConfig(kind="tversky", alpha=0.3, beta=0.7),
        LossConfig(kind="tversky", alpha=0.7, beta=0.3, include_background=False),
    ],
)
def test_loss_gradient_matches_finite_differences(rng, config):
    y = one_hot(_labels(rng, n=2, k=3, h=3, w=4), 3)
    p = _random_probs(rng, y.shape)
    (g,) = analytic_grads(lambda t: compute_loss(t, y, config), p)

    def value(a):
        return compute_loss(Tensor(a), y, config).item()

    assert_grad_close(g, numeric_grad(value, p), rtol=1e-4, atol=1e-8)


def test_rejects_bad_targets(rng):
    p = Tensor(_random_probs(rng, (1, 3, 2, 2)))
    with pytest.raises(ValueError, match="one-hot"):
        soft_dice_loss(p, np.full((1, 3, 2, 2), 1 / 3))
    with pytest.raises(ValueError, match="shape"):
        soft_dice_loss(p, np.zeros((1, 2, 2, 2)))


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(kind="focal").validate()
    with pytest.raises(ValueError):
        LossConfig(smooth=0.0).validate()
    cfg = LossConfig(kind="tversky", alpha=0.3, beta=0.7)
    assert LossConfig.from_dict(cfg.to_dict()) == cfg


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 3, 2, 3), elements=st.floats(-5, 5)))
def test_losses_stay_in_unit_interval(logits):
    p = softmax_channels(Tensor(logits)).data
    y = one_hot(np.array([[[0, 1, 2], [2, 1, 0]]]), 3)
    for cfg in (LossConfig(), LossConfig(kind="tversky", alpha=0.2, beta=0.8)):
        v = compute_loss(Tensor(p), y, cfg).item()
        assert -1e-9 <= v <= 1.0 + 1e-9


@pytest.mark.parametrize("kind", ["dice", "tversky"])
def test_loss_falls_as_prediction_moves_toward_target(rng, kind):
    cfg = LossConfig(kind=kind)
    for _ in range(20):
        y = one_hot(_labels(rng), 4)
        start = _random_probs(rng, y.shape)
        losses = [
            compute_loss(Tensor((1 - t) * start + t * y), y, cfg).item()
            for t in np.linspace(0.0, 1.0, 11)
        ]
        assert np.all(np.diff(losses) <= 1e-12)
        assert losses[-1] < losses[0]
