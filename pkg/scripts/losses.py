# scripts/losses.py
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scripts.tensor_engine import Tensor, _as_tensor, _emit

LOSS_KINDS = {"dice", "tversky"}

ONE_HOT_TOL = 1e-9


@dataclass(frozen=True)
class LossConfig:
    kind: str = "dice"
    alpha: float = 0.5
    beta: float = 0.5
    smooth: float = 1e-6
    include_background: bool = True
    dice_factor_two: bool = True

    def validate(self) -> "LossConfig":
        problems = []
        if self.kind not in LOSS_KINDS:
            problems.append(f"kind={self.kind!r} (one of {sorted(LOSS_KINDS)})")
        if self.alpha < 0:
            problems.append(f"alpha={self.alpha} (must be >= 0)")
        if self.beta < 0:
            problems.append(f"beta={self.beta} (must be >= 0)")
        if not self.smooth > 0:
            problems.append(f"smooth={self.smooth} (must be > 0)")
        if problems:
            raise ValueError("Invalid LossConfig: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "beta": self.beta,
            "smooth": self.smooth,
            "include_background": self.include_background,
            "dice_factor_two": self.dice_factor_two,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d).validate()


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """[N, H, W] integer labels -> [N, K, H, W] float64 one-hot."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    eye = np.eye(num_classes, dtype=np.float64)
    return np.moveaxis(eye[labels.astype(np.int64)], -1, 1)


def _check_inputs(pred: Tensor, target) -> np.ndarray:
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.data.ndim != 4:
        raise ValueError(f"loss expects pred [N, K, H, W], got {pred.shape}")
    if y.shape != pred.shape:
        raise ValueError(f"target shape {y.shape} does not match pred {pred.shape}")
    binary = np.all((y == 0) | (y == 1))
    if not binary or np.abs(y.sum(axis=1) - 1.0).max() > ONE_HOT_TOL:
        raise ValueError("target is not one-hot: every pixel needs exactly one class set to 1")
    return y


def _class_slice(config: LossConfig) -> slice:
    return slice(0 if config.include_background else 1, None)


def soft_dice_loss(pred: Tensor, target, config: LossConfig | None = None) -> Tensor:
    """
    1 - mean over included classes of (f * sum(y*p) + s) / (sum(y) + sum(p) + s),
    sums taken over batch and pixels. f is 2 unless `dice_factor_two` is off.
    """
    config = (config or LossConfig()).validate()
    pred = _as_tensor(pred)
    y = _check_inputs(pred, target)
    p = pred.data
    f = 2.0 if config.dice_factor_two else 1.0
    s = config.smooth
    keep = _class_slice(config)

    axes = (0, 2, 3)
    inter = (y * p).sum(axis=axes)[keep]
    denom = (y.sum(axis=axes) + p.sum(axis=axes))[keep] + s
    numer = f * inter + s
    n_cls = len(inter)
    if n_cls == 0:
        raise ValueError("no classes left to score (include_background=False with K=1)")
    loss = 1.0 - (numer / denom).mean()

    def _backward(g):
        # d term_k / d p = (f*y*denom - numer) / denom^2
        grad = np.zeros_like(p)
        yk = y[:, keep]
        grad[:, keep] = (
            f * yk * denom[None, :, None, None] - numer[None, :, None, None]
        ) / (denom[None, :, None, None] ** 2)
        return (-float(g) / n_cls * grad,)

    return _emit(np.array(loss), (pred,), _backward, "soft_dice_loss")


def tversky_index_terms(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (TP, FP, FN) over batch and pixels."""
    axes = (0, 2, 3)
    tp = (y * p).sum(axis=axes)
    fp = ((1.0 - y) * p).sum(axis=axes)
    fn = (y * (1.0 - p)).sum(axis=axes)
    return tp, fp, fn


def tversky_loss(pred: Tensor, target, config: LossConfig | None = None) -> Tensor:
    """
    1 - mean over included classes of (TP + s) / (TP + alpha*FP + beta*FN + s).
    alpha weighs false positives, beta false negatives.
    """
    config = (config or LossConfig(kind="tversky")).validate()
    pred = _as_tensor(pred)
    y = _check_inputs(pred, target)
    p = pred.data
    a, b, s = config.alpha, config.beta, config.smooth
    keep = _class_slice(config)

    tp, fp, fn = (t[keep] for t in tversky_index_terms(p, y))
    numer = tp + s
    denom = tp + a * fp + b * fn + s
    n_cls = len(tp)
    if n_cls == 0:
        raise ValueError("no classes left to score (include_background=False with K=1)")
    loss = 1.0 - (numer / denom).mean()

    def _backward(g):
        yk = y[:, keep]
        nb, db = numer[None, :, None, None], denom[None, :, None, None]
        d_numer = yk
        d_denom = yk + a * (1.0 - yk) - b * yk
        grad = np.zeros_like(p)
        grad[:, keep] = (d_numer * db - nb * d_denom) / db**2
        return (-float(g) / n_cls * grad,)

    return _emit(np.array(loss), (pred,), _backward, "tversky_loss")


def compute_loss(pred: Tensor, target, config: LossConfig) -> Tensor:
    if config.kind == "tversky":
        return tversky_loss(pred, target, config)
    return soft_dice_loss(pred, target, config)
