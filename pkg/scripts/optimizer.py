# scripts/optimizer.py
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from sklearn.model_selection import KFold

from scripts.model import ParameterSet


class AdamHyper(Protocol):
    lr: float
    beta1: float
    beta2: float
    adam_eps: float


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ParameterSet) -> "AdamState":
        return cls(
            0,
            {k: np.zeros_like(a) for k, a in params.arrays().items()},
            {k: np.zeros_like(a) for k, a in params.arrays().items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(
            self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray | None] | None,
    state: AdamState,
    config: AdamHyper,
    *,
    lr: float | None = None,
) -> tuple[ParameterSet, AdamState]:
    """
    One bias-corrected ADAM update. `grads` defaults to the gradients held
    on the parameter tensors; `lr` overrides config.lr (plateau decay).
    """
    grads = params.grads() if grads is None else grads
    lr = config.lr if lr is None else lr
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps

    step = state.step + 1
    new_arrays, new_m, new_v = {}, {}, {}
    for name, theta in params.arrays().items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"Missing gradient for parameter {name!r}")
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}")
        m_prev = state.m.get(name, np.zeros_like(theta))
        v_prev = state.v.get(name, np.zeros_like(theta))
        m = b1 * m_prev + (1.0 - b1) * g
        v = b2 * v_prev + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_arrays[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v

    return params.replace_arrays(new_arrays), AdamState(step, new_m, new_v)


def five_fold_split(
    case_ids: list[str], seed: int, folds: int = 5
) -> list[tuple[list[str], list[str]]]:
    """
    Deterministic shuffled K-fold partition of case ids into (train, val) pairs.
    Every case lands in exactly one validation fold.
    """
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    if len(ids) < folds:
        raise ValueError(f"need at least {folds} cases for {folds}-fold CV, got {len(ids)}")
    kf = KFold(n_splits=folds, shuffle=True, random_state=int(seed) % 2**32)
    out = []
    for train_idx, val_idx in kf.split(ids):
        out.append(([ids[i] for i in train_idx], [ids[i] for i in val_idx]))
    return out
