# scripts/trainer.py
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from scripts.augmentation import AugmentRanges, draw_augment_params, random_augment
from scripts.checkpoints import Checkpoint
from scripts.losses import LossConfig, compute_loss, one_hot
from scripts.metrics import mean_foreground_dice
from scripts.model import ModelConfig, ParameterSet, build_model, forward, predict_labels
from scripts.optimizer import AdamState, adam_step
from scripts.postprocess import largest_component_filter
from scripts.preprocessing import (
    PreprocessConfig,
    offline_flips,
    paste_center,
    preprocess_volume,
    source_case,
)
from scripts.tensor_engine import Tape, Tensor, backward
from scripts.volume_io import Volume

logger = logging.getLogger(__name__)

SEED_BOUND = 2**63 - 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_factor: float = 0.2
    plateau_patience: int = 5
    early_stop_patience: int = 10
    batch_size: int = 4
    val_batch_size: int = 8
    stage1_max_epochs: int = 100
    stage2_epochs: int = 50
    folds: int = 5
    seed: int = 0
    loss: LossConfig = LossConfig(kind="tversky")
    model: ModelConfig = ModelConfig()
    augment: AugmentRanges = AugmentRanges()
    preprocess: PreprocessConfig = PreprocessConfig()

    def validate(self) -> "TrainConfig":
        problems = []
        if not self.lr > 0:
            problems.append(f"lr={self.lr} (must be > 0)")
        if not 0 <= self.beta1 < 1:
            problems.append(f"beta1={self.beta1} (must be in [0, 1))")
        if not 0 <= self.beta2 < 1:
            problems.append(f"beta2={self.beta2} (must be in [0, 1))")
        if not self.adam_eps > 0:
            problems.append(f"adam_eps={self.adam_eps} (must be > 0)")
        if not 0 < self.decay_factor <= 1:
            problems.append(f"decay_factor={self.decay_factor} (must be in (0, 1])")
        for name in ("plateau_patience", "early_stop_patience", "batch_size", "val_batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name}={getattr(self, name)} (must be >= 1)")
        if self.stage1_max_epochs < 1:
            problems.append(f"stage1_max_epochs={self.stage1_max_epochs} (must be >= 1)")
        if self.stage2_epochs < 0:
            problems.append(f"stage2_epochs={self.stage2_epochs} (must be >= 0)")
        if self.folds < 2:
            problems.append(f"folds={self.folds} (must be >= 2)")
        if self.seed < 0:
            problems.append(f"seed={self.seed} (must be >= 0)")
        if problems:
            raise ValueError("Invalid TrainConfig: " + "; ".join(problems))
        self.loss.validate()
        self.model.validate()
        self.augment.validate()
        self.preprocess.validate()
        return self

    def to_dict(self) -> dict:
        out = {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(self)
            if f.name not in {"loss", "model", "augment", "preprocess"}
        }
        out["loss"] = self.loss.to_dict()
        out["model"] = self.model.to_dict()
        out["augment"] = self.augment.to_dict()
        out["preprocess"] = self.preprocess.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig.from_dict(d.get("loss", {}))
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        d["augment"] = AugmentRanges.from_dict(d.get("augment", {}))
        d["preprocess"] = PreprocessConfig.from_dict(d.get("preprocess", {}))
        return cls(**d).validate()

    def stage_loss(self, stage: int) -> LossConfig:
        """Stage 1 always optimizes soft Dice; stage 2 uses the configured loss."""
        if stage == 1:
            return dataclasses.replace(self.loss, kind="dice")
        return self.loss


# ============================
# Data
# ============================


@dataclass
class SliceDataset:
    images: np.ndarray  # [n, 1, H, W]
    labels: np.ndarray  # [n, H, W]
    case_ids: list[str]  # one per slice

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be [n, 1, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0], *self.images.shape[2:]):
            raise ValueError(
                f"labels {self.labels.shape} do not match images {self.images.shape}"
            )
        if len(self.case_ids) != self.images.shape[0]:
            raise ValueError("one case id per slice is required")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def source_cases(self) -> list[str]:
        return sorted({source_case(c) for c in self.case_ids})

    @classmethod
    def from_volumes(cls, volumes: dict[str, Volume]) -> "SliceDataset":
        if not volumes:
            raise ValueError("no volumes to slice")
        shapes = {v.shape[1:] for v in volumes.values()}
        if len(shapes) != 1:
            raise ValueError(f"all volumes must share the in-plane size, got {sorted(shapes)}")
        images, labels, ids = [], [], []
        for cid, vol in volumes.items():
            if vol.labels is None:
                raise ValueError(f"case {cid!r} has no labels")
            images.append(vol.data[:, None])
            labels.append(vol.labels.astype(np.int64))
            ids.extend([cid] * vol.shape[0])
        return cls(np.concatenate(images), np.concatenate(labels), ids)


@dataclass
class FoldData:
    train: SliceDataset
    val: SliceDataset
    train_cases: list[str]
    val_cases: list[str]


def audit_leakage(train_case_ids, val_cases) -> None:
    """Raise if any training slice comes from a validation case (flip copies included)."""
    leaked = sorted({source_case(c) for c in train_case_ids} & set(val_cases))
    if leaked:
        raise ValueError(f"validation cases leaked into training: {leaked}")


def prepare_fold(
    volumes: dict[str, Volume],
    train_ids: list[str],
    val_ids: list[str],
    config: TrainConfig,
) -> FoldData:
    """Preprocess, add offline flips to the training cases, and cut into slices."""
    if not train_ids:
        raise ValueError("training set is empty")
    if not val_ids:
        raise ValueError("validation set is empty")
    divisor = config.model.divisor
    prep = {
        cid: preprocess_volume(volumes[cid], config.preprocess, divisor=divisor)
        for cid in dict.fromkeys([*train_ids, *val_ids])
    }

    train_vols: dict[str, Volume] = {}
    for cid in train_ids:
        if config.preprocess.offline_flips:
            train_vols.update(offline_flips(cid, prep[cid]))
        else:
            train_vols[cid] = prep[cid]
    train = SliceDataset.from_volumes(train_vols)
    val = SliceDataset.from_volumes({cid: prep[cid] for cid in val_ids})
    logger.info(
        "fold data: %d train cases (%d slices), %d val cases (%d slices)",
        len(train_ids), len(train), len(val_ids), len(val),
    )
    return FoldData(train, val, list(train_ids), list(val_ids))


# ============================
# Evaluation helpers
# ============================


def predict_slices(
    params: ParameterSet, config: ModelConfig, images: np.ndarray, batch_size: int = 8
) -> np.ndarray:
    """Eval-mode argmax labels for [n, 1, H, W] slices."""
    out = []
    for start in range(0, images.shape[0], batch_size):
        probs = forward(params, config, Tensor(images[start : start + batch_size]), "eval")
        out.append(predict_labels(probs))
    return np.concatenate(out)


def evaluate_dice(
    params: ParameterSet, config: ModelConfig, data: SliceDataset, batch_size: int = 8
) -> float:
    """Mean foreground DSC with all slices of `data` pooled per class."""
    pred = predict_slices(params, config, data.images, batch_size)
    return mean_foreground_dice(data.labels, pred, config.num_classes)


# ============================
# Training loop
# ============================


@dataclass
class TrainState:
    stage: int
    params: ParameterSet
    adam: AdamState
    rng: np.random.Generator
    lr: float
    loss: LossConfig
    epoch: int = 0
    best_score: float = float("-inf")
    best_epoch: int = 0
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    best_buffers: dict[str, np.ndarray] = field(default_factory=dict)
    best_adam: AdamState = field(default_factory=AdamState)
    stale: int = 0
    plateau_stale: int = 0
    decay_events: int = 0
    history: list[dict] = field(default_factory=list)

    def snapshot_best(self, score: float) -> None:
        self.best_score = score
        self.best_epoch = self.epoch
        self.best_params = {k: a.copy() for k, a in self.params.arrays().items()}
        self.best_buffers = {k: a.copy() for k, a in self.params.buffers().items()}
        self.best_adam = self.adam.copy()


EpochCallback = Callable[[TrainState], None]


def _augment_batch(images, labels, rng, ranges: AugmentRanges):
    images, labels = images.copy(), labels.copy()
    for i in range(images.shape[0]):
        params = draw_augment_params(int(rng.integers(0, SEED_BOUND)), ranges)
        images[i, 0], labels[i] = random_augment(images[i, 0], labels[i], params)
    return images, labels


def train_step(
    state: TrainState, config: TrainConfig, images: np.ndarray, labels: np.ndarray
) -> float:
    """One mini-batch: forward in train mode, loss, backward, ADAM update."""
    target = one_hot(labels, config.model.num_classes)
    with Tape() as tape:
        probs = forward(state.params, config.model, Tensor(images), "train")
        loss = compute_loss(probs, target, state.loss)
    state.params.zero_grad()
    backward(loss, tape)
    state.params, state.adam = adam_step(state.params, None, state.adam, config, lr=state.lr)
    return loss.item()


def run_epoch(
    state: TrainState, data: FoldData, config: TrainConfig, *, augment: bool
) -> dict:
    n = len(data.train)
    order = state.rng.permutation(n)
    losses = []
    for start in range(0, n, config.batch_size):
        idx = order[start : start + config.batch_size]
        images, labels = data.train.images[idx], data.train.labels[idx]
        if augment:
            images, labels = _augment_batch(images, labels, state.rng, config.augment)
        losses.append(train_step(state, config, images, labels))

    state.epoch += 1
    val = evaluate_dice(state.params, config.model, data.val, config.val_batch_size)
    row = {
        "epoch": state.epoch,
        "stage": state.stage,
        "loss": float(np.mean(losses)),
        "val_dsc": float(val),
        "lr": float(state.lr),
    }
    state.history.append(row)
    logger.info(
        "epoch=%d stage=%d loss=%.6f val_dsc=%.6f lr=%.3g",
        row["epoch"], row["stage"], row["loss"], row["val_dsc"], row["lr"],
    )

    if val > state.best_score:
        state.snapshot_best(val)
        state.stale = 0
        state.plateau_stale = 0
    else:
        state.stale += 1
        state.plateau_stale += 1
        if state.plateau_stale >= config.plateau_patience:
            state.decay_events += 1
            state.lr = config.lr * config.decay_factor**state.decay_events
            state.plateau_stale = 0
            logger.info("validation plateau: lr -> %.3g", state.lr)
    return row


def _train(
    state: TrainState,
    data: FoldData,
    config: TrainConfig,
    *,
    max_epochs: int,
    augment: bool,
    early_stop: bool,
    on_epoch_end: EpochCallback | None,
) -> TrainState:
    audit_leakage(data.train.case_ids, data.val_cases)
    while state.epoch < max_epochs:
        run_epoch(state, data, config, augment=augment)
        if on_epoch_end is not None:
            on_epoch_end(state)
        if early_stop and state.stale >= config.early_stop_patience:
            logger.info(
                "early stop after %d epochs (best val_dsc=%.6f at epoch %d)",
                state.epoch, state.best_score, state.best_epoch,
            )
            break
    return state


# ============================
# Checkpoint <-> state
# ============================


def _base_meta(state: TrainState, data: FoldData, config: TrainConfig, kind: str) -> dict:
    return {
        "kind": kind,
        "stage": state.stage,
        "loss": state.loss.to_dict(),
        "train_config": config.to_dict(),
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_score": state.best_score,
        "lr": state.lr,
        "history": list(state.history),
        "train_cases": sorted(data.train_cases),
        "val_cases": sorted(data.val_cases),
        "trained_case_ids": sorted(set(data.train.case_ids)),
        "rng_state": state.rng.bit_generator.state,
    }


def best_checkpoint(state: TrainState, data: FoldData, config: TrainConfig) -> Checkpoint:
    """Parameters, buffers and moments from the best-validation epoch."""
    meta = _base_meta(state, data, config, "best")
    meta["step"] = state.best_adam.step
    return Checkpoint(
        config.model,
        {
            "param": dict(state.best_params),
            "buffer": dict(state.best_buffers),
            "adam_m": dict(state.best_adam.m),
            "adam_v": dict(state.best_adam.v),
        },
        meta,
    )


def state_checkpoint(state: TrainState, data: FoldData, config: TrainConfig) -> Checkpoint:
    """Everything needed to continue the run bit-identically."""
    meta = _base_meta(state, data, config, "state")
    meta.update(
        step=state.adam.step,
        best_step=state.best_adam.step,
        stale=state.stale,
        plateau_stale=state.plateau_stale,
        decay_events=state.decay_events,
    )
    return Checkpoint(
        config.model,
        {
            "param": state.params.arrays(),
            "buffer": state.params.buffers(),
            "adam_m": dict(state.adam.m),
            "adam_v": dict(state.adam.v),
            "best_param": dict(state.best_params),
            "best_buffer": dict(state.best_buffers),
            "best_adam_m": dict(state.best_adam.m),
            "best_adam_v": dict(state.best_adam.v),
        },
        meta,
    )


def _restore_state(ckpt: Checkpoint, config: TrainConfig) -> TrainState:
    if ckpt.kind != "state":
        raise ValueError(f"cannot resume from a {ckpt.kind!r} checkpoint; need a 'state' checkpoint")
    _check_model(ckpt, config)
    meta = ckpt.meta
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(
        stage=ckpt.stage,
        params=ckpt.params(),
        adam=ckpt.adam_state("adam"),
        rng=rng,
        lr=float(meta["lr"]),
        loss=LossConfig.from_dict(meta["loss"]),
        epoch=int(meta["epoch"]),
        best_score=float(meta["best_score"]),
        best_epoch=int(meta["best_epoch"]),
        best_params={k: a.copy() for k, a in ckpt.group("best_param").items()},
        best_buffers={k: a.copy() for k, a in ckpt.group("best_buffer").items()},
        best_adam=ckpt.adam_state("best_adam"),
        stale=int(meta["stale"]),
        plateau_stale=int(meta["plateau_stale"]),
        decay_events=int(meta["decay_events"]),
        history=[dict(r) for r in meta["history"]],
    )


def _check_model(ckpt: Checkpoint, config: TrainConfig) -> None:
    if ckpt.model_config != config.model:
        raise ValueError(
            "checkpoint model config does not match the training config: "
            f"{ckpt.model_config.to_dict()} vs {config.model.to_dict()}"
        )


# ============================
# Stages
# ============================


def train_stage1(
    data: FoldData,
    config: TrainConfig,
    *,
    resume: Checkpoint | None = None,
    on_epoch_end: EpochCallback | None = None,
) -> Checkpoint:
    """Soft-Dice training without online augmentation, early stopping on validation DSC."""
    config.validate()
    if len(data.train) == 0:
        raise ValueError("training set is empty")
    if resume is not None:
        state = _restore_state(resume, config)
        if state.stage != 1:
            raise ValueError(f"resume checkpoint is from stage {state.stage}, expected 1")
        logger.info("resuming stage 1 at epoch %d", state.epoch)
    else:
        params, _ = build_model(config.model)
        state = TrainState(
            stage=1,
            params=params,
            adam=AdamState.zeros_like(params),
            rng=np.random.default_rng(config.seed),
            lr=config.lr,
            loss=config.stage_loss(1),
        )
    _train(
        state, data, config,
        max_epochs=config.stage1_max_epochs,
        augment=False,
        early_stop=True,
        on_epoch_end=on_epoch_end,
    )
    if state.epoch == 0 or not state.best_params:
        raise ValueError("stage 1 finished without an evaluated epoch")
    return best_checkpoint(state, data, config)


def train_stage2(
    checkpoint: Checkpoint,
    data: FoldData,
    config: TrainConfig,
    *,
    on_epoch_end: EpochCallback | None = None,
) -> Checkpoint:
    """
    Continue from stage-1 weights for exactly `stage2_epochs` epochs with
    online augmentation and the configured loss. A stage-2 'state'
    checkpoint resumes an interrupted run instead.
    """
    config.validate()
    _check_model(checkpoint, config)
    if len(data.train) == 0:
        raise ValueError("training set is empty")

    if checkpoint.kind == "state" and checkpoint.stage == 2:
        state = _restore_state(checkpoint, config)
        logger.info("resuming stage 2 at epoch %d", state.epoch)
    else:
        if checkpoint.stage != 1:
            raise ValueError(f"stage 2 starts from a stage-1 checkpoint, got stage {checkpoint.stage}")
        params = checkpoint.params() if checkpoint.kind == "best" else checkpoint.best_params()
        state = TrainState(
            stage=2,
            params=params,
            adam=AdamState.zeros_like(params),
            rng=np.random.default_rng([config.seed, 2]),
            lr=config.lr,
            loss=config.stage_loss(2),
        )
        start = evaluate_dice(params, config.model, data.val, config.val_batch_size)
        state.snapshot_best(start)
        logger.info("stage 2 starts from val_dsc=%.6f", start)

    _train(
        state, data, config,
        max_epochs=config.stage2_epochs,
        augment=True,
        early_stop=False,
        on_epoch_end=on_epoch_end,
    )
    return best_checkpoint(state, data, config)


# ============================
# Inference
# ============================


def _checkpoint_params(checkpoint: Checkpoint) -> ParameterSet:
    return checkpoint.params() if checkpoint.kind == "best" else checkpoint.best_params()


def predict_volume(
    checkpoint: Checkpoint,
    volume: Volume | np.ndarray,
    *,
    postprocess: bool = True,
    batch_size: int = 8,
) -> np.ndarray:
    """
    Label map [D, H, W] for an already preprocessed volume: eval-mode forward
    per slice, argmax, restack, then largest-component filtering.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    if data.ndim != 3:
        raise ValueError(f"predict_volume expects [D, H, W], got {data.shape}")
    config = checkpoint.model_config
    params = _checkpoint_params(checkpoint)
    labels = predict_slices(params, config, data[:, None], batch_size)
    if postprocess:
        labels = largest_component_filter(labels, config.num_classes)
    return labels.astype(np.uint8)


def checkpoint_preprocess(checkpoint: Checkpoint) -> PreprocessConfig:
    stored = checkpoint.meta.get("train_config", {}).get("preprocess")
    return PreprocessConfig.from_dict(stored) if stored else PreprocessConfig()


def predict_raw_volume(
    checkpoint: Checkpoint, volume: Volume, *, postprocess: bool = True
) -> np.ndarray:
    """Preprocess like training, predict on the cropped grid, paste back at full size."""
    prep = preprocess_volume(
        Volume(volume.data, volume.spacing),
        checkpoint_preprocess(checkpoint),
        divisor=checkpoint.model_config.divisor,
    )
    cropped = predict_volume(checkpoint, prep, postprocess=postprocess)
    return paste_center(cropped, volume.shape[1:], fill=0)
