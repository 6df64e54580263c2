# scripts/cli.py
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from scripts.checkpoints import load_checkpoint
from scripts.config import LABELS_FILE, apply_overrides, read_config_file
from scripts.losses import LOSS_KINDS
from scripts.metrics import evaluate_volume
from scripts.model import build_model
from scripts.phantom import PhantomSpec, generate_dataset
from scripts.pipeline import print_cv_summary, resume_fold, run_cross_validation
from scripts.reports import print_evaluation_summary, write_report
from scripts.trainer import TrainConfig, predict_raw_volume
from scripts.volume_io import read_nifti, read_volume, write_labels

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# config-file sections that address nested TrainConfig fields directly
_NESTED_SECTIONS = {"model", "loss", "augment", "preprocess"}


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected DxHxW, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected DxHxW integers, got {text!r}") from None


def load_train_config(path: str | Path | None) -> TrainConfig:
    """
    Defaults, then the optional key=value file. Keys are `train.<field>` for
    top-level training fields and `model.*`, `loss.*`, `augment.*`,
    `preprocess.*` for the nested groups.
    """
    cfg = TrainConfig()
    if path is None:
        return cfg
    values: dict[str, object] = {}
    for key, value in read_config_file(path).items():
        head, _, rest = key.partition(".")
        if head == "train" and rest:
            values[rest] = value
        elif head in _NESTED_SECTIONS and rest:
            values[key] = value
        else:
            raise ValueError(
                f"config key {key!r} must start with one of "
                f"{sorted(_NESTED_SECTIONS | {'train'})}"
            )
    return apply_overrides(cfg, values)


# ============================
# Commands
# ============================


def cmd_phantom(args: argparse.Namespace) -> int:
    spec = PhantomSpec(seed=args.seed)
    if args.dims is not None:
        spec = dataclasses.replace(spec, dims=args.dims)
    if args.noise is not None:
        spec = dataclasses.replace(spec, noise_std=args.noise)
    manifest = generate_dataset(args.cases, args.out, spec, seed=args.seed)
    print(manifest.to_string(index=False))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_train_config(args.config)
    flags: dict[str, object] = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.epochs is not None:
        flags["stage1_max_epochs" if args.stage == 1 else "stage2_epochs"] = args.epochs
    if args.batch_size is not None:
        flags["batch_size"] = args.batch_size
    if args.lr is not None:
        flags["lr"] = args.lr
    if args.folds is not None:
        flags["folds"] = args.folds
    if args.loss is not None:
        flags["loss.kind"] = args.loss
    cfg = apply_overrides(cfg, flags).validate()
    if args.stage == 1 and args.loss == "tversky":
        logger.warning("stage 1 always trains on soft Dice; --loss applies to stage 2")

    folds = None if args.fold is None else [args.fold]
    results = run_cross_validation(
        args.data,
        args.out,
        cfg,
        stage=args.stage,
        folds=folds,
        resume=args.resume,
        jobs=args.jobs,
    )
    print_cv_summary(results)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    volume = read_volume(args.input)
    labels = predict_raw_volume(ckpt, volume, postprocess=not args.no_postprocess)
    write_labels(labels, volume.spacing, args.out)
    counts = np.bincount(labels.ravel(), minlength=ckpt.model_config.num_classes)
    print(f"wrote {args.out}  voxels per class: {counts.tolist()}")
    return 0


def _label_path(path: Path) -> Path:
    return path / LABELS_FILE if path.is_dir() else path


def cmd_evaluate(args: argparse.Namespace) -> int:
    gt, spacing = read_nifti(_label_path(Path(args.gt)))
    pred, _ = read_nifti(_label_path(Path(args.pred)))
    report = evaluate_volume(
        np.rint(gt).astype(np.int64),
        np.rint(pred).astype(np.int64),
        spacing,
        args.num_classes,
        surface=not args.full_mask_hd,
    )
    print_evaluation_summary(report)
    if args.report:
        write_report(report, args.report)
        logger.info("report written to %s", args.report)
    return 0


def cmd_describe(args: argparse.Namespace) -> int:
    cfg = load_train_config(args.config).model
    if args.depth is not None or args.base_channels is not None or args.residual is not None:
        cfg = dataclasses.replace(
            cfg,
            depth=args.depth if args.depth is not None else cfg.depth,
            base_channels=args.base_channels if args.base_channels is not None else cfg.base_channels,
            residual_mode=args.residual or cfg.residual_mode,
        )
    params, arch = build_model(cfg.validate(), input_hw=(args.size, args.size))
    print(arch.summary())
    if arch.total_params != params.count():
        raise ValueError("architecture description disagrees with the parameter set")
    return 0


# ============================
# Parser
# ============================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="run_pipeline.py",
        description="U-Net+DR multi-organ segmentation: data, training, prediction, evaluation.",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic thoracic phantom dataset")
    p.add_argument("--cases", type=_positive_int, required=True, help="number of cases (>= 1)")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.add_argument("--seed", type=_non_negative_int, default=0, help="base seed; case i uses seed+i")
    p.add_argument("--dims", type=_dims, default=None, help="volume size DxHxW (default 32x96x96)")
    p.add_argument("--noise", type=float, default=None, help="Gaussian noise std in HU")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one stage for one fold or all folds")
    p.add_argument("--data", required=True, help="dataset directory (<case>/image.nii + labels.nii)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--fold", type=_non_negative_int, default=None, help="fold index (default: all)")
    p.add_argument("--loss", choices=sorted(LOSS_KINDS), default=None, help="stage-2 loss")
    p.add_argument(
        "--resume",
        default=None,
        help="stage 2: stage-1 checkpoint or previous --out directory; "
        "stage 1: a stage1_last.ckpt to continue. A checkpoint file trains only its own fold",
    )
    p.add_argument("--epochs", type=_non_negative_int, default=None, help="epoch budget for this stage")
    p.add_argument("--seed", type=_non_negative_int, default=None)
    p.add_argument("--batch-size", type=_positive_int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--folds", type=_positive_int, default=None, help="number of CV folds")
    p.add_argument("--jobs", type=_positive_int, default=1, help="folds trained in parallel")
    p.add_argument("--config", default=None, help="key=value config file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment a raw volume with a trained checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--in", dest="input", required=True, help="input image volume (.nii)")
    p.add_argument("--out", required=True, help="output label volume (.nii)")
    p.add_argument("--no-postprocess", action="store_true", help="skip largest-component filtering")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="per-organ DSC/HD of a prediction against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth label volume or case directory")
    p.add_argument("--pred", required=True, help="predicted label volume")
    p.add_argument("--report", default=None, help="write a key=value report file")
    p.add_argument("--num-classes", type=_positive_int, default=5)
    p.add_argument("--full-mask-hd", action="store_true", help="HD over all voxels, not boundaries")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("describe", help="print the network architecture summary")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--depth", type=_positive_int, default=None)
    p.add_argument("--base-channels", type=_positive_int, default=None)
    p.add_argument("--residual", choices=("add", "concat"), default=None)
    p.add_argument("--size", type=_positive_int, default=288, help="nominal input size")
    p.set_defaults(func=cmd_describe)

    return parser


def _check_resume_fold(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    recorded = resume_fold(args.resume)
    if recorded is None and args.fold is None:
        parser.error(f"--fold is required: {args.resume} does not record its fold")
    if recorded is not None and args.fold is not None and args.fold != recorded:
        parser.error(f"--fold {args.fold} does not match {args.resume} (fold {recorded})")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "train" and args.stage == 2 and args.resume is None:
        parser.error("--stage 2 requires --resume (stage-1 checkpoint or output directory)")

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format=LOG_FORMAT, force=True)

    try:
        if args.command == "train" and args.resume is not None and Path(args.resume).is_file():
            _check_resume_fold(parser, args)
        return args.func(args)
    except (ValueError, KeyError, OSError) as e:
        message = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {message}", file=sys.stderr)
        return 1
