# scripts/model.py
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from scripts.tensor_engine import (
    RunningStats,
    Tensor,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_param_count,
    maxpool2d,
    receptive_field_span,
    relu,
    softmax_channels,
    upsample2d,
)

RESIDUAL_MODES = {"add", "concat"}


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 5
    depth: int = 4
    base_channels: int = 8
    dilation_rates: tuple[int, ...] = (1, 2, 3, 4)
    residual_mode: str = "add"
    seed: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self) -> "ModelConfig":
        problems = []
        if self.in_channels < 1:
            problems.append(f"in_channels={self.in_channels} (must be >= 1)")
        if self.depth < 1:
            problems.append(f"depth={self.depth} (must be >= 1)")
        if self.base_channels < 1:
            problems.append(f"base_channels={self.base_channels} (must be >= 1)")
        if self.num_classes < 2:
            problems.append(f"num_classes={self.num_classes} (must be >= 2)")
        if not self.dilation_rates or any(int(r) < 1 for r in self.dilation_rates):
            problems.append(f"dilation_rates={list(self.dilation_rates)} (nonempty, all >= 1)")
        if self.residual_mode not in RESIDUAL_MODES:
            problems.append(f"residual_mode={self.residual_mode!r} (one of {sorted(RESIDUAL_MODES)})")
        if self.seed < 0:
            problems.append(f"seed={self.seed} (must be >= 0)")
        if problems:
            raise ValueError("Invalid ModelConfig: " + "; ".join(problems))
        return self

    def channels(self, level: int) -> int:
        """Feature width at encoder/decoder level (1-based); depth+1 is the bottleneck."""
        return self.base_channels * 2 ** (level - 1)

    @property
    def divisor(self) -> int:
        return 2**self.depth

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "depth": self.depth,
            "base_channels": self.base_channels,
            "dilation_rates": [int(r) for r in self.dilation_rates],
            "residual_mode": self.residual_mode,
            "seed": int(self.seed),
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["dilation_rates"] = tuple(int(r) for r in d.get("dilation_rates", (1, 2, 3, 4)))
        return cls(**d).validate()


@dataclass
class ParameterSet:
    """
    Learnable tensors keyed by canonical name (`enc1.conv1.weight`), plus the
    batch-norm running statistics keyed by layer name (`enc1.bn1`).
    """

    tensors: dict[str, Tensor] = field(default_factory=dict)
    running: dict[str, RunningStats] = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = dict(sorted(self.tensors.items()))
        self.running = dict(sorted(self.running.items()))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, rs in self.running.items():
            if rs.initialized:
                out[f"{name}.running_mean"] = rs.mean
                out[f"{name}.running_var"] = rs.var
        return out

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self.tensors.items()}

    def replace_arrays(self, arrays: dict[str, np.ndarray]) -> "ParameterSet":
        """New ParameterSet with fresh leaf tensors; running stats are shared."""
        missing = set(self.tensors) - set(arrays)
        if missing:
            raise KeyError(f"Missing parameter arrays: {sorted(missing)}")
        return ParameterSet(
            {k: Tensor(arrays[k], requires_grad=True) for k in self.tensors},
            self.running,
        )

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {k: Tensor(t.data, requires_grad=True) for k, t in self.tensors.items()},
            {
                k: RunningStats(
                    None if rs.mean is None else rs.mean.copy(),
                    None if rs.var is None else rs.var.copy(),
                )
                for k, rs in self.running.items()
            },
        )

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], buffers: dict[str, np.ndarray]):
        running: dict[str, RunningStats] = {}
        for key, arr in buffers.items():
            layer, _, stat = key.rpartition(".")
            rs = running.setdefault(layer, RunningStats())
            if stat == "running_mean":
                rs.mean = np.array(arr, dtype=np.float64)
            elif stat == "running_var":
                rs.var = np.array(arr, dtype=np.float64)
            else:
                raise KeyError(f"Unknown buffer name {key!r}")
        return cls({k: Tensor(v, requires_grad=True) for k, v in arrays.items()}, running)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    output_shape: tuple[int, ...]
    params: int
    detail: str = ""


@dataclass
class Architecture:
    config: ModelConfig
    layers: list[LayerSpec]
    input_hw: tuple[int, int]

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    def summary(self) -> str:
        name_w = max(len(layer.name) for layer in self.layers)
        lines = [
            f"U-Net+DR  depth={self.config.depth}  base_channels={self.config.base_channels}  "
            f"dilations={list(self.config.dilation_rates)}  residual={self.config.residual_mode}",
            f"nominal input: {self.config.in_channels}x{self.input_hw[0]}x{self.input_hw[1]}",
            "-" * (name_w + 48),
        ]
        for layer in self.layers:
            shape = "x".join(str(s) for s in layer.output_shape)
            extra = f"  {layer.detail}" if layer.detail else ""
            lines.append(f"{layer.name:<{name_w}}  {layer.kind:<10} {shape:<14} {layer.params:>9,}{extra}")
        lines.append("-" * (name_w + 48))
        lines.append(f"total parameters: {self.total_params:,}")
        spans = [receptive_field_span(3, r) for r in self.config.dilation_rates]
        lines.append(
            "bottleneck 3x3 kernel spans per dilation: "
            + ", ".join(f"d={r}:{s}x{s}" for r, s in zip(self.config.dilation_rates, spans))
        )
        return "\n".join(lines)


# ============================
# Construction
# ============================


class _Builder:
    def __init__(self, config: ModelConfig, input_hw: tuple[int, int]):
        self.rng = np.random.default_rng(config.seed)
        self.tensors: dict[str, Tensor] = {}
        self.running: dict[str, RunningStats] = {}
        self.layers: list[LayerSpec] = []
        self.hw = input_hw

    def conv(self, name, c_in, c_out, k, *, bias, shape, dilation=1, kind="conv"):
        fan_in = c_in * k * k
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
        self.tensors[f"{name}.weight"] = Tensor(w, requires_grad=True)
        if bias:
            self.tensors[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)
        detail = f"d={dilation} span={receptive_field_span(k, dilation)}" if dilation > 1 else ""
        self.layers.append(
            LayerSpec(name, kind, shape, conv_param_count(c_out, c_in, k, bias), detail)
        )

    def bn(self, name, c, shape):
        self.tensors[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True)
        self.tensors[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True)
        self.running[name] = RunningStats.initial(c)
        self.layers.append(LayerSpec(name, "batchnorm", shape, 2 * c))

    def marker(self, name, kind, shape):
        self.layers.append(LayerSpec(name, kind, shape, 0))


def encoder_out_channels(config: ModelConfig, level: int) -> int:
    """Channels leaving encoder block `level` (concat mode widens by the block input)."""
    out = config.channels(level)
    if config.residual_mode == "concat":
        return encoder_in_channels(config, level) + out
    return out


def encoder_in_channels(config: ModelConfig, level: int) -> int:
    return config.in_channels if level == 1 else encoder_out_channels(config, level - 1)


def build_model(
    config: ModelConfig, *, input_hw: tuple[int, int] = (288, 288)
) -> tuple[ParameterSet, Architecture]:
    """
    Create He-initialized parameters for the U-Net+DR topology.

    input_hw only sets the nominal shapes reported in the architecture
    description; the parameters themselves are size-independent.
    """
    config.validate()
    b = _Builder(config, input_hw)
    h, w = input_hw

    # encoder
    for level in range(1, config.depth + 1):
        c_in = encoder_in_channels(config, level)
        c = config.channels(level)
        shape = (c, h, w)
        p = f"enc{level}"
        b.conv(f"{p}.conv1", c_in, c, 3, bias=False, shape=shape)
        b.bn(f"{p}.bn1", c, shape)
        b.conv(f"{p}.conv2", c, c, 3, bias=False, shape=shape)
        b.bn(f"{p}.bn2", c, shape)
        c_out = encoder_out_channels(config, level)
        if config.residual_mode == "add" and c_in != c:
            b.conv(f"{p}.proj", c_in, c, 1, bias=True, shape=shape, kind="proj")
        b.marker(f"{p}.residual", config.residual_mode, (c_out, h, w))
        h, w = h // 2, w // 2
        b.marker(f"{p}.pool", "maxpool", (c_out, h, w))

    # bottleneck
    c_in = encoder_out_channels(config, config.depth)
    c_b = config.channels(config.depth + 1)
    for rate in config.dilation_rates:
        b.conv(
            f"bottleneck.dil{rate}", c_in, c_b, 3, bias=False, shape=(c_b, h, w),
            dilation=rate, kind="dilated",
        )
    b.marker("bottleneck.sum", "add", (c_b, h, w))
    b.bn("bottleneck.bn", c_b, (c_b, h, w))

    # decoder
    c_prev = c_b
    for level in range(config.depth, 0, -1):
        c = config.channels(level)
        h, w = h * 2, w * 2
        p = f"dec{level}"
        b.marker(f"{p}.upsample", "upsample", (c_prev, h, w))
        b.conv(f"{p}.up_conv", c_prev, c, 3, bias=False, shape=(c, h, w))
        b.bn(f"{p}.up_bn", c, (c, h, w))
        c_skip = encoder_out_channels(config, level)
        b.marker(f"{p}.concat", "concat", (c_skip + c, h, w))
        b.conv(f"{p}.conv1", c_skip + c, c, 3, bias=False, shape=(c, h, w))
        b.bn(f"{p}.bn1", c, (c, h, w))
        b.conv(f"{p}.conv2", c, c, 3, bias=False, shape=(c, h, w))
        b.bn(f"{p}.bn2", c, (c, h, w))
        c_prev = c

    b.conv("head", c_prev, config.num_classes, 1, bias=True, shape=(config.num_classes, h, w))
    b.marker("softmax", "softmax", (config.num_classes, h, w))

    params = ParameterSet(b.tensors, b.running)
    return params, Architecture(config, b.layers, input_hw)


# ============================
# Forward
# ============================


def _conv(params: ParameterSet, name: str, x: Tensor, *, padding=1, dilation=1) -> Tensor:
    bias = params.tensors.get(f"{name}.bias")
    return conv2d(x, params[f"{name}.weight"], bias, padding=padding, dilation=dilation)


def _bn(params, config: ModelConfig, name: str, x: Tensor, mode: str) -> Tensor:
    return batchnorm2d(
        x,
        params[f"{name}.gamma"],
        params[f"{name}.beta"],
        running_stats=params.running[name],
        mode=mode,
        eps=config.bn_eps,
        momentum=config.bn_momentum,
    )


def _conv_bn_relu(params, config, conv_name, bn_name, x, mode) -> Tensor:
    return relu(_bn(params, config, bn_name, _conv(params, conv_name, x), mode))


def encoder_block(params, config: ModelConfig, level: int, x: Tensor, mode: str) -> Tensor:
    p = f"enc{level}"
    h = _conv_bn_relu(params, config, f"{p}.conv1", f"{p}.bn1", x, mode)
    y = _bn(params, config, f"{p}.bn2", _conv(params, f"{p}.conv2", h), mode)
    if config.residual_mode == "concat":
        return concat_channels(x, relu(y))
    shortcut = _conv(params, f"{p}.proj", x, padding=0) if f"{p}.proj.weight" in params else x
    return relu(add(y, shortcut))


def bottleneck_sum(params: ParameterSet, config: ModelConfig, x: Tensor) -> Tensor:
    """Elementwise sum of the parallel dilated 3x3 convolutions (padding = dilation)."""
    total = None
    for rate in config.dilation_rates:
        y = _conv(params, f"bottleneck.dil{rate}", x, padding=rate, dilation=rate)
        total = y if total is None else add(total, y)
    return total


def decoder_block(params, config, level: int, x: Tensor, skip: Tensor, mode: str) -> Tensor:
    p = f"dec{level}"
    up = _conv_bn_relu(params, config, f"{p}.up_conv", f"{p}.up_bn", upsample2d(x), mode)
    h = concat_channels(skip, up)
    h = _conv_bn_relu(params, config, f"{p}.conv1", f"{p}.bn1", h, mode)
    return _conv_bn_relu(params, config, f"{p}.conv2", f"{p}.bn2", h, mode)


def forward(
    params: ParameterSet, config: ModelConfig, batch: Tensor, mode: str = "eval"
) -> Tensor:
    """
    Class probabilities [N, num_classes, H, W] for a batch [N, in_channels, H, W].

    Train mode updates batch-norm running statistics in place; eval mode is pure.
    """
    if mode not in {"train", "eval"}:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if batch.data.ndim != 4:
        raise ValueError(f"forward expects [N, C, H, W], got {batch.shape}")
    _, c, h, w = batch.shape
    if c != config.in_channels:
        raise ValueError(f"input has {c} channels, model expects {config.in_channels}")
    d = config.divisor
    if h % d or w % d:
        raise ValueError(
            f"input {h}x{w} is not divisible by 2^depth = {d} (depth={config.depth})"
        )

    skips = []
    x = batch
    for level in range(1, config.depth + 1):
        x = encoder_block(params, config, level, x, mode)
        skips.append(x)
        x = maxpool2d(x)

    x = relu(_bn(params, config, "bottleneck.bn", bottleneck_sum(params, config, x), mode))

    for level in range(config.depth, 0, -1):
        x = decoder_block(params, config, level, x, skips[level - 1], mode)

    return softmax_channels(_conv(params, "head", x, padding=0))


def predict_labels(probabilities: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax over classes; ties go to the lowest class index."""
    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    if p.ndim != 4:
        raise ValueError(f"predict_labels expects [N, K, H, W], got {p.shape}")
    return p.argmax(axis=1).astype(np.int64)
