# scripts/tensor_engine.py
from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 4
DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """
    Dense float64 array with an optional gradient.

    The data array is never modified after construction; only `grad`
    accumulates during a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, *, requires_grad: bool = False, copy: bool = True):
        arr = np.array(data, dtype=DTYPE) if copy else np.asarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"Tensor rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ValueError(f"Tensor extents must be positive, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    op: str


_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)


@dataclass
class Tape:
    """
    Records operations in forward order while active:

        with Tape() as tape:
            loss = soft_dice_loss(forward(...), target, cfg)
        backward(loss, tape)

    A tape is bound to the context (thread) that entered it.
    """

    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        self._tokens = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def record(
        self, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn, op: str
    ) -> None:
        self.nodes.append(Node(tuple(inputs), output, backward_fn, op))

    def produced(self, t: Tensor) -> bool:
        return any(node.output is t for node in self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _emit(
    data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, op: str
) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad, copy=False)
    if needs_grad:
        tape.record(inputs, out, backward_fn, op)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, tape: Tape) -> None:
    """
    Reverse-mode sweep over `tape`, accumulating d(loss)/d(t) into `t.grad`
    for every tensor with requires_grad that the loss depends on.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced through the given tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(tape.nodes):
        g_out = pending.pop(id(node.output), None)
        if g_out is None:
            continue
        out = node.output
        out.grad = g_out if out.grad is None else out.grad + g_out

        for t, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise ValueError(
                    f"{node.op}: gradient shape {g.shape} does not match input {t.shape}"
                )
            key = id(t)
            pending[key] = g if key not in pending else pending[key] + g
            holders[key] = t

    # whatever is left belongs to leaves (parameters and inputs)
    for key, g in pending.items():
        t = holders[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


# ----------------------------------------------------------------------------
# Elementwise and reduction primitives
# ----------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _emit(
        a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul"
    )


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _emit(
        np.array(x.data.sum()),
        (x,),
        lambda g: (np.full(x.shape, float(g), dtype=DTYPE),),
        "sum_all",
    )


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# ----------------------------------------------------------------------------
# Convolution
# ----------------------------------------------------------------------------


def receptive_field_span(kernel_size: int, dilation: int = 1) -> int:
    """Spatial extent covered by one dilated kernel: d*(k-1)+1."""
    return dilation * (kernel_size - 1) + 1


def conv_output_size(size: int, kernel_size: int, padding: int, dilation: int) -> int:
    return size + 2 * padding - dilation * (kernel_size - 1)


def conv_param_count(out_ch: int, in_ch: int, kernel_size: int, bias: bool = True) -> int:
    return out_ch * in_ch * kernel_size * kernel_size + (out_ch if bias else 0)


def _im2col(x_pad: np.ndarray, k: int, dilation: int, h_out: int, w_out: int) -> np.ndarray:
    n, c, _, _ = x_pad.shape
    s_n, s_c, s_h, s_w = x_pad.strides
    patches = np.lib.stride_tricks.as_strided(
        x_pad,
        shape=(n, c, k, k, h_out, w_out),
        strides=(s_n, s_c, dilation * s_h, dilation * s_w, s_h, s_w),
        writeable=False,
    )
    return patches.reshape(n, c * k * k, h_out * w_out)


def _col2im(
    cols: np.ndarray, padded_shape: tuple, k: int, dilation: int, h_out: int, w_out: int
) -> np.ndarray:
    n, c, hp, wp = padded_shape
    out = np.zeros(padded_shape, dtype=DTYPE)
    cols = cols.reshape(n, c, k, k, h_out, w_out)
    for i in range(k):
        h0 = i * dilation
        for j in range(k):
            w0 = j * dilation
            out[:, :, h0 : h0 + h_out, w0 : w0 + w_out] += cols[:, :, i, j]
    return out


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    *,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """
    Stride-1 cross-correlation with zero padding and dilation.

    x: [N, Ci, H, W], kernel: [Co, Ci, k, k], bias: [Co] or None.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, ci, h, w = x.shape
    co, ci_k, k, k2 = kernel.shape
    if ci != ci_k:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has Ci={ci}, "
            f"kernel {kernel.shape} expects Ci={ci_k}"
        )
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if dilation < 1 or padding < 0:
        raise ValueError(f"invalid dilation={dilation} / padding={padding}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match Co={co}")

    h_out = conv_output_size(h, k, padding, dilation)
    w_out = conv_output_size(w, k, padding, dilation)
    if h_out < 1 or w_out < 1:
        raise ValueError(
            f"conv2d output would be empty: input {h}x{w}, kernel span "
            f"{receptive_field_span(k, dilation)}, padding {padding}"
        )

    x_pad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(x_pad, k, dilation, h_out, w_out)  # [N, Ci*k*k, L]
    w_mat = kernel.data.reshape(co, -1)
    out = np.matmul(w_mat, cols).reshape(n, co, h_out, w_out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _backward(g):
        g_flat = g.reshape(n, co, h_out * w_out)
        g_kernel = np.einsum("nol,ncl->oc", g_flat, cols).reshape(kernel.shape)
        g_cols = np.matmul(w_mat.T, g_flat)
        g_pad = _col2im(g_cols, x_pad.shape, k, dilation, h_out, w_out)
        g_x = g_pad[:, :, padding : padding + h, padding : padding + w]
        g_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return g_x, g_kernel, g_bias

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit(out, inputs, _backward, "conv2d")


# ----------------------------------------------------------------------------
# Normalization
# ----------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Per-channel running mean/variance; None until initialized."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @classmethod
    def initial(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))

    @property
    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    *,
    running_stats: RunningStats,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """
    Train mode: normalize each channel with batch statistics over (N, H, W)
    and update `running_stats` in place (new = (1-momentum)*old + momentum*batch).
    Uninitialized statistics start from mean 0 and variance 1.
    Eval mode: normalize with the running statistics.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm2d gamma/beta {gamma.shape}/{beta.shape} do not match C={c}"
        )
    gamma_b = gamma.data[None, :, None, None]

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError(f"batchnorm2d train mode needs N*H*W >= 2, got {m}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]

        if not running_stats.initialized:
            running_stats.mean = np.zeros(c, dtype=DTYPE)
            running_stats.var = np.ones(c, dtype=DTYPE)
        running_stats.mean = (1 - momentum) * running_stats.mean + momentum * mean
        running_stats.var = (1 - momentum) * running_stats.var + momentum * var

        def _backward(g):
            g_hat = g * gamma_b
            sum_g = g_hat.sum(axis=(0, 2, 3), keepdims=True)
            sum_gx = (g_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
            g_x = (inv_std[None, :, None, None] / m) * (m * g_hat - sum_g - x_hat * sum_gx)
            return g_x, (g * x_hat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    elif mode == "eval":
        if not running_stats.initialized:
            raise ValueError("batchnorm2d eval mode needs initialized running statistics")
        inv_std = 1.0 / np.sqrt(running_stats.var + eps)
        x_hat = (x.data - running_stats.mean[None, :, None, None]) * inv_std[
            None, :, None, None
        ]

        def _backward(g):
            g_x = g * gamma_b * inv_std[None, :, None, None]
            return g_x, (g * x_hat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    out = gamma_b * x_hat + beta.data[None, :, None, None]
    return _emit(out, (x, gamma, beta), _backward, "batchnorm2d")


# ----------------------------------------------------------------------------
# Resampling and channel plumbing
# ----------------------------------------------------------------------------


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 / stride 2. Ties route the gradient to the first element in row-major order."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even H and W, got {h}x{w}")

    windows = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        g_win = np.zeros(windows.shape, dtype=DTYPE)
        np.put_along_axis(g_win, arg[..., None], g[..., None], axis=-1)
        g_x = (
            g_win.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (g_x,)

    return _emit(out, (x,), _backward, "maxpool2d")


def upsample2d(x: Tensor) -> Tensor:
    """Nearest-neighbour x2."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"upsample2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit(out, (x,), _backward, "upsample2d")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError(f"concat_channels expects 4-D inputs, got {a.shape} and {b.shape}")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ValueError(
            f"concat_channels: non-channel extents differ, {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1 with max subtraction."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"softmax_channels expects [N,K,H,W], got {x.shape}")
    if x.shape[1] < 2:
        raise ValueError(f"softmax_channels needs K >= 2, got K={x.shape[1]}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit(p, (x,), _backward, "softmax_channels")
