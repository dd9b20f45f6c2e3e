"""Dense float32 tensor kernels for CNN forward passes.

Every layer type needed by the VGG-19 and Inception-v3 forward passes is
implemented here as a pure function on numpy arrays. Feature maps are
(C, H, W) float32, matrices (rows, cols), vectors (N,), all C-order.

Conventions baked in (they match what mainstream pretrained checkpoints
assume):
  - conv2d is cross-correlation, no kernel flip
  - maxpool2d pads with -inf, so padding never wins the max
  - avgpool2d excludes padded positions from the divisor by default;
    pass include_pad=True for the include-pad variant some reference
    models use in their pooling branches
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError

__all__ = [
    "ConvParams",
    "BatchNormParams",
    "as_tensor",
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "batchnorm_infer",
    "relu",
    "concat_channels",
    "linear",
    "softmax",
    "flatten",
]


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=np.float32)


@dataclass
class ConvParams:
    """Weights and geometry of one convolution layer.

    weights: (out_channels, in_channels, kH, kW); bias: (out_channels,) or None.
    """

    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        if self.weights.ndim != 4:
            raise ShapeMismatchError(
                f"conv weights must be rank 4 (out,in,kH,kW), got shape {self.weights.shape}"
            )
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
            if self.bias.shape != (self.weights.shape[0],):
                raise ShapeMismatchError(
                    f"conv bias shape {self.bias.shape} does not match "
                    f"out_channels {self.weights.shape[0]}"
                )
        if min(self.stride) < 1:
            raise ShapeMismatchError(f"stride must be positive, got {self.stride}")
        if min(self.padding) < 0:
            raise ShapeMismatchError(f"padding must be non-negative, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


@dataclass
class BatchNormParams:
    """Inference-mode batch normalization constants, all shaped (channels,)."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3

    def __post_init__(self):
        self.gamma = as_tensor(self.gamma)
        self.beta = as_tensor(self.beta)
        self.running_mean = as_tensor(self.running_mean)
        self.running_var = as_tensor(self.running_var)
        n = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != n:
                raise ShapeMismatchError(
                    f"batchnorm {name} shape {getattr(self, name).shape} != gamma shape {n}"
                )
        if self.gamma.ndim != 1:
            raise ShapeMismatchError(f"batchnorm vectors must be rank 1, got shape {n}")
        if np.any(self.running_var < 0):
            raise ShapeMismatchError("batchnorm running_var has negative entries")
        if not self.epsilon > 0:
            raise ShapeMismatchError(f"batchnorm epsilon must be > 0, got {self.epsilon}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _check_chw(x: np.ndarray, op: str) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeMismatchError(f"{op} expects a (C,H,W) tensor, got shape {x.shape}")
    return x


def _out_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _window_geometry(x, kernel, stride, padding, op):
    """Validate pooling/conv window geometry, return (H_out, W_out)."""
    _, h, w = x.shape
    (kh, kw), (sh, sw), (ph, pw) = kernel, stride, padding
    if kh < 1 or kw < 1 or sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeMismatchError(
            f"{op}: invalid geometry kernel={kernel} stride={stride} padding={padding}"
        )
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeMismatchError(
            f"{op}: kernel {kernel} larger than padded input "
            f"({h + 2 * ph}, {w + 2 * pw}) for input shape {x.shape}"
        )
    ho, wo = _out_extent(h, kh, sh, ph), _out_extent(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"{op}: output extent ({ho}, {wo}) < 1 for input shape {x.shape}, "
            f"kernel={kernel} stride={stride} padding={padding}"
        )
    return ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Unfold padded (C,Hp,Wp) into a (C*kh*kw, ho*wo) column matrix."""
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """2-D cross-correlation of a (C,H,W) input with an (O,C,kH,kW) kernel bank.

    Output extent per axis is floor((H + 2p - k) / s) + 1. Implemented as
    im2col + one GEMM; the BLAS accumulation order is fixed, so repeated
    calls are bit-identical.
    """
    x = _check_chw(x, "conv2d")
    if x.shape[0] != params.in_channels:
        raise ShapeMismatchError(
            f"conv2d: input has {x.shape[0]} channels but kernel expects "
            f"{params.in_channels}"
        )
    kh, kw = params.weights.shape[2], params.weights.shape[3]
    sh, sw = params.stride
    ph, pw = params.padding
    ho, wo = _window_geometry(x, (kh, kw), (sh, sw), (ph, pw), "conv2d")
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    out = params.weights.reshape(params.out_channels, -1) @ cols
    if params.bias is not None:
        out += params.bias[:, None]
    return out.reshape(params.out_channels, ho, wo)


def _pool_stack(xp, kernel, stride, ho, wo):
    (kh, kw), (sh, sw) = kernel, stride
    c = xp.shape[0]
    stack = np.empty((kh * kw, c, ho, wo), dtype=xp.dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            stack[k] = xp[:, i : i + sh * ho : sh, j : j + sw * wo : sw]
            k += 1
    return stack


def _check_pool_padding(kernel, padding, op):
    # pad > kernel/2 would admit windows made entirely of padding
    if padding[0] * 2 > kernel[0] or padding[1] * 2 > kernel[1]:
        raise ShapeMismatchError(
            f"{op}: padding {padding} exceeds half the kernel {kernel}"
        )


def maxpool2d(
    x: np.ndarray,
    kernel: tuple[int, int],
    stride: tuple[int, int] | None = None,
    padding: tuple[int, int] = (0, 0),
) -> np.ndarray:
    """Max over sliding windows; padding acts as -inf and can never win."""
    x = _check_chw(x, "maxpool2d")
    stride = stride or kernel
    _check_pool_padding(kernel, padding, "maxpool2d")
    ho, wo = _window_geometry(x, kernel, stride, padding, "maxpool2d")
    ph, pw = padding
    if ph or pw:
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    else:
        xp = x
    return _pool_stack(xp, kernel, stride, ho, wo).max(axis=0)


def avgpool2d(
    x: np.ndarray,
    kernel: tuple[int, int],
    stride: tuple[int, int] | None = None,
    padding: tuple[int, int] = (0, 0),
    include_pad: bool = False,
) -> np.ndarray:
    """Mean over sliding windows.

    With include_pad=False (default) the divisor is the number of real
    input elements under the window; with True it is always kH*kW.
    """
    x = _check_chw(x, "avgpool2d")
    stride = stride or kernel
    _check_pool_padding(kernel, padding, "avgpool2d")
    ho, wo = _window_geometry(x, kernel, stride, padding, "avgpool2d")
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    sums = _pool_stack(xp, kernel, stride, ho, wo).sum(axis=0)
    if include_pad or not (ph or pw):
        return sums / np.float32(kernel[0] * kernel[1])
    ones = np.pad(np.ones((1,) + x.shape[1:], dtype=np.float32), ((0, 0), (ph, ph), (pw, pw)))
    counts = _pool_stack(ones, kernel, stride, ho, wo).sum(axis=0)
    return sums / counts


def batchnorm_infer(x: np.ndarray, params: BatchNormParams) -> np.ndarray:
    """Per-channel gamma * (x - mean) / sqrt(var + eps) + beta."""
    x = _check_chw(x, "batchnorm_infer")
    if x.shape[0] != params.channels:
        raise ShapeMismatchError(
            f"batchnorm_infer: input has {x.shape[0]} channels but params have "
            f"{params.channels}"
        )
    inv = (1.0 / np.sqrt(params.running_var.astype(np.float64) + params.epsilon)).astype(
        np.float32
    )
    out = params.gamma[:, None, None] * (x - params.running_mean[:, None, None])
    out *= inv[:, None, None]
    out += params.beta[:, None, None]
    return out


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0), any rank."""
    return np.maximum(as_tensor(x), np.float32(0))


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    """Stack (C_i, H, W) tensors along the channel axis, argument order."""
    if not xs:
        raise ShapeMismatchError("concat_channels: empty input list")
    xs = [_check_chw(x, "concat_channels") for x in xs]
    spatial = {x.shape[1:] for x in xs}
    if len(spatial) > 1:
        raise ShapeMismatchError(
            "concat_channels: spatial extents differ across inputs: "
            + ", ".join(str(x.shape) for x in xs)
        )
    return np.concatenate(xs, axis=0)


def linear(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map W @ x + b with W (M,N), x (N,), b (M,)."""
    x = as_tensor(x)
    weights = as_tensor(weights)
    bias = as_tensor(bias)
    if x.ndim != 1 or weights.ndim != 2 or bias.ndim != 1:
        raise ShapeMismatchError(
            f"linear: expected x (N,), W (M,N), b (M,); got {x.shape}, "
            f"{weights.shape}, {bias.shape}"
        )
    if weights.shape[1] != x.shape[0] or weights.shape[0] != bias.shape[0]:
        raise ShapeMismatchError(
            f"linear: W shape {weights.shape} incompatible with x {x.shape} "
            f"and b {bias.shape}"
        )
    return weights @ x + bias


def softmax(x: np.ndarray) -> np.ndarray:
    """Max-shifted softmax; stable for logit magnitudes up to ~1e4."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ShapeMismatchError(f"softmax expects a vector, got shape {x.shape}")
    z = x.astype(np.float64)
    z -= z.max()
    e = np.exp(z)
    return (e / e.sum()).astype(np.float32)


def flatten(x: np.ndarray) -> np.ndarray:
    """Row-major linearization to a vector."""
    return as_tensor(x).reshape(-1)
