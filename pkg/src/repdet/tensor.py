"""Dense NCHW kernels.

Tensors are plain rank-4 ``numpy`` arrays in float32 (production path) or
float64 (oracles and gradient checks).  Convolution is cross-correlation
with zero padding, the convention the fusion algebra in :mod:`repdet.reparam`
relies on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = {"fp32": np.float32, "fp64": np.float64}


class ShapeError(ValueError):
    """Raised when tensor shapes disagree; ``dim`` names the offending dimension."""

    def __init__(self, message: str, dim: str = ""):
        super().__init__(message)
        self.dim = dim


def as_tensor(x, dtype=None) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 NCHW tensor, got shape {x.shape}", "rank")
    if min(x.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {x.shape}", "shape")
    return x


@dataclass
class ConvSpec:
    weight: np.ndarray  # (out, in/groups, k, k)
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"weight must be (out, in/g, k, k), got {w.shape}", "weight")
        if self.out_channels % self.groups:
            raise ShapeError("out_channels not divisible by groups", "groups")
        if self.padding < 0 or self.stride < 1:
            raise ValueError("padding must be >= 0 and stride >= 1")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)", "bias")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == n):
            raise ShapeError("batch-norm vectors differ in length", "channels")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be >= 0")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def scale_shift(self):
        """Per-channel (scale, shift) such that bn(x) = scale * x + shift."""
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return scale, self.beta - self.running_mean * scale


def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"padded input {x.shape[2:]} smaller than kernel {k}", "spatial")
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, k, k)


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, conv expects {spec.in_channels}", "channels"
        )
    w = spec.weight.astype(x.dtype, copy=False)
    k, g = spec.kernel_size, spec.groups
    win = _windows(x, k, spec.stride, spec.padding)
    n, c, ho, wo = win.shape[:4]
    if g == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
        out = out.transpose(0, 3, 1, 2)
    else:
        cg, og = c // g, spec.out_channels // g
        win = win.reshape(n, g, cg, ho, wo, k, k)
        wg = w.reshape(g, og, cg, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", win, wg, optimize=True)
        out = out.reshape(n, g * og, ho, wo)
    if spec.bias is not None:
        out = out + spec.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_grad_weight(x: np.ndarray, grad_out: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """dL/dW for ``conv2d(x, spec)`` given dL/dy (closed form, no autodiff)."""
    k, g = spec.kernel_size, spec.groups
    win = _windows(as_tensor(x), k, spec.stride, spec.padding)
    n, c, ho, wo = win.shape[:4]
    if grad_out.shape != (n, spec.out_channels, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output", "grad")
    cg, og = c // g, spec.out_channels // g
    win = win.reshape(n, g, cg, ho, wo, k, k)
    go = grad_out.reshape(n, g, og, ho, wo)
    gw = np.einsum("ngchwij,ngohw->gocij", win, go, optimize=True)
    return gw.reshape(spec.weight.shape)


def batch_norm_infer(x: np.ndarray, bn: BatchNormParams) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != bn.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, bn has {bn.channels}", "channels")
    scale, shift = bn.scale_shift()
    return x * scale.astype(x.dtype)[None, :, None, None] + shift.astype(x.dtype)[None, :, None, None]


def sigmoid(x):
    x = np.asarray(x)
    # split to avoid overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def activation(kind: str, x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "lrelu":
        if not 0 < slope < 1:
            raise ValueError("lrelu slope must lie in (0, 1)")
        return np.where(x > 0, x, x * x.dtype.type(slope))
    if kind == "silu":
        return x * sigmoid(x)
    if kind in ("none", "identity", None):
        return x
    raise ValueError(f"unknown activation {kind!r}")


def upsample2x_nearest(x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def concat_channels(*tensors: np.ndarray) -> np.ndarray:
    ts = [as_tensor(t) for t in tensors]
    n, _, h, w = ts[0].shape
    for t in ts[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ShapeError(f"cannot concat {ts[0].shape} with {t.shape}", "spatial")
    return np.concatenate(ts, axis=1)


def maxpool2d(x: np.ndarray, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    x = as_tensor(x)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=-np.inf)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


# raw tensor files: 4 x little-endian u32 dims, then little-endian fp32 NCHW payload
_HEADER = struct.Struct("<4I")


def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError("raw format stores rank-4 tensors only", "rank")
    return _HEADER.pack(*x.shape) + np.ascontiguousarray(x, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Decode one raw tensor at ``offset``; returns ``(array, next_offset)``."""
    if len(buf) - offset < _HEADER.size:
        raise ValueError("truncated tensor header")
    dims = _HEADER.unpack_from(buf, offset)
    n = int(np.prod(dims))
    start = offset + _HEADER.size
    end = start + 4 * n
    if end > len(buf):
        raise ValueError(f"truncated tensor payload: need {end - start} bytes")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=start).reshape(dims)
    return arr.astype(np.float32), end


def save_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())[0]
