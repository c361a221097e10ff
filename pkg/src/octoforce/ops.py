"""Differentiable kernels used by every model family.

Convolutions are cross-correlations (no kernel flip) with zero-padded
SAME semantics: output extent = ceil(input extent / stride). Spatial
work is lowered to BLAS matmuls through strided window views, so the
kernels stay fast on CPU without any compiled extension.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, make_op_output

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


def _same_pad(extent: int, k: int, stride: int) -> tuple[int, int, int]:
    """(out_extent, pad_begin, pad_end) for zero-padded SAME convolution."""
    out = -(-extent // stride)  # ceil
    total = max((out - 1) * stride + k - extent, 0)
    return out, total // 2, total - total // 2


def _conv_1x1(x: Tensor, kernel: Tensor, bias: Optional[Tensor], stride: int, nsp: int) -> Tensor:
    """Pointwise conv: a channel matmul over (optionally strided) voxels."""
    c_in, c_out = kernel.shape[nsp], kernel.shape[nsp + 1]
    sel = (slice(None),) + (slice(None, None, stride),) * nsp + (slice(None),)
    xin = np.ascontiguousarray(x.data[sel]) if stride != 1 else x.data
    wmat = kernel.data.reshape(c_in, c_out)
    out_data = xin.reshape(-1, c_in) @ wmat
    out_shape = xin.shape[:-1] + (c_out,)
    if bias is not None:
        out_data += bias.data

    def backward(out: Tensor) -> None:
        g = out.grad.reshape(-1, c_out)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if kernel.requires_grad:
            kernel.accumulate_grad((xin.reshape(-1, c_in).T @ g).reshape(kernel.shape))
        if x.requires_grad:
            dxin = (g @ wmat.T).reshape(xin.shape)
            if stride == 1:
                x.accumulate_grad(dxin)
            else:
                dx = np.zeros_like(x.data)
                dx[sel] = dxin
                x.accumulate_grad(dx)

    return make_op_output(out_data.reshape(out_shape), (x, kernel, bias), backward)


def _conv_nd(x: Tensor, kernel: Tensor, bias: Optional[Tensor], stride: int, nsp: int) -> Tensor:
    """Shared conv implementation over `nsp` spatial axes (2 or 3)."""
    k = kernel.shape[0]
    if kernel.ndim != nsp + 2 or any(kernel.shape[i] != k for i in range(nsp)):
        raise ShapeError(f"conv: expected {nsp + 2}-d cubic/square kernel, got {kernel.shape}")
    if k not in (1, 3):
        raise ShapeError(f"conv: kernel extent must be 1 or 3, got {k}")
    if stride not in (1, 2):
        raise ShapeError(f"conv: stride must be 1 or 2, got {stride}")
    if x.ndim != nsp + 2:
        raise ShapeError(f"conv: expected {nsp + 2}-d input [N, spatial..., C], got {x.shape}")
    c_in, c_out = kernel.shape[nsp], kernel.shape[nsp + 1]
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv: input has {x.shape[-1]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv: bias shape {bias.shape} != ({c_out},)")
    if k == 1:
        return _conv_1x1(x, kernel, bias, stride, nsp)

    spatial = x.shape[1:1 + nsp]
    outs, pads = [], []
    for e in spatial:
        o, pb, pe = _same_pad(e, k, stride)
        outs.append(o)
        pads.append((pb, pe))
    pad_spec = [(0, 0)] + pads + [(0, 0)]
    xp = np.pad(x.data, pad_spec)

    # Lower to one BLAS matmul: windows of the padded input against the
    # kernel flattened to (k^nsp * Cin, Cout). The materialized column
    # matrix is kept only when a backward pass will need it.
    win = sliding_window_view(xp, (k,) * nsp, axis=tuple(range(1, 1 + nsp)))
    sub = win[(slice(None),) + (slice(None, None, stride),) * nsp]
    assert sub.shape[1:1 + nsp] == tuple(outs)
    # (N, out..., C, k...) -> (N, out..., k..., C) so kernel flattening matches
    perm = tuple(range(1 + nsp)) + tuple(range(2 + nsp, 2 + 2 * nsp)) + (1 + nsp,)
    cols = np.ascontiguousarray(sub.transpose(perm)).reshape(-1, k ** nsp * c_in)
    wmat = kernel.data.reshape(-1, c_out)
    out_data = cols @ wmat
    out_shape = (x.shape[0],) + tuple(outs) + (c_out,)
    if bias is not None:
        out_data += bias.data
    xp_shape = xp.shape

    def backward(out: Tensor) -> None:
        g = out.grad
        gmat = g.reshape(-1, c_out)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gmat.sum(axis=0))
        if kernel.requires_grad:
            kernel.accumulate_grad((cols.T @ gmat).reshape(kernel.shape))
        if x.requires_grad:
            # one gemm for all window offsets, then strided scatter-add
            e = (gmat @ wmat.T).reshape(g.shape[:-1] + (k,) * nsp + (c_in,))
            dxp = np.zeros(xp_shape, dtype=g.dtype)
            for idx in np.ndindex(*(k,) * nsp):
                sl = tuple(slice(i, i + (o - 1) * stride + 1, stride) for i, o in zip(idx, outs))
                dxp[(slice(None),) + sl + (slice(None),)] += e[(slice(None),) * (1 + nsp) + idx]
            unpad = tuple(slice(pb, pb + ext) for (pb, _), ext in zip(pads, spatial))
            x.accumulate_grad(dxp[(slice(None),) + unpad + (slice(None),)])

    # make_op_output drops the closure (and with it `cols`) when no input
    # requires a gradient, so inference passes never retain column matrices
    return make_op_output(out_data.reshape(out_shape), (x, kernel, bias), backward)


def conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """3D convolution: [N,W,H,D,Cin] x [k,k,k,Cin,Cout] -> [N,W',H',D',Cout]."""
    return _conv_nd(x, kernel, bias, stride, nsp=3)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """2D convolution: [N,W,H,Cin] x [k,k,Cin,Cout] -> [N,W',H',Cout]."""
    return _conv_nd(x, kernel, bias, stride, nsp=2)


@dataclass
class BNState:
    """Running statistics for one batch-norm layer (per channel)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, channels: int, momentum: float = BN_MOMENTUM, dtype=np.float32) -> "BNState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)

    def copy(self) -> "BNState":
        return BNState(self.mean.copy(), self.var.copy(), self.momentum)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState,
               mode: str = "train", eps: float = BN_EPSILON) -> Tensor:
    """Normalize over all axes but the channel axis.

    Train mode uses batch statistics and folds them into the running
    estimates (side effect on ``state``); infer mode reads the running
    estimates only. Biased variance throughout.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'infer', got {mode!r}")
    f = x.shape[-1]
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({f},), got {gamma.shape}/{beta.shape}")
    axes = tuple(range(x.ndim - 1))

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.mean = (m * state.mean + (1.0 - m) * mu).astype(state.mean.dtype)
        state.var = (m * state.var + (1.0 - m) * var).astype(state.var.dtype)
    else:
        mu = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)

    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv
    out_data = gamma.data * xhat + beta.data
    m_count = x.data.size // f

    def backward(out: Tensor) -> None:
        g = out.grad
        gx = g * xhat
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma.accumulate_grad(gx.sum(axis=axes))
        if x.requires_grad:
            if mode == "train":
                dx = g - g.mean(axis=axes)
                dx -= xhat * gx.mean(axis=axes)
                dx *= gamma.data * inv
            else:
                dx = g * (gamma.data * inv)
            x.accumulate_grad(dx)

    return make_op_output(out_data, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(out: Tensor) -> None:
        x.accumulate_grad(out.grad * mask)

    return make_op_output(np.where(mask, x.data, np.asarray(0, dtype=x.dtype)), (x,), backward)


def gap(x: Tensor) -> Tensor:
    """Global average pooling over all spatial axes: [N, spatial..., F] -> [N, F]."""
    if x.ndim < 3:
        raise ShapeError(f"gap: expected at least [N, spatial, F], got {x.shape}")
    axes = tuple(range(1, x.ndim - 1))
    count = int(np.prod([x.shape[a] for a in axes]))

    def backward(out: Tensor) -> None:
        shape = (x.shape[0],) + (1,) * len(axes) + (x.shape[-1],)
        x.accumulate_grad(np.broadcast_to(out.grad.reshape(shape) / count, x.shape).copy())

    return make_op_output(x.data.mean(axis=axes), (x,), backward)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer: [N,Fin] @ [Fin,Fout] + [Fout]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: incompatible shapes {x.shape} @ {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    out_data = x.data @ weight.data
    if bias is not None:
        out_data += bias.data

    def backward(out: Tensor) -> None:
        g = out.grad
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if weight.requires_grad:
            weight.accumulate_grad(x.data.T @ g)
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data.T)

    return make_op_output(out_data, (x, weight, bias), backward)


def concat_channels(t1: Tensor, t2: Tensor) -> Tensor:
    """Channel concatenation; t1's channels come first."""
    if t1.shape[:-1] != t2.shape[:-1]:
        raise ShapeError(f"concat_channels: leading shape mismatch {t1.shape} vs {t2.shape}")
    f1 = t1.shape[-1]

    def backward(out: Tensor) -> None:
        t1.accumulate_grad(out.grad[..., :f1])
        t2.accumulate_grad(out.grad[..., f1:])

    return make_op_output(np.concatenate([t1.data, t2.data], axis=-1), (t1, t2), backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error, averaged over outputs and over the batch."""
    if pred.shape != target.shape or pred.ndim != 2:
        raise ShapeError(f"mse_loss: expected matching [N,d] shapes, got {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    scale = 1.0 / diff.size  # 1/(d * N_B)

    def backward(out: Tensor) -> None:
        g = out.grad.reshape(-1)[0]
        if pred.requires_grad:
            pred.accumulate_grad((2.0 * scale) * diff * g)
        if target.requires_grad:
            target.accumulate_grad((-2.0 * scale) * diff * g)

    return make_op_output(np.asarray((diff * diff).sum() * scale, dtype=pred.dtype).reshape(()),
                          (pred, target), backward)
