"""Differentiable operations on :class:`~mvtk.tensor.Tensor`.

Each op computes its result with numpy, registers a backward closure on the
tape, and reports executed multiplies to an active MAC counter (conv,
matmul/linear, tensor-by-tensor mul). Pointwise nonlinearities and norms are
not tallied.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import MvtkError, ShapeError
from .tensor import Tensor, as_tensor, kink_log_active, record, tally

NORM_EPS = 1e-5


class DTypeError(MvtkError, TypeError):
    pass


def _same_dtype(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise DTypeError(f"mixed precision is not supported: {dt} vs {t.dtype}")


def _scalar_like(v, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(v, dtype=ref.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding.

    ``weight`` is ``(Cout, Cin/groups, kh, kw)``. Depthwise and 1x1 cases
    take dedicated paths; everything else goes through im2col + matmul.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.shape}", dim="rank")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4, got shape {weight.shape}", dim="rank")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}", dim="stride")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}", dim="padding")
    _same_dtype(x, weight)
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups:
        raise ShapeError(f"groups={groups} does not divide Cin={cin}", dim="groups")
    if cout % groups:
        raise ShapeError(f"groups={groups} does not divide Cout={cout}", dim="Cout")
    if cin_g * groups != cin:
        raise ShapeError(f"weight expects Cin={cin_g * groups} but input has Cin={cin}", dim="Cin")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}", dim="Cout")
    ho = _kernels.out_size(h, kh, stride, padding)
    wo = _kernels.out_size(w, kw, stride, padding)
    if ho < 1:
        raise ShapeError(f"kernel height {kh} exceeds padded input height {h + 2 * padding}", dim="H")
    if wo < 1:
        raise ShapeError(f"kernel width {kw} exceeds padded input width {w + 2 * padding}", dim="W")

    xd, wd = x.data, weight.data
    if groups == cin == cout and cin_g == 1:
        w3 = wd.reshape(cout, kh, kw)
        out = _kernels.dw_forward(xd, w3, stride, padding)
        tally("conv", n * cout * kh * kw * ho * wo)

        def conv_bw(g):
            gx, gw = _kernels.dw_backward(np.ascontiguousarray(g), xd, w3, stride, padding)
            return gx, gw.reshape(wd.shape)

    elif kh == kw == 1 and stride == 1 and padding == 0 and groups == 1:
        w2 = wd.reshape(cout, cin)
        xr = xd.reshape(n, cin, h * w)
        out = np.matmul(w2, xr).reshape(n, cout, ho, wo)
        tally("conv", n * cout * cin * h * w)

        def conv_bw(g):
            gr = g.reshape(n, cout, h * w)
            gx = np.matmul(w2.T, gr).reshape(xd.shape)
            gw = np.tensordot(gr, xr, axes=([0, 2], [0, 2]))
            return gx, gw.reshape(wd.shape)

    else:
        cg, og = cin // groups, cout // groups
        colss, outs = [], []
        for gi in range(groups):
            xg = xd if groups == 1 else np.ascontiguousarray(xd[:, gi * cg:(gi + 1) * cg])
            cols = _kernels.im2col(xg, kh, kw, stride, padding)
            wg = wd[gi * og:(gi + 1) * og].reshape(og, -1)
            outs.append(np.matmul(wg, cols))
            colss.append(cols)
            tally("conv", n * og * cols.shape[1] * cols.shape[2])
        out = (outs[0] if groups == 1 else np.concatenate(outs, axis=1)).reshape(n, cout, ho, wo)

        def conv_bw(g):
            gr = g.reshape(n, cout, ho * wo)
            gx = np.empty_like(xd)
            gw = np.empty_like(wd)
            for gi in range(groups):
                wg = wd[gi * og:(gi + 1) * og].reshape(og, -1)
                gg = gr[:, gi * og:(gi + 1) * og]
                gcols = np.matmul(wg.T, gg)
                gx[:, gi * cg:(gi + 1) * cg] = _kernels.col2im(
                    np.ascontiguousarray(gcols), (n, cg, h, w), kh, kw, stride, padding)
                gw[gi * og:(gi + 1) * og] = np.tensordot(gg, colss[gi], axes=([0, 2], [0, 2])).reshape(og, cg, kh, kw)
            return gx, gw

    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
        inputs = (x, weight, bias)

        def backward(g):
            gx, gw = conv_bw(g)
            return gx, gw, g.sum(axis=(0, 2, 3))
    else:
        inputs = (x, weight)
        backward = conv_bw
    return record("conv2d", out, inputs, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """conv2d with one filter per input channel; ``weight`` is ``(C, 1, kh, kw)``."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d input must be NCHW, got shape {x.shape}", dim="rank")
    c = x.shape[1]
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"depthwise weight must be ({c}, 1, kh, kw), got {weight.shape}", dim="Cin")
    return conv2d(x, weight, bias, stride=stride, padding=padding, groups=c)


# ---------------------------------------------------------------- products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}", dim="rank")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}", dim="inner")
    _same_dtype(a, b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}", dim="batch") from e
    tally("matmul", out.size * a.shape[-1])
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return record("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``(dout, din)``."""
    din = x.shape[-1]
    if weight.ndim != 2 or weight.shape[1] != din:
        raise ShapeError(f"linear weight {weight.shape} does not accept input dim {din}", dim="d")
    _same_dtype(x, weight)
    dout = weight.shape[0]
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, din)
    out = x2 @ wd.T
    tally("matmul", x2.shape[0] * din * dout)
    if bias is not None:
        out += bias.data
    out = out.reshape(xd.shape[:-1] + (dout,))

    def backward(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, backward)


# ---------------------------------------------------------------- elementwise

def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _scalar_like(a, b)
    if not isinstance(b, Tensor):
        b = _scalar_like(b, a)
    _same_dtype(a, b)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"operands do not broadcast: {a.shape} vs {b.shape}", dim="shape") from e
    return a, b, shape


def add(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    both = isinstance(a, Tensor) and isinstance(b, Tensor)
    a, b, _ = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad * bd
    if both:
        tally("mul", out.size)
    return record("mul", out, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    log = kink_log_active()
    if log is not None:
        log.append(xd > 0)
    return record("relu", np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return record("silu", xd * s, (x,), lambda g: (g * s * (1 + xd * (1 - s)),))


ACTIVATIONS = {"silu": silu, "relu": relu, "sigmoid": sigmoid}


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", s, (x,),
                  lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, K) logits, got {logits.shape}", dim="rank")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}", dim="N")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return record("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------- normalization

def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift per feature."""
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params must have shape ({d},)", dim="d")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    wd = weight.data
    out = xhat * wd + bias.data
    red = tuple(range(xd.ndim - 1))

    def backward(g):
        gxhat = g * wd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("layer_norm", out, (x, weight, bias), backward)


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor,
               eps: float = NORM_EPS, channel_axis: int = 1) -> Tensor:
    """Normalize each sample over (channels in group) x (all non-batch axes).

    ``channel_axis`` selects which axis holds the affine channels; token
    tensors ``(N, P, S, d)`` use ``channel_axis=-1``.
    """
    xd = np.moveaxis(x.data, channel_axis, 1)
    n, c = xd.shape[:2]
    if groups < 1 or c % groups:
        raise ShapeError(f"groups={groups} does not divide channels={c}", dim="groups")
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"group_norm params must have shape ({c},)", dim="C")
    xg = xd.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * rstd
    cshape = (1, c) + (1,) * (xd.ndim - 2)
    wd = weight.data.reshape(cshape)
    xhat = xh.reshape(xd.shape)
    out = np.moveaxis(xhat * wd + bias.data.reshape(cshape), 1, channel_axis)
    red = (0,) + tuple(range(2, xd.ndim))

    def backward(g):
        g1 = np.moveaxis(g, channel_axis, 1)
        gxh = (g1 * wd).reshape(n, groups, -1)
        gx = rstd * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        gx = np.moveaxis(gx.reshape(xd.shape), 1, channel_axis)
        return gx, (g1 * xhat).sum(axis=red), g1.sum(axis=red)

    return record("group_norm", out, (x, weight, bias), backward)


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = NORM_EPS) -> Tensor:
    """Per-channel normalization of NCHW input.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional); otherwise the
    running buffers are used as-is.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW, got {x.shape}", dim="rank")
    c = x.shape[1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"batch_norm params must have shape ({c},)", dim="C")
    xd = x.data
    wd = weight.data.reshape(1, c, 1, 1)
    red = (0, 2, 3)
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=red, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * unbiased

        def backward(g):
            gxhat = g * wd
            gx = rstd * (gxhat - gxhat.mean(axis=red, keepdims=True)
                         - xhat * (gxhat * xhat).mean(axis=red, keepdims=True))
            return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    else:
        rstd = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(xd.dtype)
        xhat = (xd - running_mean.reshape(1, c, 1, 1).astype(xd.dtype)) * rstd

        def backward(g):
            return g * wd * rstd, (g * xhat).sum(axis=red), g.sum(axis=red)

    out = xhat * wd + bias.data.reshape(1, c, 1, 1)
    return record("batch_norm", out, (x, weight, bias), backward)


# ---------------------------------------------------------------- shape plumbing

def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W: (N, C, H, W) -> (N, C, 1, 1)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}", dim="rank")
    h, w = x.shape[2], x.shape[3]
    shape = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return record("global_avg_pool", out, (x,),
                  lambda g: (np.broadcast_to(g / (h * w), shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}", dim="size") from e
    src = x.shape
    return record("reshape", out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("permute", np.transpose(x.data, axes), (x,),
                  lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    _same_dtype(*tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"cannot concat {t.shape} with {ref} along axis {axis}", dim="shape")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return record("concat", out, tuple(tensors),
                  lambda g: tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis)))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    ax = axis % x.ndim
    if start < 0 or start + length > x.shape[ax]:
        raise ShapeError(f"narrow [{start}, {start + length}) out of range for axis size {x.shape[ax]}", dim="axis")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    shape, dt = x.shape, x.dtype

    def backward(g):
        gx = np.zeros(shape, dtype=dt)
        gx[idx] = g
        return (gx,)

    return record("narrow", x.data[idx], (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                  lambda g: (np.full(shape, g, dtype=g.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                  lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar (not tallied as a MAC)."""
    f = np.asarray(factor, dtype=x.dtype)
    return record("scale", x.data * f, (x,), lambda g: (g * f,))


def attention_scale(head_dim: int) -> float:
    return 1.0 / math.sqrt(head_dim)
