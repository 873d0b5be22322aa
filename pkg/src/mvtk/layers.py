"""Neural network layers built on :mod:`mvtk.ops`.

Modules own :class:`Parameter` tensors and numpy buffers, switch between
train/eval behaviour, and know their own analytic cost: ``profile(shape,
prof, name)`` appends rows to a :class:`mvtk.cost.Profiler` and returns the
output shape without executing anything.

Token tensors are ``(N, P, S, d)``: ``P = ph*pw`` pixel offsets inside a
patch, ``S`` patches, ``d`` features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tensor

INIT_STD = 0.02


class Parameter(Tensor):
    """A leaf tensor that requires grad and is discovered by :meth:`Module.parameters`."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        yield from vars(self).items()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self._children():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
        for key, val in getattr(self, "_buffers", {}).items():
            yield prefix + key, val

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{key}.")

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, in a stable order."""
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}", dim="names")
        for name, arr in arrays.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != arr.shape:
                raise ShapeError(f"{name}: expected shape {target.shape}, got {arr.shape}", dim=name)
            if name in own:
                own[name].data = np.array(arr, dtype=arr.dtype)
            else:
                target[...] = arr
        dtypes = {a.dtype for a in arrays.values()}
        if len(dtypes) == 1:
            self.to(dtypes.pop())

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        dtype = np.dtype(dtype)
        for _, m in self.named_modules():
            for key, val in vars(m).items():
                if isinstance(val, Parameter) and val.data.dtype != dtype:
                    val.data = val.data.astype(dtype)
                    val.grad = None
            bufs = getattr(m, "_buffers", None)
            if bufs:
                for key in bufs:
                    bufs[key] = bufs[key].astype(dtype)
        return self

    @property
    def dtype(self):
        for p in self.parameters():
            return p.dtype
        return np.dtype(np.float32)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def profile(self, shape: tuple, prof, name: str) -> tuple:
        raise NotImplementedError(type(self).__name__)


class ModuleList(Module):
    def __init__(self, modules=()):
        self.items = list(modules)

    def _children(self):
        for i, m in enumerate(self.items):
            yield str(i), m

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_weights(module: Module, seed: int = 0, std: float = INIT_STD) -> Module:
    """Deterministic init: truncated normal for conv/linear weights, zeros for
    biases, ones/zeros for norm affine."""
    rng = np.random.default_rng(seed)
    for _, m in module.named_modules():
        if isinstance(m, (Conv2d, Linear)):
            m.weight.data = _trunc_normal(rng, m.weight.shape, std).astype(m.weight.dtype)
            if m.bias is not None:
                m.bias.data = np.zeros_like(m.bias.data)
        elif isinstance(m, (BatchNorm2d, LayerNorm, GroupNorm)):
            m.weight.data = np.ones_like(m.weight.data)
            m.bias.data = np.zeros_like(m.bias.data)
    return module


def _act_rows(prof, name, act, shape):
    if act:
        prof.pointwise(name, act, shape)


# ---------------------------------------------------------------- conv + norm


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, groups: int = 1, bias: bool = False):
        if kernel % 2 == 0:
            raise ConfigError(f"only odd kernels are supported, got {kernel}")
        if cin % groups or cout % groups:
            raise ConfigError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
        self.cin, self.cout, self.kernel, self.stride, self.groups = cin, cout, kernel, stride, groups
        self.padding = kernel // 2
        self.weight = Parameter(np.zeros((cout, cin // groups, kernel, kernel)))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.cin == self.cout and self.groups > 1

    def out_shape(self, shape):
        n, c, h, w = shape
        if c != self.cin:
            raise ShapeError(f"conv expects {self.cin} input channels, got {c}", dim="Cin")
        k, s, p = self.kernel, self.stride, self.padding
        return (n, self.cout, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def profile(self, shape, prof, name):
        out = self.out_shape(shape)
        macs = self.cout * (self.cin // self.groups) * self.kernel ** 2 * out[2] * out[3]
        prof.row(name, "dwconv" if self.depthwise else "conv", out, self.param_count(), macs)
        return out


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1):
        self.c, self.momentum = c, momentum
        self.weight = Parameter(np.ones(c))
        self.bias = Parameter(np.zeros(c))
        self._buffers = {"running_mean": np.zeros(c, np.float32), "running_var": np.ones(c, np.float32)}

    def forward(self, x):
        return ops.batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training, self.momentum)

    def profile(self, shape, prof, name):
        prof.row(name, "batchnorm", shape, self.param_count(), 0)
        prof.pointwise(name, "batchnorm", shape, row=False)
        return shape


class LayerNorm(Module):
    def __init__(self, d: int):
        self.weight = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias)

    def profile(self, shape, prof, name):
        prof.row(name, "layernorm", shape, self.param_count(), 0)
        prof.pointwise(name, "layernorm", shape, row=False)
        return shape


class GroupNorm(Module):
    def __init__(self, groups: int, c: int, channel_axis: int = 1):
        self.groups, self.channel_axis = groups, channel_axis
        self.weight = Parameter(np.ones(c))
        self.bias = Parameter(np.zeros(c))

    def forward(self, x):
        return ops.group_norm(x, self.groups, self.weight, self.bias, channel_axis=self.channel_axis)

    def profile(self, shape, prof, name):
        prof.row(name, "groupnorm", shape, self.param_count(), 0)
        prof.pointwise(name, "groupnorm", shape, row=False)
        return shape


class ConvLayer(Module):
    """Conv -> optional batch norm -> optional activation."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, groups: int = 1,
                 bias: bool = False, norm: Optional[str] = "batch", act: Optional[str] = "silu"):
        if norm not in (None, "batch"):
            raise ConfigError(f"unsupported conv norm {norm!r}")
        if act is not None and act not in ops.ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
        self.conv = Conv2d(cin, cout, kernel, stride, groups, bias)
        self.norm = BatchNorm2d(cout) if norm else None
        self.act = act

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        if self.act:
            x = ops.ACTIVATIONS[self.act](x)
        return x

    def profile(self, shape, prof, name):
        shape = self.conv.profile(shape, prof, f"{name}.conv")
        if self.norm is not None:
            shape = self.norm.profile(shape, prof, f"{name}.norm")
        _act_rows(prof, f"{name}.act", self.act, shape)
        return shape


# ---------------------------------------------------------------- token layers


class Linear(Module):
    def __init__(self, din: int, dout: int, bias: bool = True):
        self.din, self.dout = din, dout
        self.weight = Parameter(np.zeros((dout, din)))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def profile(self, shape, prof, name):
        if shape[-1] != self.din:
            raise ShapeError(f"linear expects d={self.din}, got {shape[-1]}", dim="d")
        out = tuple(shape[:-1]) + (self.dout,)
        tokens = int(np.prod(shape[1:-1])) if len(shape) > 2 else 1
        prof.row(name, "linear", out, self.param_count(), tokens * self.din * self.dout)
        return out


def _check_tokens(shape, d):
    if len(shape) != 4 or shape[-1] != d:
        raise ShapeError(f"expected tokens (N, P, S, {d}), got {tuple(shape)}", dim="d")


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention within each patch-offset sequence."""

    kind = "multihead"

    def __init__(self, d: int, heads: int = 4):
        if heads < 1 or d % heads:
            raise ConfigError(f"embed dim {d} is not divisible by heads={heads}")
        self.d, self.heads = d, heads
        self.qkv = Linear(d, 3 * d)
        self.out = Linear(d, d)

    def _split_heads(self, t, n, p, s):
        t = ops.reshape(t, (n * p, s, self.heads, self.d // self.heads))
        return ops.permute(t, (0, 2, 1, 3))  # (NP, h, S, dh)

    def attention_weights(self, x: Tensor) -> Tensor:
        return self._attend(x)[1]

    def _attend(self, x):
        _check_tokens(x.shape, self.d)
        n, p, s, d = x.shape
        qkv = self.qkv(x)
        q = self._split_heads(ops.narrow(qkv, -1, 0, d), n, p, s)
        k = self._split_heads(ops.narrow(qkv, -1, d, d), n, p, s)
        v = self._split_heads(ops.narrow(qkv, -1, 2 * d, d), n, p, s)
        q = ops.scale(q, ops.attention_scale(d // self.heads))
        attn = ops.softmax(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), axis=-1)
        ctx = ops.matmul(attn, v)  # (NP, h, S, dh)
        ctx = ops.reshape(ops.permute(ctx, (0, 2, 1, 3)), (n, p, s, d))
        return ctx, attn

    def forward(self, x):
        return self.out(self._attend(x)[0])

    def profile(self, shape, prof, name):
        _check_tokens(shape, self.d)
        _, p, s, d = shape
        self.qkv.profile(shape, prof, f"{name}.qkv")
        if prof.attention == "executed":
            macs = 2 * p * s * s * d
        else:
            # published-table convention: seq*d^2 for each of QK^T and AV
            macs = 2 * p * s * d * d
        prof.row(f"{name}.attn", "attention", shape, 0, macs)
        prof.pointwise(f"{name}.softmax", "softmax", (shape[0], p, s, s * self.heads))
        return self.out.profile(shape, prof, f"{name}.out")


class SeparableAttention(Module):
    """Linear-cost attention: one context vector per sequence, weighted by
    softmax-normalized per-token scores from a d->1 projection."""

    kind = "separable"

    def __init__(self, d: int):
        self.d = d
        self.qkv = Linear(d, 1 + 2 * d)
        self.out = Linear(d, d)

    def context_scores(self, x: Tensor) -> Tensor:
        return self._attend(x)[1]

    def _attend(self, x):
        _check_tokens(x.shape, self.d)
        d = self.d
        qkv = self.qkv(x)
        scores = ops.softmax(ops.narrow(qkv, -1, 0, 1), axis=2)  # (N, P, S, 1), over tokens
        key = ops.narrow(qkv, -1, 1, d)
        value = ops.narrow(qkv, -1, 1 + d, d)
        context = ops.matmul(ops.permute(scores, (0, 1, 3, 2)), key)  # (N, P, 1, d)
        return ops.mul(ops.relu(value), context), scores

    def forward(self, x):
        return self.out(self._attend(x)[0])

    def profile(self, shape, prof, name):
        _check_tokens(shape, self.d)
        _, p, s, d = shape
        self.qkv.profile(shape, prof, f"{name}.qkv")
        # context sum (S*d) plus the broadcast multiply (S*d), per sequence
        prof.row(f"{name}.attn", "attention", shape, 0, 2 * p * s * d)
        prof.pointwise(f"{name}.softmax", "softmax", (shape[0], p, s, 1))
        return self.out.profile(shape, prof, f"{name}.out")


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, act: str = "silu"):
        self.fc1 = Linear(d, hidden)
        self.fc2 = Linear(hidden, d)
        self.act = act

    def forward(self, x):
        return self.fc2(ops.ACTIVATIONS[self.act](self.fc1(x)))

    def profile(self, shape, prof, name):
        h = self.fc1.profile(shape, prof, f"{name}.fc1")
        _act_rows(prof, f"{name}.act", self.act, h)
        return self.fc2.profile(h, prof, f"{name}.fc2")


def make_token_norm(kind: str, d: int) -> Module:
    if kind == "layer":
        return LayerNorm(d)
    if kind == "group":
        return GroupNorm(1, d, channel_axis=-1)
    raise ConfigError(f"unknown transformer norm {kind!r}")


class TransformerLayer(Module):
    """Pre-norm encoder layer: x + attn(norm(x)), then x + ffn(norm(x))."""

    def __init__(self, d: int, ffn_dim: int, attention: str = "multihead", heads: int = 4, norm: str = "layer"):
        self.norm1 = make_token_norm(norm, d)
        if attention == "multihead":
            self.attn = MultiHeadAttention(d, heads)
        elif attention == "separable":
            self.attn = SeparableAttention(d)
        else:
            raise ConfigError(f"unknown attention kind {attention!r}")
        self.norm2 = make_token_norm(norm, d)
        self.ffn = FeedForward(d, ffn_dim)

    def forward(self, x):
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.ffn(self.norm2(x)))

    def profile(self, shape, prof, name):
        self.norm1.profile(shape, prof, f"{name}.norm1")
        self.attn.profile(shape, prof, f"{name}.attn")
        prof.pointwise(f"{name}.res1", "add", shape)
        self.norm2.profile(shape, prof, f"{name}.norm2")
        self.ffn.profile(shape, prof, f"{name}.ffn")
        prof.pointwise(f"{name}.res2", "add", shape)
        return shape


# ---------------------------------------------------------------- patches


@dataclass(frozen=True)
class PatchSpec:
    ph: int = 2
    pw: int = 2

    def __post_init__(self):
        if self.ph < 1 or self.pw < 1:
            raise ConfigError(f"patch dims must be >= 1, got {self.ph}x{self.pw}")

    @property
    def area(self) -> int:
        return self.ph * self.pw


def check_patch_divisible(h: int, w: int, patch: PatchSpec) -> None:
    if h % patch.ph or w % patch.pw:
        raise ShapeError(
            f"feature map {h}x{w} is not divisible by patch {patch.ph}x{patch.pw} "
            f"(H={h}, W={w}, ph={patch.ph}, pw={patch.pw})", dim="H" if h % patch.ph else "W")


def unfold(x: Tensor, patch: PatchSpec) -> Tensor:
    """(N, d, H, W) -> (N, ph*pw, H*W/(ph*pw), d).

    Sequence ``p`` collects the pixel at intra-patch offset ``p`` from every
    patch, in raster order of patches.
    """
    if x.ndim != 4:
        raise ShapeError(f"unfold expects (N, d, H, W), got {x.shape}", dim="rank")
    n, d, h, w = x.shape
    check_patch_divisible(h, w, patch)
    ph, pw = patch.ph, patch.pw
    t = ops.reshape(x, (n, d, h // ph, ph, w // pw, pw))
    t = ops.permute(t, (0, 3, 5, 2, 4, 1))
    return ops.reshape(t, (n, ph * pw, (h // ph) * (w // pw), d))


def fold(tokens: Tensor, patch: PatchSpec, h: int, w: int) -> Tensor:
    """Exact inverse of :func:`unfold`."""
    if tokens.ndim != 4:
        raise ShapeError(f"fold expects (N, P, S, d), got {tokens.shape}", dim="rank")
    n, p, s, d = tokens.shape
    check_patch_divisible(h, w, patch)
    ph, pw = patch.ph, patch.pw
    if p != ph * pw or s != (h // ph) * (w // pw):
        raise ShapeError(f"{p}x{s} tokens do not tile a {h}x{w} map with {ph}x{pw} patches", dim="S")
    t = ops.reshape(tokens, (n, ph, pw, h // ph, w // pw, d))
    t = ops.permute(t, (0, 5, 3, 1, 4, 2))
    return ops.reshape(t, (n, d, h, w))
