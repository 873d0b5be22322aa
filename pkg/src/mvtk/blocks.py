"""MV2 inverted residuals and the MobileViT block in v1, v2 and v3 modes.

The four fusion-block changes are independent :class:`FusionConfig` flags.
Wiring details that differ between the multi-head (v1) and separable (v2)
families are derived from the block's attention kind:

=================  ==========================  ===========================
                   multihead family            separable family
=================  ==========================  ===========================
global -> C proj   1x1, BN + SiLU, always      only when fusion is absent
                                               (1x1, BN, the block exit)
input concat       [x (C), proj (C)]           [x (C), global (d)]
local concat       [local (d), proj (C)]       [global (d), local (d)]
fusion act         SiLU                        none
=================  ==========================  ===========================
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from . import ops
from .errors import ConfigError, ShapeError
from .layers import (
    ConvLayer,
    Module,
    ModuleList,
    PatchSpec,
    TransformerLayer,
    check_patch_divisible,
    fold,
    make_token_norm,
    unfold,
)
from .tensor import Tensor


def make_divisible(v: float, divisor: int = 8, min_value: Optional[int] = None) -> int:
    """Round ``v`` to the nearest multiple of ``divisor`` without dropping more than 10%."""
    min_value = min_value or divisor
    out = max(min_value, int(v + divisor / 2) // divisor * divisor)
    if out < 0.9 * v:
        out += divisor
    return out


# ---------------------------------------------------------------- fusion flags


@dataclass(frozen=True)
class FusionConfig:
    fusion_kernel: int = 3
    concat_source: str = "input"
    input_add: bool = False
    local_depthwise: bool = False
    fusion_present: bool = True

    def __post_init__(self):
        if self.fusion_kernel not in (1, 3):
            raise ConfigError(f"fusion_kernel must be 1 or 3, got {self.fusion_kernel}")
        if self.concat_source not in ("input", "local"):
            raise ConfigError(f"concat_source must be 'input' or 'local', got {self.concat_source!r}")
        if not self.fusion_present and (self.concat_source == "local" or self.input_add):
            raise ConfigError("local concat and input add need a fusion block (fusion_present=True)")

    @property
    def label(self) -> str:
        if not self.fusion_present:
            return "no-fusion" + ("+dwconv" if self.local_depthwise else "")
        parts = [f"conv{self.fusion_kernel}x{self.fusion_kernel}", f"{self.concat_source}-concat"]
        if self.input_add:
            parts.append("input-add")
        if self.local_depthwise:
            parts.append("dwconv")
        return "+".join(parts)

    def to_dict(self) -> dict:
        return asdict(self)


V1 = FusionConfig(3, "input", False, False, True)
V3 = FusionConfig(1, "local", True, True, True)
V2 = FusionConfig(1, "input", False, True, False)
PRESETS = {"v1": V1, "v2": V2, "v3": V3}

# the ablation rows, adding one change at a time to the v1 block
ABLATION = (
    V1,
    FusionConfig(1, "input", False, False, True),
    FusionConfig(1, "local", False, False, True),
    FusionConfig(1, "local", True, False, True),
    V3,
)


def fusion_from(value) -> FusionConfig:
    if isinstance(value, FusionConfig):
        return value
    if isinstance(value, str):
        try:
            return PRESETS[value]
        except KeyError:
            raise ConfigError(f"unknown fusion preset {value!r}; choose from {sorted(PRESETS)}") from None
    if isinstance(value, dict):
        return FusionConfig(**value)
    raise ConfigError(f"cannot interpret {value!r} as a FusionConfig")


# ---------------------------------------------------------------- MV2


@dataclass(frozen=True)
class MV2Spec:
    cin: int
    cout: int
    stride: int = 1
    expansion: float = 4

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"MV2 stride must be 1 or 2, got {self.stride}")
        if self.cin < 1 or self.cout < 1 or self.expansion <= 0:
            raise ConfigError(f"invalid MV2 spec {self}")

    @property
    def hidden(self) -> int:
        return make_divisible(round(self.cin * self.expansion), 8)

    @property
    def has_skip(self) -> bool:
        return self.stride == 1 and self.cin == self.cout


class InvertedResidual(Module):
    """1x1 expand -> depthwise 3x3 (stride) -> 1x1 linear project, plus skip when shapes allow."""

    def __init__(self, spec: MV2Spec):
        self.spec = spec
        hid = spec.hidden
        self.expand = ConvLayer(spec.cin, hid, 1) if spec.expansion != 1 else None
        self.dw = ConvLayer(hid, hid, 3, stride=spec.stride, groups=hid)
        self.project = ConvLayer(hid, spec.cout, 1, act=None)

    def _children(self):
        return ((k, v) for k, v in vars(self).items() if k != "spec")

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.cin:
            raise ShapeError(f"MV2 block expects {self.spec.cin} channels, got shape {x.shape}", dim="C")
        y = x
        if self.expand is not None:
            y = self.expand(y)
        y = self.project(self.dw(y))
        return ops.add(x, y) if self.spec.has_skip else y

    def profile(self, shape, prof, name):
        out = shape
        if self.expand is not None:
            out = self.expand.profile(out, prof, f"{name}.expand")
        out = self.dw.profile(out, prof, f"{name}.dw")
        out = self.project.profile(out, prof, f"{name}.project")
        if self.spec.has_skip:
            prof.pointwise(f"{name}.skip", "add", out)
        return out


# ---------------------------------------------------------------- MobileViT block


@dataclass(frozen=True)
class MobileViTBlockSpec:
    C: int
    d: int
    L: int
    patch: PatchSpec = field(default_factory=PatchSpec)
    attention: str = "multihead"
    fusion: FusionConfig = V1
    ffn_dim: Optional[int] = None
    heads: int = 4
    norm: Optional[str] = None
    final_norm: bool = True

    def __post_init__(self):
        if self.attention not in ("multihead", "separable"):
            raise ConfigError(f"unknown attention kind {self.attention!r}")
        if self.C < 1 or self.d < 1 or self.L < 0:
            raise ConfigError(f"invalid block dims C={self.C}, d={self.d}, L={self.L}")
        if self.attention == "multihead" and self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.norm not in (None, "layer", "group"):
            raise ConfigError(f"unknown transformer norm {self.norm!r}")

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 2 * self.d

    @property
    def token_norm(self) -> str:
        if self.norm:
            return self.norm
        return "layer" if self.attention == "multihead" else "group"

    @property
    def v1_family(self) -> bool:
        return self.attention == "multihead"

    def with_fusion(self, fusion) -> "MobileViTBlockSpec":
        return replace(self, fusion=fusion_from(fusion))


class LocalRepresentation(Module):
    def __init__(self, spec: MobileViTBlockSpec):
        C = spec.C
        self.conv3x3 = ConvLayer(C, C, 3, groups=C if spec.fusion.local_depthwise else 1)
        self.conv1x1 = ConvLayer(C, spec.d, 1, norm=None, act=None)

    def forward(self, x):
        return self.conv1x1(self.conv3x3(x))

    def profile(self, shape, prof, name):
        shape = self.conv3x3.profile(shape, prof, f"{name}.conv3x3")
        return self.conv1x1.profile(shape, prof, f"{name}.conv1x1")


class GlobalRepresentation(Module):
    """unfold -> L transformer layers -> final norm -> fold."""

    def __init__(self, spec: MobileViTBlockSpec):
        self.patch = spec.patch
        self.layers = ModuleList(
            TransformerLayer(spec.d, spec.ffn, spec.attention, spec.heads, spec.token_norm) for _ in range(spec.L)
        )
        self.norm = make_token_norm(spec.token_norm, spec.d) if spec.final_norm else None

    def _children(self):
        return ((k, v) for k, v in vars(self).items() if k != "patch")

    def forward(self, x):
        h, w = x.shape[2:]
        t = unfold(x, self.patch)
        for layer in self.layers:
            t = layer(t)
        if self.norm is not None:
            t = self.norm(t)
        return fold(t, self.patch, h, w)

    def profile(self, shape, prof, name):
        n, d, h, w = shape
        check_patch_divisible(h, w, self.patch)
        tokens = (n, self.patch.area, (h // self.patch.ph) * (w // self.patch.pw), d)
        with prof.tokens():
            for i, layer in enumerate(self.layers):
                layer.profile(tokens, prof, f"{name}.layers.{i}")
            if self.norm is not None:
                self.norm.profile(tokens, prof, f"{name}.norm")
        return shape


class MobileViTBlock(Module):
    def __init__(self, spec: MobileViTBlockSpec):
        self.spec = spec
        cfg, C, d = spec.fusion, spec.C, spec.d
        self.local = LocalRepresentation(spec)
        self.global_rep = GlobalRepresentation(spec)
        if spec.v1_family:
            self.proj = ConvLayer(d, C, 1)
            global_ch = C
            fusion_act = "silu"
        else:
            self.proj = None if cfg.fusion_present else ConvLayer(d, C, 1, act=None)
            global_ch = d
            fusion_act = None
        if cfg.fusion_present:
            other = C if cfg.concat_source == "input" else d
            k = cfg.fusion_kernel
            self.fusion = ConvLayer(other + global_ch, C, k, act=fusion_act)
        else:
            self.fusion = None

    def _children(self):
        return ((k, v) for k, v in vars(self).items() if k != "spec")

    @property
    def fusion_conv(self):
        """The conv whose zeroing turns a residual block into the identity."""
        return self.fusion.conv if self.fusion is not None else self.proj.conv

    def _concat_order(self, x, local, glob):
        cfg = self.spec.fusion
        if cfg.concat_source == "input":
            return [x, glob]
        return [local, glob] if self.spec.v1_family else [glob, local]

    def forward(self, x: Tensor) -> Tensor:
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != spec.C:
            raise ShapeError(f"MobileViT block expects {spec.C} channels, got shape {x.shape}", dim="C")
        check_patch_divisible(x.shape[2], x.shape[3], spec.patch)
        local = self.local(x)
        glob = self.global_rep(local)
        if self.proj is not None:
            glob = self.proj(glob)
        if self.fusion is None:
            return glob
        out = self.fusion(ops.concat(self._concat_order(x, local, glob), axis=1))
        return ops.add(x, out) if spec.fusion.input_add else out

    def profile(self, shape, prof, name):
        spec = self.spec
        if shape[1] != spec.C:
            raise ShapeError(f"MobileViT block expects {spec.C} channels, got {shape[1]}", dim="C")
        local = self.local.profile(shape, prof, f"{name}.local")
        glob = self.global_rep.profile(local, prof, f"{name}.global_rep")
        if self.proj is not None:
            glob = self.proj.profile(glob, prof, f"{name}.proj")
        if self.fusion is None:
            return glob
        parts = self._concat_order(shape, local, glob)
        cat = (shape[0], sum(p[1] for p in parts), shape[2], shape[3])
        out = self.fusion.profile(cat, prof, f"{name}.fusion")
        if spec.fusion.input_add:
            prof.pointwise(f"{name}.input_add", "add", out)
        return out
