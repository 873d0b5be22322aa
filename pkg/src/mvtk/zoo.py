"""Declarative model specs, the named model zoo, and model (de)serialization.

A model is a conv stem, five stages and a classifier head. ``mv2`` stages are
``repeat`` inverted residuals (the first one carries the stride);
``mobilevit`` stages are one strided MV2 followed by ``repeat`` MobileViT
blocks of ``L`` transformer layers each.

Spec files are YAML with this schema::

    name: mobilevitv3-xxs
    num_classes: 1000
    in_channels: 3
    head_channels: 512        # 1x1 conv before pooling; 0 disables it
    head_cap: 960             # effective head = min(head_channels, head_cap)
    layer4_blocks: null       # optional override of layer4's L
    stages:
      - {name: stem, kind: conv-stem, cout: 16, stride: 2}
      - {name: layer1, kind: mv2, cout: 16, stride: 1, repeat: 1, expansion: 2}
      - {name: layer3, kind: mobilevit, cout: 64, stride: 2, expansion: 2,
         d: 64, L: 2, ffn_dim: 128, attention: multihead, heads: 4,
         patch: [2, 2], fusion: {fusion_kernel: 1, concat_source: local,
         input_add: true, local_depthwise: true, fusion_present: true}}
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import ops
from .blocks import (
    V1,
    V2,
    V3,
    FusionConfig,
    InvertedResidual,
    MobileViTBlock,
    MobileViTBlockSpec,
    MV2Spec,
    fusion_from,
    make_divisible,
)
from .errors import ConfigError, FormatError, ShapeError
from .layers import ConvLayer, Linear, Module, ModuleList, PatchSpec, init_weights
from .serialization import read_pack, write_pack
from .tensor import Tensor

STAGE_KINDS = ("conv-stem", "mv2", "mobilevit")


@dataclass(frozen=True)
class StageSpec:
    name: str
    kind: str
    cout: int
    stride: int = 1
    repeat: int = 1
    expansion: float = 4
    cin: Optional[int] = None  # optional explicit input width, checked at build time
    d: Optional[int] = None
    L: Optional[int] = None
    ffn_dim: Optional[int] = None
    attention: str = "multihead"
    heads: int = 4
    patch: PatchSpec = field(default_factory=PatchSpec)
    fusion: FusionConfig = V1

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ConfigError(f"stage {self.name}: unknown kind {self.kind!r}", stage=self.name)
        if self.repeat < 1:
            raise ConfigError(f"stage {self.name}: repeat must be >= 1", stage=self.name)
        if self.stride not in (1, 2):
            raise ConfigError(f"stage {self.name}: stride must be 1 or 2", stage=self.name)
        if self.kind == "mobilevit" and (self.d is None or self.L is None):
            raise ConfigError(f"stage {self.name}: mobilevit stages need d and L", stage=self.name)

    def block_spec(self, L: Optional[int] = None) -> MobileViTBlockSpec:
        return MobileViTBlockSpec(
            C=self.cout, d=self.d, L=self.L if L is None else L, patch=self.patch,
            attention=self.attention, fusion=self.fusion, ffn_dim=self.ffn_dim, heads=self.heads,
        )

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "cout": self.cout, "stride": self.stride}
        if self.kind != "conv-stem":
            out.update(repeat=self.repeat, expansion=self.expansion)
        if self.cin is not None:
            out["cin"] = self.cin
        if self.kind == "mobilevit":
            out.update(d=self.d, L=self.L, ffn_dim=self.ffn_dim, attention=self.attention, heads=self.heads,
                       patch=[self.patch.ph, self.patch.pw], fusion=self.fusion.to_dict())
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "StageSpec":
        d = dict(d)
        if "patch" in d:
            d["patch"] = PatchSpec(*d["patch"])
        if "fusion" in d:
            d["fusion"] = fusion_from(d["fusion"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad stage entry {d.get('name', '?')}: {e}", stage=d.get("name")) from None


@dataclass(frozen=True)
class ModelSpec:
    name: str
    stages: tuple
    head_channels: int = 0
    head_cap: Optional[int] = 960
    num_classes: int = 1000
    in_channels: int = 3
    layer4_blocks: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.layer4_blocks is not None:
            st = self.stage("layer4")
            if st is None or st.kind != "mobilevit":
                raise ConfigError("layer4_blocks needs a mobilevit stage named 'layer4'", stage="layer4")
            if self.layer4_blocks < 1:
                raise ConfigError("layer4_blocks must be >= 1", stage="layer4")

    def stage(self, name: str) -> Optional[StageSpec]:
        for s in self.stages:
            if s.name == name:
                return s
        return None

    def stage_L(self, stage: StageSpec) -> Optional[int]:
        if stage.name == "layer4" and self.layer4_blocks is not None:
            return self.layer4_blocks
        return stage.L

    @property
    def head(self) -> int:
        """Effective width of the 1x1 conv before pooling (0 = none)."""
        if not self.head_channels:
            return 0
        return min(self.head_channels, self.head_cap) if self.head_cap else self.head_channels

    @property
    def widths(self) -> list[int]:
        return [s.cout for s in self.stages]

    @property
    def fusion(self) -> Optional[FusionConfig]:
        for s in self.stages:
            if s.kind == "mobilevit":
                return s.fusion
        return None

    def with_fusion(self, fusion) -> "ModelSpec":
        fusion = fusion_from(fusion)
        stages = [replace(s, fusion=fusion) if s.kind == "mobilevit" else s for s in self.stages]
        return replace(self, stages=tuple(stages))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "head_channels": self.head_channels,
            "head_cap": self.head_cap,
            "layer4_blocks": self.layer4_blocks,
            "stages": [s.to_dict() for s in self.stages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        if not isinstance(d, dict) or "stages" not in d or "name" not in d:
            raise ConfigError("model spec needs 'name' and 'stages'")
        d = dict(d)
        d["stages"] = tuple(StageSpec.from_dict(s) for s in d["stages"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad model spec: {e}") from None


def save_spec(spec: ModelSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))


def load_spec(path) -> ModelSpec:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise FormatError(f"cannot parse spec file {path}: {e}") from e
    return ModelSpec.from_dict(data)


# ---------------------------------------------------------------- named specs

# (mv2 expansion, widths of stem..layer5, transformer d per mobilevit stage,
#  ffn dims, nominal head width)
_V1 = {
    "xxs": (2, [16, 16, 24, 48, 64, 80], [64, 80, 96], [128, 160, 192], 320),
    "xs": (4, [16, 32, 48, 64, 80, 96], [96, 120, 144], [192, 240, 288], 384),
    "s": (4, [16, 32, 64, 96, 128, 160], [144, 192, 240], [288, 384, 480], 640),
}
# scaled widths; d and ffn are kept from the v1 reference configs
_V3 = {
    "xxs": (2, [16, 16, 24, 64, 80, 128], [64, 80, 96], [128, 160, 192], 512),
    "xs": (4, [16, 32, 48, 96, 160, 160], [96, 120, 144], [192, 240, 288], 640),
    "s": (4, [16, 32, 64, 128, 256, 320], [144, 192, 240], [288, 384, 480], 1280),
}
_LS = (2, 4, 3)
V2_WIDTHS = ("0.5", "0.75", "1.0")


def _v1_stages(cfg, fusion) -> list[StageSpec]:
    e, w, ds, ffns, _ = cfg
    stages = [
        StageSpec("stem", "conv-stem", w[0], stride=2),
        StageSpec("layer1", "mv2", w[1], stride=1, repeat=1, expansion=e),
        StageSpec("layer2", "mv2", w[2], stride=2, repeat=3, expansion=e),
    ]
    for i, (d, ffn, L) in enumerate(zip(ds, ffns, _LS)):
        stages.append(StageSpec(f"layer{i + 3}", "mobilevit", w[3 + i], stride=2, expansion=e,
                                d=d, L=L, ffn_dim=ffn, attention="multihead", heads=4, fusion=fusion))
    return stages


def v2_config(alpha: float) -> tuple[list[int], list[int], list[int]]:
    """Stage widths, transformer dims and ffn dims for width multiplier ``alpha``."""
    md = make_divisible
    widths = [
        md(min(max(32 * alpha, 16), 64), 8),
        md(64 * alpha, 16),
        md(128 * alpha, 8),
        md(256 * alpha, 8),
        md(384 * alpha, 8),
        md(512 * alpha, 8),
    ]
    ds = [md(128 * alpha, 8), md(192 * alpha, 8), md(256 * alpha, 8)]
    ffns = [(2 * d // 16) * 16 for d in ds]
    return widths, ds, ffns


def _v2_stages(alpha: float, fusion) -> list[StageSpec]:
    w, ds, ffns = v2_config(alpha)
    stages = [
        StageSpec("stem", "conv-stem", w[0], stride=2),
        StageSpec("layer1", "mv2", w[1], stride=1, repeat=1, expansion=2),
        StageSpec("layer2", "mv2", w[2], stride=2, repeat=2, expansion=2),
    ]
    for i, (d, ffn, L) in enumerate(zip(ds, ffns, _LS)):
        stages.append(StageSpec(f"layer{i + 3}", "mobilevit", w[3 + i], stride=2, expansion=2,
                                d=d, L=L, ffn_dim=ffn, attention="separable", fusion=fusion))
    return stages


def _named_specs() -> dict[str, ModelSpec]:
    out = {}
    for size in ("xxs", "xs", "s"):
        out[f"mobilevitv1-{size}"] = ModelSpec(f"mobilevitv1-{size}", _v1_stages(_V1[size], V1), _V1[size][4])
        out[f"mobilevitv3-{size}"] = ModelSpec(f"mobilevitv3-{size}", _v1_stages(_V3[size], V3), _V3[size][4])
    for a in V2_WIDTHS:
        out[f"mobilevitv2-{a}"] = ModelSpec(f"mobilevitv2-{a}", _v2_stages(float(a), V2), 0)
        out[f"mobilevitv3-{a}"] = ModelSpec(f"mobilevitv3-{a}", _v2_stages(float(a), V3), 0)
    out["mobilevitv3-s-unscaled"] = ModelSpec("mobilevitv3-s-unscaled", _v1_stages(_V1["s"], V3), _V1["s"][4])
    return out


_NAMED = _named_specs()
MODEL_NAMES = (
    "mobilevitv1-xxs", "mobilevitv1-xs", "mobilevitv1-s",
    "mobilevitv2-0.5", "mobilevitv2-0.75", "mobilevitv2-1.0",
    "mobilevitv3-xxs", "mobilevitv3-xs", "mobilevitv3-s",
    "mobilevitv3-0.5", "mobilevitv3-0.75", "mobilevitv3-1.0",
    "mobilevitv3-s-unscaled",
)


def named_spec(name: str, layer4_blocks: Optional[int] = None, num_classes: Optional[int] = None) -> ModelSpec:
    try:
        spec = _NAMED[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; valid names: {', '.join(MODEL_NAMES)}") from None
    if layer4_blocks is not None:
        if layer4_blocks not in (2, 4):
            raise ConfigError(f"layer4_blocks must be 2 or 4, got {layer4_blocks}", stage="layer4")
        spec = replace(spec, layer4_blocks=layer4_blocks if layer4_blocks != spec.stage("layer4").L else None)
    if num_classes is not None:
        spec = replace(spec, num_classes=num_classes)
    return spec


def shrink(spec: ModelSpec, width_div: int = 4, L: Optional[int] = 1, num_classes: Optional[int] = None,
           name: Optional[str] = None) -> ModelSpec:
    """Divide every width (and d, ffn, head) by ``width_div`` and cap transformer depth at ``L``."""

    def w(v):
        return make_divisible(v / width_div, 4, min_value=4)

    stages = []
    for s in spec.stages:
        upd = {"cout": w(s.cout), "cin": None}
        if s.kind == "mobilevit":
            upd.update(d=w(s.d), ffn_dim=w(s.ffn_dim) if s.ffn_dim else None,
                       L=min(s.L, L) if L is not None else s.L)
        stages.append(replace(s, **upd))
    return replace(
        spec,
        name=name or f"{spec.name}-div{width_div}",
        stages=tuple(stages),
        head_channels=w(spec.head) if spec.head else 0,
        head_cap=None,
        layer4_blocks=None,
        num_classes=num_classes or spec.num_classes,
    )


# ---------------------------------------------------------------- model


class Model(Module):
    def __init__(self, spec: ModelSpec):
        self.spec = spec
        cin = spec.in_channels
        stages = []
        for idx, st in enumerate(spec.stages):
            if st.cin is not None and st.cin != cin:
                raise ConfigError(f"stage {idx} ({st.name}) declares cin={st.cin} but receives {cin} channels",
                                  stage=idx)
            if st.kind == "conv-stem":
                mods = [ConvLayer(cin, st.cout, 3, stride=st.stride)]
            elif st.kind == "mv2":
                mods = [InvertedResidual(MV2Spec(cin if i == 0 else st.cout, st.cout,
                                                 st.stride if i == 0 else 1, st.expansion))
                        for i in range(st.repeat)]
            else:
                try:
                    block = st.block_spec(spec.stage_L(st))
                except ConfigError as e:
                    raise ConfigError(f"stage {idx} ({st.name}): {e}", stage=idx) from None
                mods = [InvertedResidual(MV2Spec(cin, st.cout, st.stride, st.expansion))]
                mods += [MobileViTBlock(block) for _ in range(st.repeat)]
            stages.append(ModuleList(mods))
            cin = st.cout
        self.stages = ModuleList(stages)
        self.head = ConvLayer(cin, spec.head, 1) if spec.head else None
        self.classifier = Linear(spec.head or cin, spec.num_classes)

    def _children(self):
        return ((k, v) for k, v in vars(self).items() if k != "spec")

    def stage_names(self):
        return [s.name for s in self.spec.stages]

    def forward(self, x: Tensor, return_features: bool = False):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected input (N, {self.spec.in_channels}, H, W), got {x.shape}", dim="C")
        feats = []
        for st, mods in zip(self.spec.stages, self.stages):
            for m in mods:
                try:
                    x = m(x)
                except ShapeError as e:
                    raise ShapeError(f"stage {st.name}: {e}", dim=e.dim) from None
            feats.append(x)
        if self.head is not None:
            x = self.head(x)
        pooled = ops.global_avg_pool(x)
        logits = self.classifier(ops.reshape(pooled, pooled.shape[:2]))
        return (logits, feats) if return_features else logits

    def profile(self, shape, prof, name=""):
        for st, mods in zip(self.spec.stages, self.stages):
            for i, m in enumerate(mods):
                try:
                    shape = m.profile(shape, prof, f"{st.name}.{i}")
                except ShapeError as e:
                    raise ShapeError(f"stage {st.name}: {e}", dim=e.dim) from None
        if self.head is not None:
            shape = self.head.profile(shape, prof, "head")
        pooled = (shape[0], shape[1], 1, 1)
        prof.row("pool", "pool", pooled, 0, 0)
        prof.pointwise("pool", "pool", shape, row=False)
        return self.classifier.profile((shape[0], shape[1]), prof, "classifier")


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    model = Model(spec)
    init_weights(model, seed)
    return model.to(dtype)


def stage_resolutions(spec: ModelSpec, res: int = 256) -> list[int]:
    out, r = [], res
    for st in spec.stages:
        r = (r + 2 - 3) // st.stride + 1 if st.stride == 2 else r
        out.append(r)
    return out


def describe_rows(spec: ModelSpec, res: int = 256) -> list[dict]:
    """Stage table in the layout of the published architecture table."""
    rows, stride = [{"layer": "Image", "size": f"{res}x{res}", "stride": 1, "repeat": "", "width": spec.in_channels,
                     "detail": ""}], 1
    for st, r in zip(spec.stages, stage_resolutions(spec, res)):
        stride *= st.stride
        if st.kind == "conv-stem":
            rows.append(dict(layer=f"{st.name}: Conv-3x3, down2", size=f"{r}x{r}", stride=stride, repeat=1,
                             width=st.cout, detail=""))
        elif st.kind == "mv2":
            down = ", down2" if st.stride == 2 else ""
            rows.append(dict(layer=f"{st.name}: MV2{down}", size=f"{r}x{r}", stride=stride, repeat=st.repeat,
                             width=st.cout, detail=f"expansion={st.expansion:g}"))
        else:
            L = spec.stage_L(st)
            rows.append(dict(layer=f"{st.name}: MV2, down2", size=f"{r}x{r}", stride=stride, repeat=1,
                             width=st.cout, detail=f"expansion={st.expansion:g}"))
            rows.append(dict(layer=f"{st.name}: MobileViT block (L={L})", size=f"{r}x{r}", stride=stride,
                             repeat=st.repeat, width=st.cout,
                             detail=f"d={st.d} ffn={st.ffn_dim} attn={st.attention} fusion={st.fusion.label}"))
    last = spec.stages[-1]
    r = stage_resolutions(spec, res)[-1]
    if spec.head_channels:
        cap = f" (built {spec.head})" if spec.head != spec.head_channels else ""
        rows.append(dict(layer="Conv-1x1", size=f"{r}x{r}", stride=stride, repeat=1,
                         width=spec.head_channels, detail=f"head{cap}"))
    rows.append(dict(layer="Global pool", size="1x1", stride=stride * r, repeat=1,
                     width=spec.head or last.cout, detail=""))
    rows.append(dict(layer=f"Linear", size="1x1", stride=stride * r, repeat=1, width=spec.num_classes, detail=""))
    return rows


# ---------------------------------------------------------------- weights


def serialize(model: Model, path) -> None:
    write_pack(path, model.state(), {"spec": model.spec.to_dict(), "dtype": str(model.dtype)})


def deserialize(path) -> Model:
    manifest, tensors = read_pack(path)
    if "spec" not in manifest:
        raise FormatError("weight pack has no model spec in its manifest")
    model = Model(ModelSpec.from_dict(manifest["spec"]))
    model.load_state(tensors)
    return model
