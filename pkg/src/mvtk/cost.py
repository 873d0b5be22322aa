"""Static parameter and multiply-accumulate (MAC) accounting.

MACs are per sample at the given square resolution; one MAC is reported as
one FLOP. Norms, activations, softmax, pooling and residual adds are
excluded unless ``include_pointwise`` is set, in which case each contributes
one op per output element.

Attention conventions for multi-head attention:

``profiler`` (default)
    ``S * d * d`` for each of QK^T and AV per sequence. This is the quantity
    the baseline family's published tables were produced with.
``executed``
    ``S * S * d`` for each, the multiplies a forward pass actually performs.
    The instrumented check compares against this convention.

Separable attention costs ``2 * S * d`` per sequence under both.
"""

from __future__ import annotations

import csv
import io
import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .tensor import Tensor, count_macs as _instrument, no_grad

CSV_FIELDS = ("layer", "kind", "out_n", "out_c", "out_h", "out_w", "params", "macs")
CONVENTIONS = ("profiler", "executed")


@dataclass
class CostRow:
    layer: str
    kind: str
    out_n: int
    out_c: int
    out_h: int
    out_w: int
    params: int
    macs: int

    @property
    def shape(self) -> tuple:
        return (self.out_n, self.out_c, self.out_h, self.out_w)


class Profiler:
    """Collects rows from ``Module.profile`` calls."""

    def __init__(self, attention: str = "profiler", include_pointwise: bool = False):
        if attention not in CONVENTIONS:
            raise ValueError(f"attention convention must be one of {CONVENTIONS}, got {attention!r}")
        self.attention = attention
        self.include_pointwise = include_pointwise
        self.rows: list[CostRow] = []
        self._tokens = False

    @contextmanager
    def tokens(self):
        """Rows recorded inside report token shapes (N, P, S, d) as (N, d, P, S)."""
        prev, self._tokens = self._tokens, True
        try:
            yield
        finally:
            self._tokens = prev

    def _nchw(self, shape) -> tuple:
        shape = tuple(int(s) for s in shape)
        if len(shape) == 2:
            return (shape[0], shape[1], 1, 1)
        if len(shape) == 4 and self._tokens:
            n, p, s, d = shape
            return (n, d, p, s)
        if len(shape) == 4:
            return shape
        raise ValueError(f"cannot report shape {shape}")

    def row(self, name: str, kind: str, shape, params: int, macs: int) -> None:
        self.rows.append(CostRow(name, kind, *self._nchw(shape), int(params), int(macs)))

    def pointwise(self, name: str, kind: str, shape, row: bool = True) -> None:
        """Elementwise work: counted only with ``include_pointwise``.

        ``row=False`` folds the count into the most recent row (used by norms,
        which already have a row for their affine parameters).
        """
        if not self.include_pointwise:
            return
        ops = int(np.prod(shape[1:]))
        if row:
            self.row(name, kind, shape, 0, ops)
        else:
            self.rows[-1].macs += ops


@dataclass
class CostReport:
    model: str
    resolution: int
    attention: str
    include_pointwise: bool
    rows: list = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def by_prefix(self, prefix: str) -> tuple[int, int]:
        sel = [r for r in self.rows if r.layer == prefix or r.layer.startswith(prefix + ".")]
        return sum(r.params for r in sel), sum(r.macs for r in sel)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([getattr(r, f) for f in CSV_FIELDS])
        return buf.getvalue()

    @staticmethod
    def rows_from_csv(text: str) -> list[CostRow]:
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"CSV header {reader.fieldnames} does not match {CSV_FIELDS}")
        return [CostRow(r["layer"], r["kind"], *(int(r[f]) for f in CSV_FIELDS[2:])) for r in reader]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "resolution": self.resolution,
            "attention": self.attention,
            "include_pointwise": self.include_pointwise,
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def summary(self) -> str:
        return (f"{self.model} @ {self.resolution}x{self.resolution}: "
                f"params {self.total_params:,} ({self.total_params / 1e6:.3f} M), "
                f"MACs {self.total_macs:,} ({self.total_macs / 1e6:.1f} M)")

    def to_table(self) -> str:
        head = f"{'layer':<42} {'kind':<10} {'output':<20} {'params':>10} {'MACs':>13}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            shape = "x".join(str(s) for s in r.shape)
            lines.append(f"{r.layer:<42} {r.kind:<10} {shape:<20} {r.params:>10,} {r.macs:>13,}")
        lines.append("-" * len(head))
        lines.append(f"{'total':<42} {'':<10} {'':<20} {self.total_params:>10,} {self.total_macs:>13,}")
        lines.append(self.summary())
        return "\n".join(lines)


def _as_model(model_or_spec):
    from .zoo import Model, ModelSpec

    if isinstance(model_or_spec, ModelSpec):
        return Model(model_or_spec)
    return model_or_spec


def report(model, resolution: int = 256, attention: str = "profiler", include_pointwise: bool = False,
           batch: int = 1) -> CostReport:
    """Per-layer cost rows of a built model (or a ``ModelSpec``), in network order."""
    model = _as_model(model)
    prof = Profiler(attention, include_pointwise)
    in_ch = model.spec.in_channels
    model.profile((batch, in_ch, resolution, resolution), prof, "")
    return CostReport(model.spec.name, resolution, attention, include_pointwise, prof.rows)


def profile_module(module, in_shape: tuple, attention: str = "profiler", include_pointwise: bool = False,
                   name: str = "module") -> CostReport:
    """Cost rows of any module given its input shape (NCHW, or (N, P, S, d) for token layers)."""
    prof = Profiler(attention, include_pointwise)
    module.profile(tuple(in_shape), prof, name)
    res = in_shape[-1] if len(in_shape) == 4 else 0
    return CostReport(name, res, attention, include_pointwise, prof.rows)


def count_params(model) -> int:
    return _as_model(model).param_count()


def count_macs(model, resolution: int = 256, attention: str = "profiler", include_pointwise: bool = False) -> int:
    return report(model, resolution, attention, include_pointwise).total_macs


def instrumented_macs(module, x: Union[Tensor, np.ndarray]) -> int:
    """Run ``module(x)`` and return every multiply executed by conv/linear/matmul/mul ops, per sample."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    with no_grad(), _instrument() as counter:
        module(x)
    n = x.shape[0]
    if counter.total % n:
        raise AssertionError(f"executed MACs {counter.total} not divisible by batch {n}")
    return counter.total // n


def instrumented_mac_check(model, resolution: int = 32, batch: int = 1, seed: int = 0) -> int:
    """Executed multiply count of one forward pass at ``resolution``, divided by batch size.

    Compare with ``count_macs(model, resolution, attention="executed")``.
    """
    model = _as_model(model)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, model.spec.in_channels, resolution, resolution)).astype(model.dtype)
    was_training = model.training
    model.eval()
    try:
        return instrumented_macs(model, x)
    finally:
        model.train(was_training)


def fusion_scaling(C_values=(64, 128), d_ratio: float = 1.0) -> list[dict]:
    """Fusion-conv params of the v1 and v3 presets at several widths (d = C * d_ratio)."""
    from .blocks import V1, V3, MobileViTBlock, MobileViTBlockSpec

    out = []
    for C in C_values:
        d = int(C * d_ratio)
        row = {"C": C, "d": d}
        for label, cfg in (("v1", V1), ("v3", V3)):
            blk = MobileViTBlock(MobileViTBlockSpec(C=C, d=d, L=1, fusion=cfg))
            row[label] = blk.fusion.conv.param_count()
        out.append(row)
    return out
