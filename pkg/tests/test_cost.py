import json
from pathlib import Path

import numpy as np
import pytest

from mvtk import Tensor
from mvtk.cost import (
    CSV_FIELDS,
    CostReport,
    count_macs,
    count_params,
    instrumented_mac_check,
    instrumented_macs,
    profile_module,
    report,
)
from mvtk.errors import ShapeError
from mvtk.layers import Conv2d, ConvLayer, Linear
from mvtk.zoo import MODEL_NAMES, Model, build, named_spec, shrink

GOLDEN = Path(__file__).parent / "golden"


def golden_cases():
    cases = [(n, None) for n in MODEL_NAMES]
    cases += [(f"mobilevitv3-{s}", 2) for s in ("xxs", "xs", "s")]
    return cases


def golden_path(name, layer4):
    return GOLDEN / (f"{name}-layer4x2.csv" if layer4 else f"{name}.csv")


class TestSmallExamples:
    def test_conv_3_to_16(self):
        assert count_params(Conv2d(3, 16, 3)) == 432

    def test_1x1_conv_macs(self):
        rep = profile_module(Conv2d(4, 8, 1), (1, 4, 16, 16))
        assert rep.total_macs == 4 * 8 * 256 == 8192

    def test_conv_formula(self):
        # Cout * Cin/groups * k^2 * Hout * Wout
        rep = profile_module(Conv2d(8, 12, 3, stride=2, groups=4), (1, 8, 15, 15))
        assert rep.total_macs == 12 * 2 * 9 * 8 * 8
        assert rep.rows[0].shape == (1, 12, 8, 8)

    def test_single_conv_instrumented(self, rng):
        conv = Conv2d(3, 5, 3, stride=2)
        x = rng.standard_normal((1, 3, 9, 9)).astype(np.float32)
        assert instrumented_macs(conv, x) == 5 * 3 * 9 * 5 * 5  # same padding: 9x9 -> 5x5

    def test_linear(self):
        rep = profile_module(Linear(10, 7), (1, 10))
        assert rep.total_params == 77 and rep.total_macs == 70

    def test_pointwise_flag(self):
        layer = ConvLayer(4, 8, 1)
        base = profile_module(layer, (1, 4, 8, 8)).total_macs
        full = profile_module(layer, (1, 4, 8, 8), include_pointwise=True).total_macs
        assert base == 4 * 8 * 64
        assert full == base + 2 * 8 * 64  # norm + activation, one op per output element


class TestReport:
    def test_totals_match(self):
        spec = named_spec("mobilevitv3-xxs")
        rep = report(spec, 256)
        assert rep.total_params == count_params(spec) == build(spec).param_count()
        assert rep.total_macs == count_macs(spec, 256)
        assert rep.total_params == sum(r.params for r in rep.rows)

    def test_params_independent_of_resolution(self):
        spec = named_spec("mobilevitv3-xs")
        a, b = report(spec, 256), report(spec, 128)
        assert a.total_params == b.total_params
        assert a.total_macs > 3 * b.total_macs

    def test_stable_network_order(self):
        rows = report(named_spec("mobilevitv3-xxs"), 256).rows
        names = [r.layer for r in rows]
        assert names[0] == "stem.0.conv" and names[-1] == "classifier"
        first = {p: next(i for i, n in enumerate(names) if n.startswith(p)) for p in
                 ("stem", "layer1", "layer2", "layer3", "layer4", "layer5", "head")}
        assert list(first.values()) == sorted(first.values())

    def test_csv_round_trip(self):
        rep = report(named_spec("mobilevitv3-0.5"), 256)
        text = rep.to_csv()
        assert text.splitlines()[0] == ",".join(CSV_FIELDS)
        assert CostReport.rows_from_csv(text) == rep.rows

    def test_csv_bad_header(self):
        with pytest.raises(ValueError):
            CostReport.rows_from_csv("a,b\n1,2\n")

    def test_json(self):
        rep = report(named_spec("mobilevitv3-xxs"), 256)
        d = json.loads(rep.to_json())
        assert d["total_params"] == rep.total_params and d["total_macs"] == rep.total_macs
        assert set(d["rows"][0]) == set(CSV_FIELDS)

    def test_table_rendering(self):
        text = report(named_spec("mobilevitv3-xxs"), 256).to_table()
        assert "1,249,448" in text and "layer4.1.fusion" in text

    def test_divisibility_error(self):
        with pytest.raises(ShapeError):
            report(named_spec("mobilevitv3-xxs"), 72)

    def test_unknown_convention(self):
        with pytest.raises(ValueError):
            report(named_spec("mobilevitv3-xxs"), 256, attention="flops")


class TestScaling:
    def test_quadratic_in_resolution_for_conv_stages(self):
        spec = named_spec("mobilevitv3-xxs")
        a, b = report(spec, 128), report(spec, 256)
        for prefix in ("stem", "layer1", "layer2"):
            assert b.by_prefix(prefix)[1] == 4 * a.by_prefix(prefix)[1]

    def test_attention_kind(self):
        def attn(spec, res):
            return sum(r.macs for r in report(spec, res, attention="executed").rows if r.kind == "attention")

        mh, sep = named_spec("mobilevitv3-xxs"), named_spec("mobilevitv3-0.5")
        # doubling resolution = 4x tokens per sequence
        assert attn(mh, 256) == 16 * attn(mh, 128)
        assert attn(sep, 256) == 4 * attn(sep, 128)

    def test_profiler_convention_is_separate(self):
        spec = named_spec("mobilevitv1-xxs")
        prof, exe = report(spec, 256), report(spec, 256, attention="executed")
        assert prof.total_params == exe.total_params
        assert prof.total_macs != exe.total_macs
        non_attn = lambda r: sum(x.macs for x in r.rows if x.kind != "attention")
        assert non_attn(prof) == non_attn(exe)


class TestRowDiff:
    def test_v1_s_vs_unscaled_savings_location(self):
        a = {r.layer: r for r in report(named_spec("mobilevitv1-s"), 256).rows}
        b = {r.layer: r for r in report(named_spec("mobilevitv3-s-unscaled"), 256).rows}
        changed = set()
        for name in a.keys() | b.keys():
            ra, rb = a.get(name), b.get(name)
            pa, ma = (ra.params, ra.macs) if ra else (0, 0)
            pb, mb = (rb.params, rb.macs) if rb else (0, 0)
            if (pa, ma) != (pb, mb):
                changed.add(name)
                assert pb <= pa and mb <= ma, name
        assert changed
        for name in changed:
            assert ".fusion." in name or ".local." in name, name
            assert name.split(".")[0] in ("layer3", "layer4", "layer5")
        # MV2 rows (expand/dw/project) are untouched
        assert not any(k in name for name in changed for k in (".expand.", ".dw.", ".project."))


class TestInstrumented:
    @pytest.mark.parametrize("name", MODEL_NAMES)
    def test_static_equals_instrumented(self, name):
        spec = shrink(named_spec(name), width_div=4, L=1, num_classes=10)
        model = build(spec)
        assert instrumented_mac_check(model, 64) == count_macs(model, 64, attention="executed")

    @pytest.mark.parametrize("name", MODEL_NAMES)
    def test_full_size_at_256(self, name):
        model = build(named_spec(name))
        assert instrumented_mac_check(model, 256) == count_macs(model, 256, attention="executed")

    @pytest.mark.parametrize("attention", ["multihead", "separable"])
    @pytest.mark.parametrize("fusion", ["v1", "v2", "v3"])
    def test_tiny_block_exact(self, rng, attention, fusion):
        from mvtk.blocks import MobileViTBlock, MobileViTBlockSpec, fusion_from

        blk = MobileViTBlock(MobileViTBlockSpec(8, 8, 1, attention=attention, heads=2, fusion=fusion_from(fusion)))
        shape = (1, 8, 16, 16)
        static = profile_module(blk, shape, attention="executed").total_macs
        assert instrumented_macs(blk, rng.standard_normal(shape).astype(np.float32)) == static

    def test_tiny_model_exact(self):
        # 64x64 is the smallest input whose stride-32 map is still patch-divisible
        spec = shrink(named_spec("mobilevitv3-xxs"), width_div=8, L=1, num_classes=4)
        assert max(spec.widths) <= 16
        model = build(spec)
        assert instrumented_mac_check(model, 64) == count_macs(model, 64, attention="executed")

    def test_batch_independent(self):
        model = build(shrink(named_spec("mobilevitv3-0.5"), width_div=4, L=1, num_classes=10))
        a = instrumented_mac_check(model, 64, batch=1)
        b = instrumented_mac_check(model, 64, batch=3)
        assert a == b == report(model, 64, attention="executed", batch=3).total_macs

    def test_restores_training_mode(self):
        model = build(shrink(named_spec("mobilevitv3-xxs"), 4, 1, 4)).train()
        instrumented_mac_check(model, 64)
        assert model.training


@pytest.mark.parametrize("name,layer4", golden_cases())
def test_golden(name, layer4):
    """Committed per-layer reports are reproduced exactly."""
    want = golden_path(name, layer4).read_text()
    got = report(named_spec(name, layer4_blocks=layer4), 256).to_csv()
    assert got == want
