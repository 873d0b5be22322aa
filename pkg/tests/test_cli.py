import csv
import io
import json

import numpy as np
import pytest

from mvtk import Tensor, no_grad, ops
from mvtk.cli import main
from mvtk.cost import CSV_FIELDS, CostReport, report
from mvtk.imageio import load_image, preprocess, read_ppm, write_ppm
from mvtk.serialization import save_tensor
from mvtk.zoo import MODEL_NAMES, build, named_spec, save_spec, serialize


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def image(tmp_path):
    img = np.random.default_rng(5).random((3, 80, 96))
    path = tmp_path / "img.ppm"
    write_ppm(path, img)
    return path


class TestDescribe:
    def test_v3_s_head_width(self, capsys):
        code, out, _ = run(capsys, "describe", "mobilevitv3-s")
        assert code == 0
        assert "1280" in out and "layer4" in out

    def test_layer4_override(self, capsys):
        code, out, _ = run(capsys, "describe", "mobilevitv3-xs", "--layer4-blocks", "2")
        assert code == 0
        line = next(l for l in out.splitlines() if l.startswith("layer4: MobileViT"))
        assert "L=2" in line

    def test_unknown_model_lists_names(self, capsys):
        code, _, err = run(capsys, "describe", "mobilevitv4-xxs")
        assert code == 2
        assert all(n in err for n in MODEL_NAMES)

    def test_bad_flag_is_usage_error(self, capsys):
        assert run(capsys, "describe", "mobilevitv3-s", "--layer4-blocks", "3")[0] == 2


class TestCount:
    def test_table_totals(self, capsys):
        code, out, _ = run(capsys, "count", "mobilevitv3-xxs")
        assert code == 0 and "1,249,448" in out

    def test_csv_to_file(self, capsys, tmp_path):
        path = tmp_path / "r.csv"
        code, out, _ = run(capsys, "count", "mobilevitv1-s", "--format", "csv", "--out", path)
        assert code == 0
        text = path.read_text()
        rows = list(csv.DictReader(io.StringIO(text)))
        assert list(rows[0]) == list(CSV_FIELDS)
        rep = report(named_spec("mobilevitv1-s"), 256)
        assert CostReport.rows_from_csv(text) == rep.rows
        assert sum(int(r["params"]) for r in rows) == rep.total_params
        # the human summary still lands on stdout, not in the file
        assert text not in out and str(rep.total_params) in out.replace(",", "")

    def test_json_stdout(self, capsys):
        code, out, _ = run(capsys, "count", "mobilevitv3-0.5", "--format", "json", "--res", "128")
        d = json.loads(out)
        assert code == 0 and d["total_macs"] == report(named_spec("mobilevitv3-0.5"), 128).total_macs

    def test_bad_resolution(self, capsys):
        code, _, err = run(capsys, "count", "mobilevitv3-xxs", "--res", "72")
        assert code == 2 and "layer" in err

    def test_yaml_spec(self, capsys, tmp_path):
        path = tmp_path / "m.yaml"
        save_spec(named_spec("mobilevitv3-xs"), path)
        _, a, _ = run(capsys, "count", path)
        _, b, _ = run(capsys, "count", "mobilevitv3-xs")
        assert a == b


class TestInfer:
    def _ranked(self, out):
        lines = [l for l in out.splitlines() if l[:1].isdigit()]
        return [(int(l.split()[2]), float(l.split()[-1])) for l in lines]

    def test_top5_sorted(self, capsys, image, tmp_path):
        code, out, _ = run(capsys, "infer", "mobilevitv3-xxs", "--image", image, "--out", tmp_path / "o.json")
        assert code == 0
        ranked = self._ranked(out)
        scores = [s for _, s in ranked]
        assert len(ranked) == 5 and scores == sorted(scores, reverse=True) and sum(scores) <= 1.0
        d = json.loads((tmp_path / "o.json").read_text())
        assert d["topk"] == [i for i, _ in ranked] and len(d["logits"]) == 1000

    def test_deterministic(self, capsys, image):
        a = run(capsys, "infer", "mobilevitv3-0.5", "--image", image)
        b = run(capsys, "infer", "mobilevitv3-0.5", "--image", image)
        assert a == b

    def test_matches_library(self, capsys, image, tmp_path):
        model = build(named_spec("mobilevitv2-0.5"), seed=3)
        serialize(model, tmp_path / "w.mvtk")
        code, out, _ = run(capsys, "infer", "--weights", tmp_path / "w.mvtk", "--image", image,
                           "--topk", "3", "--out", tmp_path / "o.json")
        assert code == 0
        model.eval()
        with no_grad():
            logits = model(Tensor(preprocess(load_image(image), 256))).data[0]
        probs = ops.softmax(Tensor(logits[None]), axis=1).data[0]
        want = np.argsort(-probs, kind="stable")[:3].tolist()
        d = json.loads((tmp_path / "o.json").read_text())
        assert d["topk"] == want
        assert np.allclose(d["logits"], logits, rtol=0, atol=0)

    def test_tensor_image(self, capsys, tmp_path):
        save_tensor(tmp_path / "x.mvtk", np.full((1, 3, 64, 64), 0.5, np.float32))
        code, out, _ = run(capsys, "infer", "mobilevitv3-xxs", "--image", tmp_path / "x.mvtk", "--res", "64")
        assert code == 0 and len(self._ranked(out)) == 5

    def test_weights_model_mismatch(self, capsys, tmp_path, image):
        serialize(build(named_spec("mobilevitv3-xxs")), tmp_path / "w.mvtk")
        code, _, err = run(capsys, "infer", "mobilevitv3-xs", "--weights", tmp_path / "w.mvtk", "--image", image)
        assert code == 2 and "mobilevitv3-xxs" in err

    def test_bad_image(self, capsys, tmp_path):
        (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        code, _, err = run(capsys, "infer", "mobilevitv3-xxs", "--image", tmp_path / "bad.ppm")
        assert code == 2 and "P6" in err


class TestImageIO:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255.0
        write_ppm(tmp_path / "a.ppm", img)
        assert np.allclose(read_ppm(tmp_path / "a.ppm"), img, atol=1e-7)

    def test_preprocess_shape_and_crop(self):
        img = np.zeros((3, 40, 80), np.float32)
        img[:, :, 20:60] = 1.0  # the central square survives the crop
        out = preprocess(img, 32)
        assert out.shape == (1, 3, 32, 32) and out.min() == 1.0


class TestBench:
    def test_single_pass(self, capsys, tmp_path):
        path = tmp_path / "b.json"
        code, out, _ = run(capsys, "bench", "mobilevitv3-xxs", "--iterations", "1", "--warmup", "0",
                           "--res", "128", "--out", path)
        d = json.loads(path.read_text())
        assert code == 0 and len(d["times_ms"]) == 1 and d["warmup"] == 0
        assert d["macs_per_image"] == report(named_spec("mobilevitv3-xxs"), 128).total_macs
        assert "images/s" in out

    def test_json_stdout(self, capsys):
        code, out, _ = run(capsys, "bench", "mobilevitv3-xxs", "--iterations", "2", "--warmup", "0",
                           "--res", "64", "--format", "json", "--batch", "2")
        d = json.loads(out)
        assert code == 0 and d["batch"] == 2 and len(d["times_ms"]) == 2

    def test_invalid_iterations(self, capsys):
        assert run(capsys, "bench", "mobilevitv3-xxs", "--iterations", "0")[0] == 2


class TestGradcheck:
    def test_pass(self, capsys, tmp_path):
        code, out, _ = run(capsys, "gradcheck", "--block", "v3", "--out", tmp_path / "g.json")
        assert code == 0 and "overall: PASS" in out
        assert json.loads((tmp_path / "g.json").read_text())["passed"] is True

    def test_failure_exit_code(self, capsys):
        # an impossible threshold must fail the run rather than report success
        code, out, _ = run(capsys, "gradcheck", "--block", "mv2", "--threshold", "0")
        assert code == 1 and "FAIL" in out


class TestTrainToy:
    ARGS = ("train-toy", "--steps", "5", "--samples-per-class", "4", "--width-div", "8", "--batch", "8")

    def test_same_seed_identical(self, capsys, tmp_path):
        a = run(capsys, *self.ARGS, "--seed", "7", "--out", tmp_path / "a.csv")
        b = run(capsys, *self.ARGS, "--seed", "7", "--out", tmp_path / "b.csv")
        assert a == b and a[0] == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert len((tmp_path / "a.csv").read_text().splitlines()) == 6

    def test_min_acc_failure(self, capsys):
        code, out, _ = run(capsys, *self.ARGS, "--min-acc", "1.01")
        assert code == 1 and "FAIL" in out

    def test_divergence_exit(self, capsys):
        code, out, _ = run(capsys, *self.ARGS, "--lr", "1e6", "--steps", "30")
        assert code == 1 and "diverged" in out

    def test_bad_image_size(self, capsys):
        assert run(capsys, *self.ARGS, "--image-size", "48")[0] == 2


class TestAblate:
    def test_ablation_five_rows(self, capsys, tmp_path):
        path = tmp_path / "a.csv"
        code, out, _ = run(capsys, "ablate", "--preset", "table6", "--steps", "100", "--samples-per-class", "4",
                           "--out", path)
        rows = list(csv.DictReader(io.StringIO(path.read_text())))
        assert len(rows) == 5 and [r["row"] for r in rows] == ["1", "2", "3", "4", "5"]
        assert code == 0, out

    def test_default_preset(self):
        from mvtk.cli import build_parser

        assert build_parser().parse_args(["ablate"]).preset == "fusion-ablation"

    def test_unknown_preset(self, capsys):
        assert run(capsys, "ablate", "--preset", "table9", "--steps", "1")[0] == 2


def test_threads_flag(capsys):
    a = run(capsys, "describe", "mobilevitv3-xxs", "--threads", "1")
    assert a[0] == 0
    assert run(capsys, "describe", "mobilevitv3-xxs", "--threads", "0")[0] == 2
