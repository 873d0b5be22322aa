"""Compare the compiled kernels against the numpy fallback.

Times each hot kernel on shapes taken from the v3-XXS network at 256x256,
then one whole-model forward pass under each backend (the backend is fixed
at import, so the model timings run in subprocesses).

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from mvtk._kernels import get_backend, native_available

# (name, C, H, W, stride) for depthwise 3x3; im2col uses the dense 3x3 stem-like cases
DW_CASES = [("mv2 dw 32@128", 32, 128, 128, 1), ("mv2 dw 48@64 s2", 48, 128, 128, 2),
            ("local dw 64@32", 64, 32, 32, 1), ("local dw 128@8", 128, 8, 8, 1)]
IM2COL_CASES = [("stem 3@256 s2", 3, 256, 256, 2), ("v1 fusion 96@32", 96, 32, 32, 1),
                ("v1 local 160@8", 160, 8, 8, 1)]


def _time(fn, repeat):
    fn()
    best = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best.append(time.perf_counter() - t0)
    return 1000 * float(np.median(best))


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    backends = ["python"] + (["native"] if native_available() else [])
    rows = []
    for name, c, h, w, s in DW_CASES:
        x = rng.standard_normal((1, c, h, w)).astype(np.float32)
        k = rng.standard_normal((c, 3, 3)).astype(np.float32)
        g = rng.standard_normal((1, c, (h + 2 - 3) // s + 1, (w + 2 - 3) // s + 1)).astype(np.float32)
        for op in ("dw_forward", "dw_backward"):
            row = {"kernel": op, "case": name}
            for b in backends:
                mod = get_backend(b)
                if op == "dw_forward":
                    row[b] = _time(lambda: mod.dw_forward(x, k, s, 1), repeat)
                else:
                    row[b] = _time(lambda: mod.dw_backward(g, x, k, s, 1), repeat)
            rows.append(row)
    for name, c, h, w, s in IM2COL_CASES:
        x = rng.standard_normal((1, c, h, w)).astype(np.float32)
        ho = (h + 2 - 3) // s + 1
        cols = rng.standard_normal((1, c * 9, ho * ho)).astype(np.float32)
        for op in ("im2col", "col2im"):
            row = {"kernel": op, "case": name}
            for b in backends:
                mod = get_backend(b)
                if op == "im2col":
                    row[b] = _time(lambda: mod.im2col(x, 3, 3, s, 1), repeat)
                else:
                    row[b] = _time(lambda: mod.col2im(cols, x.shape, 3, 3, s, 1), repeat)
            rows.append(row)
    return rows


_MODEL_SNIPPET = """
import json, numpy as np
from mvtk import build, named_spec, BACKEND
from mvtk.bench import benchmark
m = build(named_spec("mobilevitv3-xxs"))
r = benchmark(m, batch=1, iterations={it}, warmup=1)
print(json.dumps({{"backend": BACKEND, "mean_ms": r.mean_ms}}))
"""


def model_table(iterations):
    out = []
    for b in ["python"] + (["native"] if native_available() else []):
        env = dict(os.environ, MVTK_KERNELS=b)
        res = subprocess.run([sys.executable, "-c", _MODEL_SNIPPET.format(it=iterations)], env=env,
                             capture_output=True, text=True, check=True)
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--model-iterations", type=int, default=3)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args()
    rows = kernel_table(args.repeat)
    print(f"{'kernel':<12} {'case':<18} {'python ms':>10} {'native ms':>10} {'speedup':>8}")
    for r in rows:
        nat = r.get("native")
        sp = f"{r['python'] / nat:8.2f}" if nat else "     n/a"
        print(f"{r['kernel']:<12} {r['case']:<18} {r['python']:>10.3f} {nat if nat else float('nan'):>10.3f} {sp}")
    models = model_table(args.model_iterations)
    for m in models:
        print(f"mobilevitv3-xxs forward @256, {m['backend']:<6} backend: {m['mean_ms']:.1f} ms")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"kernels": rows, "model": models}, f, indent=1)


if __name__ == "__main__":
    main()
