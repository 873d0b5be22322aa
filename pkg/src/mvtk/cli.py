"""Command-line entry point: ``mvtk <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage error (bad flags,
unknown model, malformed input files). Human-readable output goes to
stdout; machine formats go to ``--out`` (or to stdout alone when no
``--out`` is given).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import ops
from .blocks import ABLATION
from .errors import ConfigError, DivergenceError, MvtkError
from .zoo import MODEL_NAMES, ModelSpec, build, describe_rows, deserialize, load_spec, named_spec

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
# "table6" is kept as an alias for scripts written against the original flag name
ABLATION_PRESETS = ("fusion-ablation", "table6")


class UsageError(MvtkError):
    pass


def _resolve_spec(model: str, layer4_blocks=None) -> ModelSpec:
    if model.endswith((".yaml", ".yml")) or Path(model).is_file():
        spec = load_spec(model)
        if layer4_blocks is not None:
            from dataclasses import replace

            spec = replace(spec, layer4_blocks=layer4_blocks)
        return spec
    return named_spec(model, layer4_blocks=layer4_blocks)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------- subcommands


def cmd_describe(args) -> int:
    spec = _resolve_spec(args.model, args.layer4_blocks)
    rows = describe_rows(spec, args.res)
    print(f"{spec.name}" + (f" (layer4 blocks: {spec.layer4_blocks})" if spec.layer4_blocks else ""))
    print(f"{'Layer':<36} {'Size':>9} {'Stride':>6} {'Repeat':>6} {'Width':>6}  Detail")
    for r in rows:
        print(f"{r['layer']:<36} {r['size']:>9} {r['stride']:>6} {str(r['repeat']):>6} {r['width']:>6}  {r['detail']}")
    widths = ", ".join(str(w) for w in spec.widths)
    print(f"widths: [{widths}]  head: {spec.head_channels or 'none'}  classes: {spec.num_classes}")
    return EXIT_OK


def cmd_count(args) -> int:
    from .cost import report

    spec = _resolve_spec(args.model, args.layer4_blocks)
    rep = report(spec, args.res, attention=args.attention, include_pointwise=args.include_pointwise)
    if args.format == "table":
        _emit(rep.to_table(), args.out)
    else:
        _emit(rep.to_csv() if args.format == "csv" else rep.to_json(), args.out)
        if args.out:
            print(rep.summary())
    return EXIT_OK


def cmd_infer(args) -> int:
    from .imageio import load_image, preprocess
    from .tensor import Tensor, no_grad

    if args.weights:
        model = deserialize(args.weights)
        if args.model and args.model != model.spec.name:
            want = _resolve_spec(args.model)
            if want.to_dict() != model.spec.to_dict():
                raise ConfigError(f"weights are for {model.spec.name!r}, not {args.model!r}")
    else:
        if not args.model:
            raise UsageError("infer needs a model name/spec or --weights")
        model = build(_resolve_spec(args.model), seed=args.seed)
    x = preprocess(load_image(args.image), args.res).astype(model.dtype)
    model.eval()
    with no_grad():
        logits = model(Tensor(x))
    probs = ops.softmax(logits, axis=1).data[0]
    k = min(args.topk, probs.size)
    top = np.argsort(-probs, kind="stable")[:k]
    print(f"{model.spec.name}: top-{k} of {probs.size} classes")
    for rank, idx in enumerate(top, 1):
        print(f"{rank}. class {int(idx):>4}  score {float(probs[idx]):.6f}")
    if args.out:
        Path(args.out).write_text(json.dumps({
            "model": model.spec.name, "topk": [int(i) for i in top],
            "scores": [float(probs[i]) for i in top], "logits": [float(v) for v in logits.data[0]]}))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import benchmark

    spec = _resolve_spec(args.model, args.layer4_blocks)
    model = build(spec, seed=args.seed)
    rep = benchmark(model, args.batch, args.iterations, args.warmup, args.res, seed=args.seed)
    if args.format == "json" and not args.out:
        print(rep.to_json())
        return EXIT_OK
    print(rep.summary())
    if args.out:
        Path(args.out).write_text(rep.to_json())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verification import gradcheck, tiny_block

    mod, shape = tiny_block(args.block, args.size, seed=args.seed)
    rep = gradcheck(mod, shape, threshold=args.threshold, eps=args.eps, seed=args.seed)
    print(f"gradcheck {args.block} ({args.size}, input {'x'.join(map(str, shape))}, float64)")
    print(rep.summary())
    if args.out:
        Path(args.out).write_text(rep.to_json())
    return EXIT_OK if rep.passed else EXIT_FAIL


def _task(args):
    from .verification import ToyTask

    return ToyTask(num_classes=args.classes, samples_per_class=args.samples_per_class, image_size=args.image_size,
                   seed=args.data_seed, steps=args.steps, batch_size=args.batch, lr=args.lr)


def cmd_train_toy(args) -> int:
    from .verification import toy_spec, train_toy

    task = _task(args)
    spec = toy_spec(args.model, task.num_classes, args.width_div, args.L)

    def progress(step, loss, acc):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step:>4}  loss {loss:.6f}  batch acc {acc:.3f}")

    try:
        res = train_toy(spec, task, seed=args.seed, progress=progress)
    except DivergenceError as e:
        print(f"diverged: {e}")
        return EXIT_FAIL
    print(f"{spec.name}: {task.steps} steps, initial loss {res.initial_loss!r}, final loss {res.final_loss!r}, "
          f"train accuracy {res.final_acc:.4f}")
    if args.out:
        Path(args.out).write_text(res.curve_csv())
    if args.min_acc is not None and res.final_acc < args.min_acc:
        print(f"FAIL: accuracy {res.final_acc:.4f} below {args.min_acc}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .verification import ablation_sweep

    task = _task(args)
    try:
        rows = ablation_sweep(task, ABLATION, base=args.model, seed=args.seed)
    except DivergenceError as e:
        print(f"diverged: {e}")
        return EXIT_FAIL
    fields = ("row", "label", "params", "macs", "initial_loss", "final_loss", "final_acc")
    print(f"{'row':>3} {'configuration':<40} {'params':>9} {'MACs':>11} {'init loss':>10} {'final loss':>10} {'acc':>6}")
    for i, r in enumerate(rows, 1):
        print(f"{i:>3} {r.label:<40} {r.params:>9,} {r.macs:>11,} {r.initial_loss:>10.4f} {r.final_loss:>10.4f} "
              f"{r.final_acc:>6.3f}")
    if args.out:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for i, r in enumerate(rows, 1):
            w.writerow([i, r.label, r.params, r.macs, repr(r.initial_loss), repr(r.final_loss), repr(r.final_acc)])
        Path(args.out).write_text(buf.getvalue())
    bad = [r.label for r in rows if not r.final_loss < r.initial_loss]
    if bad:
        print(f"FAIL: no loss improvement for {bad}")
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _threads_default():
    v = os.environ.get("MVTK_THREADS")
    return int(v) if v and v.isdigit() else None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    common.add_argument("--threads", type=int, default=_threads_default(),
                        help="BLAS/OpenMP thread cap (default: $MVTK_THREADS, else library default)")

    p = argparse.ArgumentParser(prog="mvtk", description="MobileViT v1/v2/v3 toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp, res=256):
        sp.add_argument("model", help=f"model name ({', '.join(MODEL_NAMES)}) or YAML spec path")
        sp.add_argument("--res", type=int, default=res, help="square input resolution")
        sp.add_argument("--layer4-blocks", type=int, choices=(2, 4), default=None,
                        help="transformer layers in the layer4 MobileViT block")

    sp = sub.add_parser("describe", parents=[common], help="print the stage table")
    model_args(sp)
    sp.set_defaults(func=cmd_describe)

    sp = sub.add_parser("count", parents=[common], help="parameter and MAC report")
    model_args(sp)
    sp.add_argument("--format", choices=("table", "csv", "json"), default="table")
    sp.add_argument("--out", help="write the report here")
    sp.add_argument("--attention", choices=("profiler", "executed"), default="profiler",
                    help="multi-head attention MAC convention")
    sp.add_argument("--include-pointwise", action="store_true", help="count norms, activations and adds")
    sp.set_defaults(func=cmd_count)

    sp = sub.add_parser("infer", parents=[common], help="top-k classes for one image")
    sp.add_argument("model", nargs="?", help="model name or spec (optional with --weights)")
    sp.add_argument("--weights", help="weight pack written by serialize()")
    sp.add_argument("--image", required=True, help="PPM (P6) or MVTK tensor file")
    sp.add_argument("--res", type=int, default=256)
    sp.add_argument("--topk", type=int, default=5)
    sp.add_argument("--out", help="write JSON with top-k and logits")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("bench", parents=[common], help="forward latency and throughput")
    model_args(sp)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--iterations", type=int, default=10)
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--format", choices=("human", "json"), default="human")
    sp.add_argument("--out", help="write JSON report here")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a small block")
    sp.add_argument("--block", choices=("mv2", "v1", "v2", "v3", "v3-v2"), default="v3")
    sp.add_argument("--size", choices=("tiny", "small"), default="tiny")
    sp.add_argument("--threshold", type=float, default=1e-4)
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--out", help="write JSON report here")
    sp.set_defaults(func=cmd_gradcheck)

    def toy_args(sp, steps, model):
        sp.add_argument("--model", default=model, help="named model to shrink")
        sp.add_argument("--steps", type=int, default=steps)
        sp.add_argument("--batch", type=int, default=16)
        sp.add_argument("--lr", type=float, default=2e-3)
        sp.add_argument("--classes", type=int, default=4)
        sp.add_argument("--samples-per-class", type=int, default=32)
        sp.add_argument("--image-size", type=int, default=64)
        sp.add_argument("--data-seed", type=int, default=0)
        sp.add_argument("--out", help="CSV output path")

    sp = sub.add_parser("train-toy", parents=[common], help="train a shrunk model on synthetic blobs")
    toy_args(sp, 500, "mobilevitv3-xxs")
    sp.add_argument("--width-div", type=int, default=4)
    sp.add_argument("--L", type=int, default=1)
    sp.add_argument("--min-acc", type=float, default=None, help="exit 1 if final accuracy is lower")
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(func=cmd_train_toy)

    sp = sub.add_parser("ablate", parents=[common], help="train every fusion ablation configuration")
    sp.add_argument("--preset", default="fusion-ablation", choices=ABLATION_PRESETS)
    toy_args(sp, 150, "mobilevitv1-s")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    limit = contextlib.nullcontext()
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(limits=args.threads)
    try:
        with limit:
            return args.func(args)
    except MvtkError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
