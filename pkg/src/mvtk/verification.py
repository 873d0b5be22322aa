"""Gradient checking, a synthetic toy task, and the toy training harness."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .blocks import ABLATION, FusionConfig, InvertedResidual, MobileViTBlock, MobileViTBlockSpec, MV2Spec
from .cost import count_macs
from .errors import ConfigError, DivergenceError, GradientError
from .layers import Module, init_weights
from .tensor import Tensor, backward, kink_log, no_grad

REL_DELTA = 1e-8
_U = np.finfo(np.float64).eps


def rel_error(a, b, delta: float = REL_DELTA) -> np.ndarray:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), delta)


# ---------------------------------------------------------------- gradcheck


@dataclass
class GroupResult:
    name: str
    max_rel_err: float
    argmax: tuple
    checked: int
    below_noise: int
    kinked: int
    passed: bool


@dataclass
class GradCheckReport:
    threshold: float
    eps: float
    groups: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups), default=0.0)

    def worst(self) -> Optional[GroupResult]:
        return max(self.groups, key=lambda g: g.max_rel_err, default=None)

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "eps": self.eps, "passed": self.passed,
                "max_rel_err": self.max_rel_err, "groups": [asdict(g) for g in self.groups]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def summary(self) -> str:
        lines = [f"{'group':<44} {'checked':>7} {'max rel err':>12}  status"]
        for g in self.groups:
            lines.append(f"{g.name:<44} {g.checked:>7} {g.max_rel_err:>12.3e}  {'ok' if g.passed else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (max {self.max_rel_err:.3e}, "
                     f"threshold {self.threshold:.0e})")
        return "\n".join(lines)


def check_gradients(loss_fn: Callable[[], Tensor], groups: Sequence[tuple[str, Tensor]], threshold: float,
                    eps: float = 1e-4, max_per_group: int = 25, seed: int = 0,
                    noise_fn: Optional[Callable[[], float]] = None, stencil: int = 5) -> GradCheckReport:
    """Compare backward() against central differences for the given tensors.

    ``loss_fn`` must rebuild the scalar loss from the current tensor values.
    The step for element ``t`` is ``h = eps * max(1, |t|)``. At most
    ``max_per_group`` elements per tensor are probed, chosen by ``seed``.
    ``stencil=5`` uses the fourth-order central difference
    ``(8 (f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h``; ``stencil=3`` the
    plain ``(f(h) - f(-h)) / 2h``, whose O(h^2) truncation error can exceed
    1e-4 relative on small components with large curvature.

    ``noise_fn`` returns the absolute roundoff level of one loss evaluation.
    Elements whose analytic and numeric derivatives both sit below the
    resulting difference-quotient noise floor are structurally zero
    gradients (for example a key bias under softmax shift invariance); they
    are counted in ``below_noise`` and excluded from the maximum.

    Probes whose +h or -h evaluation flips the side of any ReLU relative to
    the unperturbed pass straddle a kink, where the difference quotient is
    not a derivative; they are counted in ``kinked`` and excluded too.
    """
    if stencil not in (3, 5):
        raise ValueError(f"stencil must be 3 or 5, got {stencil}")
    offsets = (1, -1, 2, -2) if stencil == 5 else (1, -1)
    rng = np.random.default_rng(seed)
    for _, t in groups:
        t.grad = None
        t.requires_grad = True
    with kink_log() as base_pattern:
        loss = loss_fn()
    backward(loss)

    def same_side(log):
        return len(log) == len(base_pattern) and all(np.array_equal(a, b) for a, b in zip(log, base_pattern))

    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for name, t in groups}
    report = GradCheckReport(threshold, eps)
    for name, t in groups:
        flat = t.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= max_per_group else np.sort(rng.choice(n, max_per_group, replace=False))
        errs, used, skipped, kinked = [], [], 0, 0
        for i in picks:
            orig = flat[i]
            h = eps * max(1.0, abs(float(orig)))
            f, smooth = {}, True
            with no_grad():
                for k in offsets:
                    flat[i] = orig + k * h
                    with kink_log() as log:
                        f[k] = loss_fn().item()
                    smooth = smooth and same_side(log)
                flat[i] = orig
            if not smooth:
                kinked += 1
                continue
            if stencil == 5:
                num = (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * h)
            else:
                num = (f[1] - f[-1]) / (2 * h)
            ana = float(analytic[name].reshape(-1)[i])
            if not (math.isfinite(num) and math.isfinite(ana)):
                raise GradientError(f"non-finite gradient in {name} at flat index {i}: analytic {ana}, numeric {num}")
            floor = (noise_fn() / h) if noise_fn else 0.0
            if abs(ana) <= floor and abs(num) <= floor:
                skipped += 1
                errs.append(0.0)
            else:
                errs.append(float(rel_error(ana, num)))
            used.append(i)
        errs = np.asarray(errs)
        k = int(errs.argmax()) if errs.size else 0
        idx = tuple(int(v) for v in np.unravel_index(used[k], t.shape)) if errs.size else ()
        worst = float(errs[k]) if errs.size else 0.0
        report.groups.append(GroupResult(name, worst, idx, len(used), skipped, kinked, worst < threshold))
    return report


def gradcheck(module: Module, input_shape: tuple, threshold: float = 1e-4, eps: float = 1e-4,
              max_per_group: int = 25, seed: int = 0, check_input: bool = True,
              dtype=np.float64, stencil: int = 5) -> GradCheckReport:
    """Central-difference check of every parameter group of ``module`` (and its input).

    Runs in train mode (batch statistics) at 64-bit by default. The loss is
    ``sum(out * R)`` with ``R`` a fixed normal draw scaled by ``1/sqrt(out.size)``.
    """
    module.to(dtype).train()
    buffers = [(n, b.copy()) for n, b in module.named_buffers()]
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(input_shape).astype(dtype), requires_grad=check_input)
    with no_grad():
        out_shape = module(x).shape
    R = Tensor(rng.standard_normal(out_shape).astype(dtype) / math.sqrt(np.prod(out_shape)))
    last = {}

    def loss_fn():
        out = module(x)
        last["abs"] = float(np.abs(out.data * R.data).sum())
        return ops.sum(ops.mul(out, R))

    def noise():
        # forward roundoff compounds through the network; 64 ulps of the loss terms is generous
        return 64 * _U * last["abs"]

    groups = list(module.named_parameters())
    if check_input:
        groups.append(("input", x))
    try:
        return check_gradients(loss_fn, groups, threshold, eps, max_per_group, seed, noise, stencil)
    finally:
        bufs = dict(module.named_buffers())
        for n, b in buffers:
            bufs[n][...] = b


def tiny_block(kind: str = "v3", size: str = "tiny", seed: int = 0) -> tuple[Module, tuple]:
    """Small blocks for gradient checks: (module, input shape)."""
    dims = {"tiny": (8, 8, 1, 16), "small": (16, 24, 2, 16)}
    if size not in dims:
        raise ConfigError(f"unknown size {size!r}; choose from {sorted(dims)}")
    C, d, L, hw = dims[size]
    if kind == "mv2":
        mod = InvertedResidual(MV2Spec(C, C, 1, 2))
    elif kind in ("v1", "v3", "v3-v2", "v2"):
        attention = "separable" if kind in ("v2", "v3-v2") else "multihead"
        fusion = {"v1": "v1", "v2": "v2", "v3": "v3", "v3-v2": "v3"}[kind]
        heads = 2 if d % 4 else 4
        mod = MobileViTBlock(MobileViTBlockSpec(C=C, d=d, L=L, attention=attention, heads=heads).with_fusion(fusion))
    else:
        raise ConfigError(f"unknown block {kind!r}; choose from mv2, v1, v2, v3, v3-v2")
    init_weights(mod, seed, std=0.2)
    return mod, (2, C, hw, hw)


# ---------------------------------------------------------------- toy task

_COLORS = np.array([[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.15, 0.2, 0.9], [0.9, 0.85, 0.1],
                    [0.8, 0.2, 0.8], [0.1, 0.8, 0.8], [0.95, 0.5, 0.1], [0.5, 0.5, 0.5]])


@dataclass(frozen=True)
class ToyTask:
    """Colored Gaussian blobs on a noisy grey background; the class is the blob color."""

    num_classes: int = 4
    samples_per_class: int = 32
    image_size: int = 64
    seed: int = 0
    steps: int = 500
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 0.01
    warmup: int = 20

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(_COLORS):
            raise ConfigError(f"num_classes must be in [2, {len(_COLORS)}]")
        if self.image_size % 64:
            # the stride-32 map must still split into 2x2 patches
            raise ConfigError("image_size must be a multiple of 64 so every stage is patch-divisible")

    def dataset(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        n, s = self.num_classes * self.samples_per_class, self.image_size
        labels = np.repeat(np.arange(self.num_classes), self.samples_per_class)
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        images = np.empty((n, 3, s, s), np.float32)
        for i, c in enumerate(labels):
            cy, cx = rng.uniform(0.25 * s, 0.75 * s, 2)
            sigma = rng.uniform(0.1 * s, 0.2 * s)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            bg = 0.5 + 0.1 * rng.standard_normal((3, s, s))
            img = bg * (1 - blob) + _COLORS[c][:, None, None] * blob
            images[i] = ((img - 0.5) / 0.25).astype(np.float32)
        order = rng.permutation(n)
        return images[order], labels[order]


class AdamW:
    """Adam with decoupled weight decay (biases and norm affine are not decayed)."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.decay = [p.ndim > 1 for _, p in self.params]
        self.t = 0

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for (_, p), m, v, decay in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if decay and self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def lr_at(step: int, task: ToyTask) -> float:
    """Linear warmup then cosine decay to zero."""
    if task.warmup and step < task.warmup:
        return task.lr * (step + 1) / task.warmup
    span = max(1, task.steps - task.warmup)
    return 0.5 * task.lr * (1 + math.cos(math.pi * min(1.0, (step - task.warmup) / span)))


@dataclass
class TrainResult:
    losses: list
    accs: list
    final_acc: float
    final_loss: float
    initial_loss: float

    def curve_csv(self) -> str:
        rows = ["step,loss,acc"] + [f"{i},{l!r},{a!r}" for i, (l, a) in enumerate(zip(self.losses, self.accs))]
        return "\n".join(rows) + "\n"


def evaluate(model: Module, images: np.ndarray, labels: np.ndarray, batch: int = 64) -> tuple[float, float]:
    """(mean loss, accuracy) in eval mode."""
    model.eval()
    total, correct = 0.0, 0
    with no_grad():
        for i in range(0, len(labels), batch):
            logits = model(Tensor(images[i:i + batch]))
            total += ops.cross_entropy(logits, labels[i:i + batch]).item() * len(labels[i:i + batch])
            correct += int((logits.data.argmax(axis=1) == labels[i:i + batch]).sum())
    model.train()
    return total / len(labels), correct / len(labels)


def train_toy(spec, task: ToyTask = ToyTask(), seed: int = 0, progress: Optional[Callable] = None) -> TrainResult:
    """Train a (shrunk) model on the toy task; deterministic given seeds and thread count."""
    from .zoo import ModelSpec, build

    if not isinstance(spec, ModelSpec):
        raise ConfigError("train_toy needs a ModelSpec")
    if spec.num_classes != task.num_classes:
        raise ConfigError(f"model has {spec.num_classes} classes but the task has {task.num_classes}")
    model = build(spec, seed=seed)
    images, labels = task.dataset()
    n = len(labels)
    bs = min(task.batch_size, n)
    opt = AdamW(model.named_parameters(), task.lr, weight_decay=task.weight_decay)
    order_rng = np.random.default_rng(seed + 1)
    order, pos = order_rng.permutation(n), 0
    losses, accs = [], []
    initial_loss, _ = evaluate(model, images, labels)
    model.train()
    for step in range(task.steps):
        if bs == n:
            idx = np.arange(n)
        else:
            if pos + bs > n:
                order, pos = order_rng.permutation(n), 0
            idx = order[pos:pos + bs]
            pos += bs
        logits = model(Tensor(images[idx]))
        loss = ops.cross_entropy(logits, labels[idx])
        lv = loss.item()
        if not math.isfinite(lv):
            raise DivergenceError(f"non-finite loss {lv} at step {step}", step=step)
        backward(loss)
        opt.step(lr_at(step, task))
        opt.zero_grad()
        losses.append(lv)
        accs.append(float((logits.data.argmax(axis=1) == labels[idx]).mean()))
        if progress:
            progress(step, lv, accs[-1])
    final_loss, final_acc = evaluate(model, images, labels)
    return TrainResult(losses, accs, final_acc, final_loss, initial_loss)


def toy_spec(base: str = "mobilevitv3-xxs", num_classes: int = 4, width_div: int = 4, L: int = 1,
             fusion: Optional[FusionConfig] = None):
    from .zoo import named_spec, shrink

    spec = shrink(named_spec(base), width_div, L, num_classes=num_classes)
    return spec.with_fusion(fusion) if fusion is not None else spec


@dataclass
class AblationRow:
    label: str
    flags: dict
    params: int
    macs: int
    initial_loss: float
    final_loss: float
    final_acc: float


def ablation_sweep(task: ToyTask, flag_sets: Sequence[FusionConfig] = ABLATION, base: str = "mobilevitv1-s",
                   seed: int = 0) -> list[AblationRow]:
    """Train the shrunk ``base`` model once per fusion configuration."""
    rows = []
    for cfg in flag_sets:
        spec = toy_spec(base, task.num_classes, fusion=cfg)
        res = train_toy(spec, task, seed=seed)
        from .zoo import build

        model = build(spec, seed=seed)
        rows.append(AblationRow(cfg.label, cfg.to_dict(), model.param_count(),
                                count_macs(model, task.image_size), res.initial_loss, res.final_loss, res.final_acc))
    return rows
