"""Forward-pass latency and throughput measurement."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from ._kernels import BACKEND
from .cost import count_macs
from .errors import ResourceError
from .tensor import Tensor, no_grad


@dataclass
class BenchReport:
    model: str
    batch: int
    resolution: int
    iterations: int
    warmup: int
    times_ms: list
    macs_per_image: int
    backend: str

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.times_ms))

    @property
    def p50_ms(self) -> float:
        return float(np.percentile(self.times_ms, 50))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.times_ms, 95))

    @property
    def images_per_sec(self) -> float:
        return 1000.0 * self.batch / self.mean_ms

    @property
    def gmacs_per_sec(self) -> float:
        return self.images_per_sec * self.macs_per_image / 1e9

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean_ms=self.mean_ms, p50_ms=self.p50_ms, p95_ms=self.p95_ms,
                 images_per_sec=self.images_per_sec, gmacs_per_sec=self.gmacs_per_sec)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def summary(self) -> str:
        return (f"{self.model} batch={self.batch} res={self.resolution} backend={self.backend}\n"
                f"  latency ms: mean {self.mean_ms:.2f}  p50 {self.p50_ms:.2f}  p95 {self.p95_ms:.2f} "
                f"({self.iterations} timed, {self.warmup} warmup)\n"
                f"  throughput: {self.images_per_sec:.2f} images/s, {self.gmacs_per_sec:.2f} GMAC/s "
                f"({self.macs_per_image / 1e6:.1f} M MACs/image)")


def benchmark(model, batch: int = 1, iterations: int = 10, warmup: int = 2, resolution: int = 256,
              seed: int = 0) -> BenchReport:
    """Time ``iterations`` eval-mode forward passes after ``warmup`` untimed ones."""
    if batch < 1 or iterations < 1 or warmup < 0:
        raise ValueError("batch and iterations must be >= 1 and warmup >= 0")
    model.eval()
    try:
        x = np.random.default_rng(seed).standard_normal(
            (batch, model.spec.in_channels, resolution, resolution)).astype(model.dtype)
        xt = Tensor(x)
        times = []
        with no_grad():
            for i in range(warmup + iterations):
                t0 = time.perf_counter()
                model(xt)
                dt = (time.perf_counter() - t0) * 1000.0
                if i >= warmup:
                    times.append(dt)
    except MemoryError as e:
        raise ResourceError(f"batch {batch} at {resolution}x{resolution} does not fit in memory") from e
    return BenchReport(model.spec.name, batch, resolution, iterations, warmup, times,
                       count_macs(model, resolution), BACKEND)
