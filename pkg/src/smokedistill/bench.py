"""Frame-rate measurement for a forward-capable runner.

A runner is any callable taking one input. Optional attributes change how it
is driven:

* ``make_input(input_dims)`` builds the fixed input (default: float32 zeros);
* ``sync()`` is called before and after each timed call, for async devices;
* ``upload``/``compute``/``download`` split one call into transfer and
  compute stages, in which case compute-only latencies are reported too.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

DEFAULT_WARMUP = 10
DEFAULT_ITERS = 100


class BenchError(RuntimeError):
    def __init__(self, message: str, partial_latencies_ms: list[float]):
        super().__init__(message)
        self.partial_latencies_ms = partial_latencies_ms


@dataclass
class FpsReport:
    fps: float
    iters: int
    warmup: int
    input_dims: tuple[int, ...]
    latencies_ms: list[float]
    precision: str = "fp32"
    device: str = "cpu"
    compute_fps: float | None = None
    compute_latencies_ms: list[float] = field(default_factory=list)

    @property
    def mean_latency_ms(self) -> float:
        return float(np.mean(self.latencies_ms))

    def to_dict(self) -> dict:
        lat = np.asarray(self.latencies_ms)
        out = {
            "fps": self.fps,
            "iters": self.iters,
            "warmup": self.warmup,
            "input_dims": list(self.input_dims),
            "precision": self.precision,
            "device": self.device,
            "latency_ms": {
                "mean": float(lat.mean()),
                "std": float(lat.std()),
                "p50": float(np.percentile(lat, 50)),
                "p95": float(np.percentile(lat, 95)),
                "min": float(lat.min()),
                "max": float(lat.max()),
            },
            "latencies_ms": list(self.latencies_ms),
        }
        if self.compute_fps is not None:
            out["compute_fps"] = self.compute_fps
            out["compute_latencies_ms"] = list(self.compute_latencies_ms)
        return out

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def save_histogram(self, path: str | Path) -> Path:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        path = Path(path)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.hist(self.latencies_ms, bins=min(50, max(5, self.iters // 4)), color="tab:blue")
        ax.axvline(self.mean_latency_ms, color="k", ls="--", lw=1)
        ax.set_xlabel("latency [ms]")
        ax.set_ylabel("iterations")
        ax.set_title(f"{self.device} {self.precision} {tuple(self.input_dims)}: {self.fps:.2f} fps")
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return path


def _noop() -> None:
    pass


def measure_fps(runner: Callable[[Any], Any], input_dims: Sequence[int],
                warmup: int = DEFAULT_WARMUP, iters: int = DEFAULT_ITERS,
                device: str = "cpu", precision: str = "fp32",
                clock: Callable[[], float] = time.perf_counter) -> FpsReport:
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    input_dims = tuple(int(d) for d in input_dims)
    make_input = getattr(runner, "make_input", None)
    x = make_input(input_dims) if make_input else np.zeros(input_dims, dtype=np.float32)
    sync = getattr(runner, "sync", _noop)
    staged = all(hasattr(runner, a) for a in ("upload", "compute", "download"))

    for _ in range(warmup):
        runner(x)
    sync()

    latencies: list[float] = []
    compute: list[float] = []
    for i in range(iters):
        try:
            if staged:
                sync()
                t0 = clock()
                y = runner.upload(x)
                sync()
                c0 = clock()
                y = runner.compute(y)
                sync()
                c1 = clock()
                runner.download(y)
                sync()
                t1 = clock()
                compute.append((c1 - c0) * 1e3)
            else:
                sync()
                t0 = clock()
                runner(x)
                sync()
                t1 = clock()
        except Exception as exc:
            raise BenchError(f"runner failed at iteration {i}: {exc!r}", latencies) from exc
        latencies.append((t1 - t0) * 1e3)

    total_s = sum(latencies) / 1e3
    report = FpsReport(fps=iters / total_s, iters=iters, warmup=warmup, input_dims=input_dims,
                       latencies_ms=latencies, precision=precision, device=device)
    if staged:
        report.compute_latencies_ms = compute
        report.compute_fps = iters / (sum(compute) / 1e3)
    return report


class TorchRunner:
    """Adapts a StudentModel (or any nn.Module) to the runner protocol."""

    def __init__(self, model, device: str = "cpu", half: bool = False):
        import torch

        self._torch = torch
        self.device = torch.device(device)
        self.dtype = torch.float16 if half else torch.float32
        self.model = model.to(self.device, self.dtype).eval()

    def make_input(self, input_dims: Sequence[int]):
        dims = tuple(input_dims)
        if len(dims) == 2:
            dims = (1, 3, *dims)
        elif len(dims) == 3:
            dims = (1, *dims)
        g = self._torch.Generator().manual_seed(0)
        return self._torch.rand(dims, generator=g).to(self.dtype)

    def sync(self) -> None:
        if self.device.type == "cuda":
            self._torch.cuda.synchronize(self.device)

    def upload(self, x):
        return x.to(self.device)

    def compute(self, x):
        with self._torch.inference_mode():
            return self.model(x)

    def download(self, y):
        return [t.cpu() for t in y]

    def __call__(self, x):
        return self.download(self.compute(self.upload(x)))
