"""Latency-scaling harness over point-cloud size.

Each size gets a synthetic in-grid frame pair generated outside the timed
region; timing covers the full inference path (point encoding, pillarization,
network forward, unpillar head) at batch size 1 on one thread of control.
Results embed an environment fingerprint so numbers from different machines
are never compared silently.
"""

from __future__ import annotations

import platform
import sys
import time
from dataclasses import dataclass

import numpy as np

from .net.model import FlowNetModel, forward


@dataclass(frozen=True)
class BenchResult:
    sizes: tuple            # points per cloud, strictly increasing
    mean_ms: tuple
    std_ms: tuple           # population std over the timed iterations
    iters: int
    warmup: int
    fingerprint: str


def _cpu_description() -> str:
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def environment_fingerprint() -> str:
    return (
        f"cpu={_cpu_description()}; python={platform.python_version()}; "
        f"numpy={np.__version__}; platform={sys.platform}"
    )


def _synthetic_pair(model: FlowNetModel, n_points: int, seed: int):
    g = model.cfg.grid
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 7, n_points]))

    def cloud():
        pts = np.empty((n_points, 5))
        pts[:, 0:2] = rng.uniform(-0.49 * g.extent, 0.49 * g.extent, size=(n_points, 2))
        pts[:, 2] = rng.uniform(g.z_min, g.z_max, size=n_points)
        pts[:, 3:5] = rng.uniform(0.0, 1.0, size=(n_points, 2))
        return pts

    return cloud(), cloud()


def run_latency(
    model: FlowNetModel,
    sizes,
    warmup: int = 10,
    iters: int = 90,
    seed: int = 0,
) -> BenchResult:
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise ValueError("sizes must be >= 1 point")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    if iters < 1 or warmup < 0:
        raise ValueError("iters must be >= 1 and warmup >= 0")

    means, stds = [], []
    for n in sizes:
        prev, curr = _synthetic_pair(model, n, seed)
        for _ in range(warmup):
            forward(model, prev, curr)
        samples_ms = np.empty(iters)
        for i in range(iters):
            t0 = time.perf_counter_ns()
            forward(model, prev, curr)
            samples_ms[i] = (time.perf_counter_ns() - t0) * 1e-6
        means.append(float(samples_ms.mean()))
        stds.append(float(samples_ms.std()))
    return BenchResult(
        sizes=tuple(sizes),
        mean_ms=tuple(means),
        std_ms=tuple(stds),
        iters=iters,
        warmup=warmup,
        fingerprint=environment_fingerprint(),
    )


def scaling_summary(result: BenchResult) -> dict:
    """Largest/smallest latency ratio and the per-point marginal cost."""
    if len(result.sizes) < 2:
        raise ValueError("scaling summary needs at least two sizes")
    slope_ms_per_point = float(np.polyfit(result.sizes, result.mean_ms, 1)[0])
    return {
        "ratio": result.mean_ms[-1] / result.mean_ms[0],
        "slope_ns_per_point": slope_ms_per_point * 1e6,
    }


def to_csv(result: BenchResult) -> str:
    lines = [f"# fingerprint: {result.fingerprint}", "size,mean_ms,std_ms,iters,warmup"]
    for s, m, d in zip(result.sizes, result.mean_ms, result.std_ms):
        lines.append(f"{s},{m:.6f},{d:.6f},{result.iters},{result.warmup}")
    return "\n".join(lines) + "\n"


def to_svg(result: BenchResult, width: int = 640, height: int = 400) -> str:
    """Self-contained line plot of latency vs point count."""
    pad = 56
    xs = np.asarray(result.sizes, dtype=float)
    ys = np.asarray(result.mean_ms, dtype=float)
    x_max = xs.max()
    y_max = max(ys.max(), 1e-9)

    def px(x):
        return pad + (width - 2 * pad) * x / x_max

    def py(y):
        return height - pad - (height - 2 * pad) * y / y_max

    pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
    marks = "".join(
        f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="#1f77b4"/>'
        for x, y in zip(xs, ys)
    )
    labels = "".join(
        f'<text x="{px(x):.1f}" y="{height - pad + 16}" font-size="11" text-anchor="middle">{int(x):,}</text>'
        for x in xs
    )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="{width}" height="{height}" fill="white"/>'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>'
        f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>'
        f"{marks}{labels}"
        f'<text x="{width / 2:.0f}" y="{height - 12}" font-size="12" text-anchor="middle">points per cloud</text>'
        f'<text x="16" y="{height / 2:.0f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 16 {height / 2:.0f})">latency (ms)</text>'
        f'<text x="{width / 2:.0f}" y="20" font-size="11" text-anchor="middle">{result.fingerprint}</text>'
        "</svg>\n"
    )
