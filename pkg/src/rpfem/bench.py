"""Benchmark the numba kernels against their pure-numpy fallbacks.

Calls both implementations directly (no env mutation) on the two hot paths:
pair-attention forward+backward and per-image geometry statistics.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .backend import numba_available
from .rng import SplitRng

ATTN_SIZES = ((64, 64), (256, 400), (1024, 1600), (4096, 6400))  # (pairs, class pairs)
GEOM_SIZES = (8, 24, 64)  # objects per image


@dataclass
class BenchRow:
    kernel: str
    size: str
    numpy_ms: float
    numba_ms: float | None

    @property
    def speedup(self) -> float | None:
        if self.numba_ms is None or self.numba_ms == 0:
            return None
        return self.numpy_ms / self.numba_ms


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best * 1000.0


def _attn_case(n_pairs: int, n_cpairs: int, repeats: int) -> BenchRow:
    rng = SplitRng(n_pairs * 31 + n_cpairs)
    da, dv = 32, 32
    q = rng.child("q").normal((n_pairs, da))
    kk = rng.child("k").normal((n_cpairs, da))
    v = rng.child("v").normal((n_cpairs, dv))
    du = rng.child("du").normal((n_pairs, dv))
    scl = 1.0 / np.sqrt(da)

    def run_numpy():
        kernels._attn_forward_numpy(q, kk, v, scl)
        kernels._attn_backward_numpy(q, kk, v, du, scl)

    numpy_ms = _time(run_numpy, repeats)
    numba_ms = None
    if numba_available():
        def run_numba():
            kernels._attn_forward_numba(q, kk, v, scl)
            kernels._attn_backward_numba(q, kk, v, du, scl)

        run_numba()  # JIT warmup outside the timed region
        numba_ms = _time(run_numba, repeats)
    return BenchRow("pair_attention", f"{n_pairs}x{n_cpairs}", numpy_ms, numba_ms)


def _geom_case(n_objects: int, repeats: int, n_images: int = 200) -> BenchRow:
    rng = SplitRng(n_objects)
    cls = rng.child("cls").integers(0, 10, n_objects).astype(np.int64)
    cx = rng.child("cx").uniform(0, 640, n_objects)
    cy = rng.child("cy").uniform(0, 480, n_objects)
    bw = rng.child("bw").uniform(10, 80, n_objects)
    bh = rng.child("bh").uniform(10, 80, n_objects)
    bx = cx - bw / 2
    by = cy - bh / 2

    def run(fn):
        orient = np.zeros((10, 10, 5))
        cnt = np.zeros((10, 10))
        for _ in range(n_images):
            fn(cls, cx, cy, bx, by, bw, bh, 1.0 / 800.0, orient, cnt)

    numpy_ms = _time(lambda: run(kernels._pair_geometry_numpy), repeats)
    numba_ms = None
    if numba_available():
        run(kernels._pair_geometry_numba)  # warmup
        numba_ms = _time(lambda: run(kernels._pair_geometry_numba), repeats)
    return BenchRow("pair_geometry", f"{n_objects} objects x {n_images} images", numpy_ms, numba_ms)


def run_benchmark(repeats: int = 3, full: bool = False) -> list[BenchRow]:
    attn_sizes = ATTN_SIZES if full else ATTN_SIZES[:3]
    rows = [_attn_case(n, c, repeats) for n, c in attn_sizes]
    rows += [_geom_case(n, repeats) for n in GEOM_SIZES]
    return rows


def format_rows(rows: list[BenchRow]) -> str:
    lines = [f"{'kernel':<16} {'size':<28} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}"]
    for r in rows:
        numba = f"{r.numba_ms:.3f}" if r.numba_ms is not None else "n/a"
        speed = f"{r.speedup:.2f}x" if r.speedup is not None else "n/a"
        lines.append(f"{r.kernel:<16} {r.size:<28} {r.numpy_ms:>10.3f} {numba:>10} {speed:>8}")
    return "\n".join(lines)
