"""Selective-scan timing harness.

Each configuration runs the scan forward rule on fixed random inputs,
discards warm-up calls, and reports the median of the timed repetitions
divided by the number of state elements ``L * C * N``. Correctness is the
largest deviation from a float64 sequential run, scaled by the oracle's
peak magnitude.
"""
from __future__ import annotations

import csv
import io
import itertools
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass
from types import SimpleNamespace

import numpy as np

from .autodiff import RULES
from .errors import ContractError
from .ssm import STRATEGIES

COLUMNS = ("L", "N", "C", "strategy", "chunk", "wall_ns_per_element", "max_err_vs_seq")


@dataclass
class BenchRow:
    L: int
    N: int
    C: int
    strategy: str
    chunk: int  # 0 when the strategy has no chunk parameter
    wall_ns_per_element: float
    max_err_vs_seq: float


def bench_inputs(L: int, N: int, C: int, seed: int = 0, dtype=np.float32):
    rng = np.random.default_rng([seed, L, N, C])
    u = rng.standard_normal((L, C))
    delta = np.log1p(np.exp(rng.normal(-2.0, 0.5, (L, C))))
    A = -np.exp(rng.normal(0.0, 0.5, (C, N)))
    Bm = rng.standard_normal((L, N)) * 0.5
    Cm = rng.standard_normal((L, N)) * 0.5
    D = np.ones(C)
    return tuple(x.astype(dtype) for x in (u, delta, A, Bm, Cm, D))


def run_scan(inputs, strategy: str, chunk: int) -> np.ndarray:
    return RULES["selective_scan"].forward(SimpleNamespace(), *inputs, strategy, chunk)


def _timed(inputs, strategy, chunk) -> tuple[int, np.ndarray]:
    t0 = time.perf_counter_ns()
    y = run_scan(inputs, strategy, chunk or 1)
    return time.perf_counter_ns() - t0, y


def _time_interleaved(configs, repeats, warmup, seed) -> list[BenchRow]:
    # Repetitions go round-robin over the configs so slow drift in machine
    # speed lands on every config alike instead of skewing one L against another.
    if repeats < 5:
        raise ContractError("at least 5 timed repetitions are required")
    prepared = []
    for L, N, C, strategy, chunk in configs:
        x32 = bench_inputs(L, N, C, seed)
        ref = run_scan(tuple(x.astype(np.float64) for x in x32), "sequential", 1)
        for _ in range(warmup):
            run_scan(x32, strategy, chunk or 1)
        prepared.append((x32, ref))
    times = [[] for _ in configs]
    outputs = [None] * len(configs)
    for _ in range(repeats):
        for i, (cfg, (x32, _)) in enumerate(zip(configs, prepared)):
            dt, outputs[i] = _timed(x32, cfg[3], cfg[4])
            times[i].append(dt)
    rows = []
    for (L, N, C, strategy, chunk), (_, ref), ts, y in zip(configs, prepared, times, outputs):
        err = float(np.max(np.abs(y.astype(np.float64) - ref)) / max(1.0, np.max(np.abs(ref))))
        rows.append(BenchRow(L, N, C, strategy, chunk, float(np.median(ts)) / (L * C * N), err))
    return rows


def time_config(L, N, C, strategy, chunk, repeats=5, warmup=1, seed=0) -> BenchRow:
    return _time_interleaved([(L, N, C, strategy, chunk)], repeats, warmup, seed)[0]


def grid(Ls, Ns, Cs, strategies, chunks):
    for strategy in strategies:
        if strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    for L, N, C, strategy in itertools.product(Ls, Ns, Cs, strategies):
        for chunk in (chunks if strategy == "chunked" else [0]):
            yield L, N, C, strategy, chunk


def _run_one(job):
    args, repeats, warmup, seed = job
    return time_config(*args, repeats=repeats, warmup=warmup, seed=seed)


def run_bench(Ls, Ns, Cs, strategies, chunks, *, repeats=5, warmup=1, workers=1,
              seed=0) -> list[BenchRow]:
    """Rows come back in grid order regardless of ``workers``.

    With one worker the timed repetitions of all configurations are
    interleaved; with several, each configuration is timed on its own.
    """
    configs = list(grid(Ls, Ns, Cs, strategies, chunks))
    if workers <= 1:
        return _time_interleaved(configs, repeats, warmup, seed)
    jobs = [(cfg, repeats, warmup, seed) for cfg in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow(astuple(r))
    return buf.getvalue()


def format_table(rows: list[BenchRow]) -> str:
    head = f"{'L':>7} {'N':>4} {'C':>4} {'strategy':>10} {'chunk':>5} {'ns/elem':>10} {'max_err':>10}"
    lines = [head]
    for r in rows:
        lines.append(f"{r.L:>7} {r.N:>4} {r.C:>4} {r.strategy:>10} {r.chunk:>5} "
                     f"{r.wall_ns_per_element:>10.3f} {r.max_err_vs_seq:>10.2e}")
    return "\n".join(lines)


def scaling_ratios(rows: list[BenchRow], strategy="sequential") -> dict[tuple, float]:
    """``t(2L) / t(L)`` in total time for every doubling present in ``rows``."""
    total = {(r.N, r.C, r.chunk, r.L): r.wall_ns_per_element * r.L * r.N * r.C
             for r in rows if r.strategy == strategy}
    out = {}
    for (n, c, k, L), t in total.items():
        if (n, c, k, 2 * L) in total:
            out[(n, c, k, L)] = total[(n, c, k, 2 * L)] / t
    return out

