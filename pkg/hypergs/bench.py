"""
Conditioning benchmark: covariance-view (naive) vs Cholesky-factor (fast) conditioning,
forward + backward over G blocks, swept over latent dimensions.

Working memory is accounted analytically from the float64 buffers each path allocates per block,
so the numbers do not depend on the allocator.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .conditioning import (
    condition_fast_backward,
    condition_fast_batched,
    condition_naive_backward,
    condition_naive_batched,
)
from .dto import BenchConfig, BenchMethod
from .errors import ArtifactError, DimensionMismatch
from .linalg import Mat, tri_size
from .logger import log_extra
from .rng import stream
from .serialization import PathLike, read_csv, write_csv

logger = logging.getLogger(__name__)

CSV_FIELDS = ('method', 'n', 'G', 'time_ms', 'mem_bytes', 'runs', 'time_std_ms', 'warmup')
FLOAT_BYTES = 8

PARALLEL_OF = {BenchMethod.NAIVE: BenchMethod.NAIVE_PARALLEL, BenchMethod.FAST: BenchMethod.FAST_PARALLEL}
SERIAL_OF = {parallel: serial for serial, parallel in PARALLEL_OF.items()}


@dataclass
class BenchRecord:
    method: str
    n: int
    G: int
    time_ms: float
    mem_bytes: int
    runs: int
    time_std_ms: float
    warmup: int


def memory_bytes(method: str, g: int, m: int, n: int) -> int:
    """
    Float64 working set of one forward + backward pass over g blocks.

    naive  L and Σ of the joint, the n x n Cholesky of Σ_bb, the m x n gain, innovation,
           the m x m conditional covariance and its inverse, conditional mean, joint cotangent
    fast   L11, L21, innovation, solve output, conditional mean, mean cotangent, L11 and L21 cotangents
    """
    serial = SERIAL_OF.get(BenchMethod(method), BenchMethod(method))
    d = m + n
    if serial == BenchMethod.NAIVE:
        terms = 2 * d * d + n * n + 2 * m * n + n + 2 * m * m + m + d * d
    else:
        terms = m * m + n * m + n + 3 * m + m * m + n * m
    return FLOAT_BYTES * g * terms


class _Problem:
    """Synthetic data of one chunk; every chunk of a pass reuses it, the last one sliced."""

    def __init__(self, m: int, n: int, size: int, seed: int) -> None:
        rng = stream(seed, f'bench-{m}-{n}')
        self.m, self.n = m, n
        self.mu_a = rng.normal(size=(size, m))
        self.mu_b = rng.normal(size=(size, n))
        self.raw_l11 = rng.normal(0.0, 0.1, size=(size, tri_size(m)))
        self.l21 = rng.normal(0.0, 0.1, size=(size, n, m))
        self.z = rng.normal(size=(size, n))
        d = m + n
        l_cov = np.tril(rng.normal(0.0, 0.1, size=(size, d, d)), -1)
        l_cov[:, np.arange(d), np.arange(d)] = np.exp(rng.normal(0.0, 0.1, size=(size, d)))
        self.mu = np.concatenate([self.mu_a, self.mu_b], axis=-1)
        self.l_cov = l_cov

    def fast(self, count: int) -> Mat:
        mu, logdet, state = condition_fast_batched(
            self.mu_a[:count], self.mu_b[:count], self.raw_l11[:count], self.l21[:count], self.z[:count]
        )
        grads = condition_fast_backward(state, self.l21[:count], np.ones_like(mu), np.ones_like(logdet))
        return grads['raw_l11']

    def naive(self, count: int) -> Mat:
        mu, logdet, state = condition_naive_batched(self.mu[:count], self.l_cov[:count], self.m, self.z[:count])
        grads = condition_naive_backward(state, self.m, np.ones_like(mu), np.ones_like(logdet))
        return grads['l_cov']


def _chunks(g: int, chunk_size: int) -> List[int]:
    full, rest = divmod(g, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def _pass_fn(method: BenchMethod, problem: _Problem, g: int, chunk_size: int, workers: int) -> Callable[[], None]:
    serial = SERIAL_OF.get(method, method)
    kernel = problem.naive if serial == BenchMethod.NAIVE else problem.fast
    chunks = _chunks(g, chunk_size)

    if method in SERIAL_OF:

        def run_parallel() -> None:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(kernel, chunks))

        return run_parallel

    def run() -> None:
        for count in chunks:
            kernel(count)

    return run


def time_cell(fn: Callable[[], None], runs: int, warmup: int, time_budget_s: float) -> Tuple[float, float, int]:
    """Mean and std in ms over up to ``runs`` measured calls; stops early once the budget is spent."""
    started = time.perf_counter()
    for _ in range(warmup):
        fn()
        if time.perf_counter() - started > time_budget_s:
            break
    samples: List[float] = []
    while len(samples) < runs:
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
        if time.perf_counter() - started > time_budget_s:
            break
    return float(np.mean(samples)), float(np.std(samples)), len(samples)


def methods_of(cfg: BenchConfig) -> List[BenchMethod]:
    methods = list(dict.fromkeys(cfg.methods))
    if cfg.parallel:
        methods += [PARALLEL_OF[m] for m in cfg.methods if m in PARALLEL_OF and PARALLEL_OF[m] not in methods]
    return methods


def bench_conditioning(
    g: int,
    m: int,
    n_list: Sequence[int],
    runs: int,
    warmup: int = 10,
    methods: Iterable[BenchMethod] = (BenchMethod.NAIVE, BenchMethod.FAST),
    chunk_size: int = 1024,
    workers: int = 4,
    time_budget_s: float = 60.0,
    seed: int = 0,
) -> List[BenchRecord]:
    if g < 1 or m < 1 or runs < 1:
        raise DimensionMismatch(f'benchmark needs G, m, runs >= 1, got G={g} m={m} runs={runs}')
    if any(n < 0 for n in n_list):
        raise DimensionMismatch(f'latent dimensions must be >= 0, got {list(n_list)}')
    methods = list(methods)
    records = []
    for n in n_list:
        problem = _Problem(m, n, min(chunk_size, g), seed)
        for method in methods:
            fn = _pass_fn(method, problem, g, chunk_size, workers)
            mean_ms, std_ms, done = time_cell(fn, runs, warmup, time_budget_s)
            record = BenchRecord(
                method=method.value,
                n=n,
                G=g,
                time_ms=mean_ms,
                mem_bytes=memory_bytes(method, g, m, n),
                runs=done,
                time_std_ms=std_ms,
                warmup=warmup,
            )
            if done < runs:
                logger.warning('time budget hit', **log_extra(method=method.value, n=n, runs=done, requested=runs))
            logger.info('bench cell', **log_extra(**asdict(record)))
            records.append(record)
    return records


def run_bench(cfg: BenchConfig, seed: int = 0) -> List[BenchRecord]:
    return bench_conditioning(
        cfg.gaussian_count,
        cfg.attr_dim,
        cfg.latent_dims,
        cfg.runs,
        warmup=cfg.warmup,
        methods=methods_of(cfg),
        chunk_size=cfg.chunk_size,
        workers=cfg.workers,
        time_budget_s=cfg.time_budget_s,
        seed=seed,
    )


def emit_csv(records: Sequence[BenchRecord], path: PathLike) -> None:
    write_csv(path, CSV_FIELDS, [asdict(r) for r in records])


def parse_csv(path: PathLike) -> List[BenchRecord]:
    rows = read_csv(path)
    try:
        return [
            BenchRecord(
                method=row['method'],
                n=int(row['n']),
                G=int(row['G']),
                time_ms=float(row['time_ms']),
                mem_bytes=int(row['mem_bytes']),
                runs=int(row['runs']),
                time_std_ms=float(row['time_std_ms']),
                warmup=int(row['warmup']),
            )
            for row in rows
        ]
    except (KeyError, ValueError) as exc:
        raise ArtifactError(f'malformed benchmark CSV {path}: {exc}') from exc


def summarize(records: Sequence[BenchRecord]) -> Dict[int, Dict[str, Optional[float]]]:
    """Per n: naive/fast time and memory ratios (None when either method is missing)."""
    by_key = {(r.method, r.n): r for r in records}
    out: Dict[int, Dict[str, Optional[float]]] = {}
    for n in sorted({r.n for r in records}):
        naive, fast = by_key.get((BenchMethod.NAIVE.value, n)), by_key.get((BenchMethod.FAST.value, n))
        if naive is None or fast is None:
            out[n] = {'time_ratio': None, 'mem_ratio': None}
            continue
        out[n] = {
            'time_ratio': naive.time_ms / fast.time_ms if fast.time_ms > 0 else None,
            'mem_ratio': naive.mem_bytes / fast.mem_bytes,
        }
    return out


def memory_growth_exponent(records: Sequence[BenchRecord], method: str) -> float:
    """Slope of log(mem) over log(n) between the two largest n of ``method``."""
    rows = sorted((r for r in records if r.method == method and r.n > 0), key=lambda r: r.n)
    if len(rows) < 2:
        raise DimensionMismatch(f'need two latent dimensions of {method} to fit a growth exponent')
    a, b = rows[-2], rows[-1]
    return math.log(b.mem_bytes / a.mem_bytes) / math.log(b.n / a.n)


def time_growth_exponent(records: Sequence[BenchRecord], method: str, min_n: int = 1) -> float:
    """Least-squares slope of log(time) over log(n) for the records of ``method`` with n >= min_n."""
    rows = [r for r in records if r.method == method and r.n >= max(min_n, 1)]
    if len({r.n for r in rows}) < 2:
        raise DimensionMismatch(f'need two latent dimensions >= {min_n} of {method} to fit a growth exponent')
    slope, _ = np.polyfit(np.log([r.n for r in rows]), np.log([r.time_ms for r in rows]), 1)
    return float(slope)
