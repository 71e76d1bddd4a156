from pathlib import Path
from typing import List

import pytest

from hypergs.bench import (
    BenchRecord,
    bench_conditioning,
    emit_csv,
    memory_bytes,
    memory_growth_exponent,
    methods_of,
    parse_csv,
    summarize,
    time_growth_exponent,
)
from hypergs.const import BENCH_GAUSSIAN_COUNT, BENCH_LATENT_DIMS
from hypergs.dto import BenchConfig, BenchMethod
from hypergs.errors import ArtifactError, DimensionMismatch


def record(method: str = 'fast', n: int = 8, time_ms: float = 1.25) -> BenchRecord:
    return BenchRecord(
        method=method, n=n, G=100, time_ms=time_ms, mem_bytes=1000 * n, runs=5, time_std_ms=0.1, warmup=2
    )


def test_memory_ratio_large_latent() -> None:
    naive = memory_bytes('naive', BENCH_GAUSSIAN_COUNT, 3, 128)
    fast = memory_bytes('fast', BENCH_GAUSSIAN_COUNT, 3, 128)
    assert naive / fast > 10


def test_memory_ratio_small_latent() -> None:
    assert memory_bytes('naive', BENCH_GAUSSIAN_COUNT, 3, 8) / memory_bytes('fast', BENCH_GAUSSIAN_COUNT, 3, 8) >= 1.5


def test_memory_parallel_matches_serial() -> None:
    assert memory_bytes('fast_parallel', 10, 3, 4) == memory_bytes('fast', 10, 3, 4)


def test_memory_growth() -> None:
    records = [
        BenchRecord(
            method=m, n=n, G=10, time_ms=1.0, mem_bytes=memory_bytes(m, 10, 3, n), runs=1, time_std_ms=0.0, warmup=0
        )
        for m in ('naive', 'fast')
        for n in (64, 128)
    ]
    assert memory_growth_exponent(records, 'naive') > 1.8
    assert memory_growth_exponent(records, 'fast') < 1.1


def test_bench_small_sweep() -> None:
    records = bench_conditioning(40, 3, [1, 4], runs=3, warmup=1, chunk_size=16)
    assert [(r.method, r.n) for r in records] == [('naive', 1), ('fast', 1), ('naive', 4), ('fast', 4)]
    for r in records:
        assert r.time_ms > 0
        assert r.runs == 3
        assert r.G == 40
        assert r.warmup == 1


def test_bench_time_budget_keeps_one_run() -> None:
    records = bench_conditioning(8, 3, [2], runs=100, warmup=5, time_budget_s=1e-9)
    assert all(r.runs == 1 for r in records)


def test_bench_parallel_methods() -> None:
    cfg = BenchConfig(gaussian_count=32, latent_dims=[2], runs=2, warmup=0, parallel=True, workers=2, chunk_size=8)
    assert methods_of(cfg) == [
        BenchMethod.NAIVE,
        BenchMethod.FAST,
        BenchMethod.NAIVE_PARALLEL,
        BenchMethod.FAST_PARALLEL,
    ]
    records = bench_conditioning(32, 3, [2], runs=2, warmup=0, methods=methods_of(cfg), chunk_size=8, workers=2)
    assert [r.method for r in records] == ['naive', 'fast', 'naive_parallel', 'fast_parallel']


def test_bench_invalid() -> None:
    with pytest.raises(DimensionMismatch):
        bench_conditioning(0, 3, [1], runs=1)
    with pytest.raises(DimensionMismatch):
        bench_conditioning(4, 3, [-1], runs=1)


def test_bench_without_latent_dims() -> None:
    records = bench_conditioning(12, 3, [0], runs=2, warmup=0, chunk_size=5)
    assert [(r.method, r.n) for r in records] == [('naive', 0), ('fast', 0)]
    assert all(r.runs == 2 for r in records)
    assert records[0].mem_bytes == memory_bytes('naive', 12, 3, 0) == 8 * 12 * (5 * 9 + 3)
    assert records[1].mem_bytes == memory_bytes('fast', 12, 3, 0) == 8 * 12 * (2 * 9 + 9)
    assert summarize(records)[0]['mem_ratio'] == pytest.approx(48 / 27)


def test_emit_single_record(tmp_path: Path) -> None:
    path = tmp_path / 'bench.csv'
    emit_csv([record()], path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0] == 'method,n,G,time_ms,mem_bytes,runs,time_std_ms,warmup'


def test_emit_parse_round_trip(tmp_path: Path) -> None:
    records = [record('naive', 4, 0.1 + 0.2), record('fast', 4, 1 / 3)]
    path = tmp_path / 'bench.csv'
    emit_csv(records, path)
    assert parse_csv(path) == records


def test_full_sweep_row_count(tmp_path: Path) -> None:
    records = bench_conditioning(2, 3, BENCH_LATENT_DIMS, runs=1, warmup=0)
    emit_csv(records, tmp_path / 'bench.csv')
    assert len(parse_csv(tmp_path / 'bench.csv')) == 16


def test_parse_malformed(tmp_path: Path) -> None:
    path = tmp_path / 'bad.csv'
    path.write_text('method,n\nfast,abc\n')
    with pytest.raises(ArtifactError):
        parse_csv(path)
    with pytest.raises(ArtifactError):
        parse_csv(tmp_path / 'missing.csv')


def test_summarize() -> None:
    summary = summarize([record('naive', 8, 3.0), record('fast', 8, 1.5), record('fast', 16, 1.0)])
    assert summary[8]['time_ratio'] == pytest.approx(2.0)
    assert summary[16] == {'time_ratio': None, 'mem_ratio': None}


@pytest.fixture(scope='module')
def full_scale_records() -> List[BenchRecord]:
    return bench_conditioning(BENCH_GAUSSIAN_COUNT, 3, BENCH_LATENT_DIMS, runs=10, warmup=1, time_budget_s=120.0)


@pytest.mark.slow
def test_fast_beats_naive_at_full_scale(full_scale_records: List[BenchRecord]) -> None:
    summary = summarize(full_scale_records)
    assert summary[8]['time_ratio'] >= 1.5
    assert summary[128]['time_ratio'] >= 10.0
    assert summary[8]['mem_ratio'] >= 1.5
    assert summary[128]['mem_ratio'] >= 10.0


@pytest.mark.slow
def test_time_growth_with_latent_dim(full_scale_records: List[BenchRecord]) -> None:
    assert time_growth_exponent(full_scale_records, 'fast') <= 1.3
    assert time_growth_exponent(full_scale_records, 'naive', min_n=32) >= 2.0


def test_time_growth_exponent() -> None:
    records = [record('naive', n, 0.5 * n**2) for n in (16, 32, 64)] + [record('fast', n, 2.0) for n in (0, 8, 16)]
    assert time_growth_exponent(records, 'naive') == pytest.approx(2.0)
    assert time_growth_exponent(records, 'naive', min_n=32) == pytest.approx(2.0)
    assert time_growth_exponent(records, 'fast') == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DimensionMismatch):
        time_growth_exponent(records, 'naive', min_n=64)
