"""Cost models and measured scaling of the fixed-mosaic index against a
fractional-sampling baseline.

The baseline keeps floor(f * P) patch codes per slide, so one candidate
comparison costs floor(f * P_q) * floor(f * P_i) Hamming distances. The
fixed-mosaic index always compares m x m codes plus one dim-sized vector
distance, whatever the slide size.

Uniform sampling stands in for the baseline's clustering step; only the
distance-computation cost is measured, and it does not depend on how the
codes were chosen.
"""

import csv
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from slide_search_tool.constants import (
    BASELINE_FRACTIONS,
    DEFAULT_DIM,
    DEFAULT_MOSAICS,
    PLOT_PATCH_COUNTS,
    STORAGE_MOSAIC_COUNTS,
    BenchMethods,
)
from slide_search_tool.core import (
    BinaryMosaicCode,
    SemanticVector,
    SlideRecord,
    bytes_per_code,
    pack_bits,
    words_per_code,
)
from slide_search_tool.errors import DataError, UsageError
from slide_search_tool.index import (
    FusionConfig,
    OpCounter,
    QuerySlide,
    RetrievalIndex,
    min_hamming_matrix,
    query_image,
)
from slide_search_tool.index_format import mosaic_block_bytes, semantic_block_bytes
from slide_search_tool.util import write_csv

DEFAULT_BUDGET = 10**9
DEFAULT_MEMORY_BUDGET = 2 * 1024**3
# bytes of XOR intermediate allowed per scan chunk
CHUNK_BYTES = 64 * 1024**2
CAPACITY_PATCH_COUNTS = (100, 200, 500, 1000, 2000, 5000, 10000, 20000)
SCALING_HEADER = ["method", "S", "p_bar", "f_or_m", "ops_per_query", "median_ms"]
PLOT_HEADER = ["panel", "series", "x", "y"]


def sampled_count(p: int, f: float) -> int:
    # guards against 0.15 * 5000 evaluating to 749.999...
    return math.floor(f * p + 1e-9)


@dataclass(frozen=True)
class CostModelParams:
    s: int
    p_bar: int
    f: float = BASELINE_FRACTIONS[0]
    m: int = DEFAULT_MOSAICS
    dim: int = DEFAULT_DIM
    budget: int = DEFAULT_BUDGET

    def __post_init__(self) -> None:
        if not 0 < self.f < 1:
            raise UsageError(f"sampling fraction must be in (0, 1), got {self.f}")
        for name in ("s", "p_bar", "m", "dim", "budget"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class CandidateCost:
    mosaic: int
    semantic: int

    @property
    def total(self) -> int:
        return self.mosaic + self.semantic


def baseline_ops_per_candidate(p_q: int, p_i: int, f: float) -> int:
    return sampled_count(p_q, f) * sampled_count(p_i, f)


def fixed_mosaic_ops_per_candidate(m: int, dim: int) -> CandidateCost:
    """m^2 code comparisons and dim multiply-adds, independent of slide size."""
    return CandidateCost(mosaic=m * m, semantic=dim)


def capacity_under_budget(params: CostModelParams) -> Dict[str, int]:
    """Largest database a fixed per-query op budget can scan, per method."""
    baseline = baseline_ops_per_candidate(params.p_bar, params.p_bar, params.f)
    if baseline == 0:
        raise UsageError(f"f * p_bar = {params.f * params.p_bar} keeps no codes per slide")
    return {
        BenchMethods.FIXED_MOSAIC: params.budget
        // fixed_mosaic_ops_per_candidate(params.m, params.dim).total,
        BenchMethods.FRACTIONAL_SAMPLING: params.budget // baseline,
    }


@dataclass(frozen=True)
class StorageFootprint:
    m: int
    mosaic_bytes: int
    semantic_bytes: int

    @property
    def total(self) -> int:
        return self.mosaic_bytes + self.semantic_bytes


def storage_footprint(m: int, dim: int = DEFAULT_DIM, float_width: int = 8) -> StorageFootprint:
    return StorageFootprint(m, mosaic_block_bytes(m, dim), semantic_block_bytes(dim, float_width))


def storage_table(
    dim: int = DEFAULT_DIM,
    float_width: int = 8,
    mosaic_counts: Sequence[int] = STORAGE_MOSAIC_COUNTS,
) -> List[StorageFootprint]:
    return [storage_footprint(m, dim, float_width) for m in mosaic_counts]


def baseline_store_bytes(p: int, f: float, dim: int = DEFAULT_DIM) -> int:
    """Binary code storage of one slide under fractional sampling."""
    return sampled_count(p, f) * bytes_per_code(dim)


def random_codes(rng: np.random.Generator, shape: Tuple[int, ...], dim: int) -> np.ndarray:
    return pack_bits(rng.integers(0, 2, size=shape + (dim,), dtype=np.uint8).astype(bool))


def random_unit_vectors(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    vectors = rng.standard_normal((count, dim))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


def synthetic_index(s: int, m: int, dim: int, seed: int) -> RetrievalIndex:
    """S records with uniformly random codes and unit vectors."""
    rng = np.random.default_rng(seed)
    codes = random_codes(rng, (s, m), dim)
    vectors = random_unit_vectors(rng, s, dim)
    index = RetrievalIndex(m, dim)
    for i in range(s):
        index.append(
            SlideRecord(
                slide_id=f"bench-{i:08d}",
                label=None,
                mosaic_code=BinaryMosaicCode(codes[i], dim),
                semantic=SemanticVector(vectors[i]),
            )
        )
    return index


def synthetic_query(m: int, dim: int, seed: int) -> QuerySlide:
    rng = np.random.default_rng(seed)
    return QuerySlide(
        mosaic_code=BinaryMosaicCode(random_codes(rng, (m,), dim), dim),
        semantic=SemanticVector(random_unit_vectors(rng, 1, dim)[0]),
    )


def sample_mosaics(codes: np.ndarray, f: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly samples floor(f * P) of a slide's P patch codes, without replacement."""
    count = sampled_count(codes.shape[0], f)
    if count < 1:
        raise UsageError(f"f={f} keeps no codes from a slide of {codes.shape[0]} patches")
    return codes[np.sort(rng.choice(codes.shape[0], size=count, replace=False))]


class FractionalSamplingBaseline:
    """In-memory baseline store: per slide, a sampled subset of its patch codes."""

    def __init__(self, dim: int, f: float):
        self.dim = dim
        self.f = f
        self.codes = np.zeros((0, 0, words_per_code(dim)), dtype=np.uint64)

    @classmethod
    def random(
        cls, s: int, p_bar: int, f: float, dim: int, seed: int
    ) -> "FractionalSamplingBaseline":
        """S slides of p_bar random patch codes each, sampled down to f * p_bar."""
        baseline = cls(dim, f)
        rng = np.random.default_rng(seed)
        baseline.codes = np.stack(
            [sample_mosaics(random_codes(rng, (p_bar,), dim), f, rng) for _ in range(s)]
        )
        return baseline

    def __len__(self) -> int:
        return int(self.codes.shape[0])

    def distances(
        self, query_codes: np.ndarray, counter: Optional[OpCounter] = None
    ) -> np.ndarray:
        """Median over query codes of the minimum Hamming distance to each slide."""
        if len(self) == 0:
            raise DataError("baseline store is empty")
        per_candidate = query_codes.shape[0] * self.codes.shape[1]
        chunk = max(1, CHUNK_BYTES // (per_candidate * self.codes.shape[2] * 8))
        parts = [
            np.median(min_hamming_matrix(query_codes, self.codes[i : i + chunk]), axis=1)
            for i in range(0, len(self), chunk)
        ]
        if counter is not None:
            counter.add(len(self), len(self) * per_candidate, 0)
        return np.concatenate(parts)


@dataclass(frozen=True)
class ScalingRow:
    method: str
    s: int
    p_bar: int
    f_or_m: float
    ops_per_query: int
    median_ms: float

    def as_row(self) -> List[object]:
        f_or_m = int(self.f_or_m) if self.method == BenchMethods.FIXED_MOSAIC else self.f_or_m
        return [self.method, self.s, self.p_bar, f_or_m, self.ops_per_query, self.median_ms]


def _fit_size(s: int, bytes_per_slide: int, memory_budget: int, method: str) -> int:
    fitted = s
    while fitted > 1 and fitted * bytes_per_slide > memory_budget:
        fitted //= 2
    if fitted != s:
        logging.warning(
            "%s: reduced S from %d to %d to stay within %d bytes", method, s, fitted, memory_budget
        )
    return fitted


def _time_ms(call: Callable[[], object], repetitions: int) -> float:
    timings = []
    for _ in range(repetitions):
        started = time.perf_counter()
        call()
        timings.append((time.perf_counter() - started) * 1000.0)
    return float(np.median(timings))


def measure_fixed_mosaic(
    s: int,
    p_bar: int,
    repetitions: int,
    seed: int,
    m: int = DEFAULT_MOSAICS,
    dim: int = DEFAULT_DIM,
    workers: int = 1,
) -> ScalingRow:
    """Times query_image on a random index of S records."""
    index = synthetic_index(s, m, dim, seed)
    query = synthetic_query(m, dim, seed + 1)
    cfg = FusionConfig(top_k=1, workers=workers)
    counter = OpCounter()
    query_image(query, index, cfg, counter)
    median_ms = _time_ms(lambda: query_image(query, index, cfg), repetitions)
    return ScalingRow(BenchMethods.FIXED_MOSAIC, s, p_bar, m, counter.mosaic_comparisons, median_ms)


def measure_baseline(
    s: int, p_bar: int, f: float, repetitions: int, seed: int, dim: int = DEFAULT_DIM
) -> ScalingRow:
    baseline = FractionalSamplingBaseline.random(s, p_bar, f, dim, seed)
    rng = np.random.default_rng(seed + 1)
    query_codes = sample_mosaics(random_codes(rng, (p_bar,), dim), f, rng)
    counter = OpCounter()
    baseline.distances(query_codes, counter)
    median_ms = _time_ms(lambda: baseline.distances(query_codes), repetitions)
    return ScalingRow(
        BenchMethods.FRACTIONAL_SAMPLING, s, p_bar, f, counter.mosaic_comparisons, median_ms
    )


def measure_scaling(
    sizes: Sequence[int],
    repetitions: int,
    seed: int,
    p_bar: int = 1000,
    fractions: Sequence[float] = (BASELINE_FRACTIONS[0],),
    baseline_sizes: Optional[Sequence[int]] = None,
    m: int = DEFAULT_MOSAICS,
    dim: int = DEFAULT_DIM,
    workers: int = 1,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
    progress: bool = False,
) -> List[ScalingRow]:
    """Median wall time and counted ops per query for every (method, S)."""
    if list(sizes) != sorted(sizes) or not sizes or sizes[0] < 1:
        raise UsageError(f"sizes must be positive and sorted ascending, got {list(sizes)}")
    if repetitions < 1:
        raise UsageError(f"repetitions must be >= 1, got {repetitions}")
    baseline_sizes = list(sizes if baseline_sizes is None else baseline_sizes)
    if baseline_sizes != sorted(baseline_sizes):
        raise UsageError(f"baseline sizes must be sorted ascending, got {baseline_sizes}")

    rows = []
    index_bytes = mosaic_block_bytes(m, dim) + semantic_block_bytes(dim, 8) + 512
    for s in tqdm(sizes, desc="fixed-mosaic", disable=not progress):
        fitted = _fit_size(s, index_bytes, memory_budget, BenchMethods.FIXED_MOSAIC)
        rows.append(measure_fixed_mosaic(fitted, p_bar, repetitions, seed, m, dim, workers))
    for f in fractions:
        # the full patch set of one slide exists only while it is being sampled
        baseline_bytes = sampled_count(p_bar, f) * words_per_code(dim) * 8
        for s in tqdm(baseline_sizes, desc=f"baseline f={f}", disable=not progress):
            fitted = _fit_size(s, baseline_bytes, memory_budget, BenchMethods.FRACTIONAL_SAMPLING)
            rows.append(measure_baseline(fitted, p_bar, f, repetitions, seed, dim))
    return rows


def linearity_ratios(rows: Iterable[ScalingRow], method: str) -> List[Tuple[int, int, float]]:
    """Time ratios between consecutive sizes S and 2S of one method and fraction."""
    by_series: Dict[float, List[ScalingRow]] = {}
    for row in rows:
        if row.method == method:
            by_series.setdefault(row.f_or_m, []).append(row)
    ratios = []
    for series in by_series.values():
        series.sort(key=lambda r: r.s)
        for small, large in zip(series, series[1:]):
            if large.s == 2 * small.s and small.median_ms > 0:
                ratios.append((small.s, large.s, large.median_ms / small.median_ms))
    return ratios


def write_scaling_csv(path: str, rows: Sequence[ScalingRow]) -> None:
    write_csv(path, SCALING_HEADER, (row.as_row() for row in rows))


def read_scaling_csv(path: str) -> List[ScalingRow]:
    with open(path, "r", encoding="utf-8", newline="") as csv_file:
        return [
            ScalingRow(
                method=row["method"],
                s=int(row["S"]),
                p_bar=int(row["p_bar"]),
                f_or_m=float(row["f_or_m"]),
                ops_per_query=int(row["ops_per_query"]),
                median_ms=float(row["median_ms"]),
            )
            for row in csv.DictReader(csv_file)
        ]


def plot_curves(
    sizes: Sequence[int],
    m: int = DEFAULT_MOSAICS,
    dim: int = DEFAULT_DIM,
    budget: int = DEFAULT_BUDGET,
    patch_counts: Sequence[int] = PLOT_PATCH_COUNTS,
    fractions: Sequence[float] = BASELINE_FRACTIONS,
) -> List[Tuple[str, str, float, float]]:
    """Log-log plot data: per-query cost against S, and capacity against P."""
    curves: List[Tuple[str, str, float, float]] = []
    fixed = fixed_mosaic_ops_per_candidate(m, dim)
    for s in sizes:
        curves.append(("cost-vs-size", f"{BenchMethods.FIXED_MOSAIC} m={m}", s, s * fixed.mosaic))
    for p in patch_counts:
        for f in fractions:
            series = f"{BenchMethods.FRACTIONAL_SAMPLING} f={f:g} P={p}"
            for s in sizes:
                curves.append(("cost-vs-size", series, s, s * baseline_ops_per_candidate(p, p, f)))
    for p in CAPACITY_PATCH_COUNTS:
        curves.append(
            ("capacity-vs-patches", f"{BenchMethods.FIXED_MOSAIC} m={m}", p, budget // fixed.total)
        )
        for f in fractions:
            ops = baseline_ops_per_candidate(p, p, f)
            if ops:
                series = f"{BenchMethods.FRACTIONAL_SAMPLING} f={f:g}"
                curves.append(("capacity-vs-patches", series, p, budget // ops))
    return curves


def write_plot_csv(path: str, curves: Sequence[Tuple[str, str, float, float]]) -> None:
    write_csv(path, PLOT_HEADER, curves)
