"""Sequential and multithreaded kernels: row-partitioned mat-vec and Monte Carlo pi.

The mat-vec inner loop is compiled with numba and releases the GIL, so
threads run shards truly in parallel. Each row is accumulated strictly
left to right in one compiled routine shared by every path, which is what
makes the parallel and distributed results bit-identical to the
sequential one.

Monte Carlo sampling uses numpy's PCG64 generator. A stream is identified
by ``(base_seed, stream_id)`` and seeded through
``SeedSequence(base_seed, spawn_key=(stream_id,))``; distinct pairs give
statistically independent streams and the same pair reproduces the same
draws on any machine.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, TypeVar

import numba
import numpy as np

from .core import U64_MAX, DenseVector, Matrix, PiEstimate, partition

T = TypeVar("T")

# Uniform draws are generated and reduced in blocks of this many samples.
# Changing it changes the floating summation order and therefore the low
# bits of every estimate.
SAMPLE_CHUNK = 1 << 16

# Spacing between the stream ids of consecutive workers.
STREAMS_PER_WORKER = 1 << 16


@numba.njit(nogil=True, cache=True)
def _matvec_rows(a, v, out, start, stop):
    cols = a.shape[1]
    for i in range(start, stop):
        acc = 0.0
        for j in range(cols):
            acc += a[i, j] * v[j]
        out[i] = acc


@dataclass(frozen=True)
class RngStreamSpec:
    base_seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not 0 <= self.base_seed <= U64_MAX or not 0 <= self.stream_id <= U64_MAX:
            raise ValueError("base_seed and stream_id must be unsigned 64-bit values")

    def child(self, offset: int) -> "RngStreamSpec":
        return RngStreamSpec(self.base_seed, self.stream_id + offset)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.base_seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(seq))


def stream_id_for(worker_index: int, thread_index: int) -> int:
    if not 0 <= thread_index < STREAMS_PER_WORKER:
        raise ValueError(f"thread index {thread_index} exceeds the per-worker stream block")
    return worker_index * STREAMS_PER_WORKER + thread_index


@dataclass(frozen=True)
class PartialEstimate:
    value: float
    samples: int

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("a partial estimate needs at least one sample")
        if not 0.0 <= self.value <= 4.0:
            raise ValueError(f"partial estimate {self.value} outside [0, 4]")


class ComputePool:
    """A reusable thread pool that remembers how many threads it has started."""

    def __init__(self, max_threads: int, name: str = "compute"):
        if max_threads < 1:
            raise ValueError("max_threads must be >= 1")
        self.max_threads = max_threads
        self._executor = ThreadPoolExecutor(max_threads, thread_name_prefix=name)
        self._seen: set[int] = set()
        self._lock = threading.Lock()

    def _track(self, fn, *args):
        ident = threading.get_ident()
        with self._lock:
            self._seen.add(ident)
        return fn(*args)

    @property
    def ready_threads(self) -> int:
        with self._lock:
            return len(self._seen)

    def run_all(self, fn: Callable[..., T], arg_tuples: Iterable[Sequence]) -> list[T]:
        """Run ``fn(*args)`` for each tuple concurrently; results in input order."""
        futures = [self._executor.submit(self._track, fn, *args) for args in arg_tuples]
        return [f.result() for f in futures]

    def prestart(self, n: int, timeout: float = 10.0) -> int:
        """Force at least ``min(n, max_threads)`` threads into existence."""
        n = min(n, self.max_threads)
        if n < 1:
            return self.ready_threads
        barrier = threading.Barrier(n)

        def hold():
            try:
                barrier.wait(timeout)
            except threading.BrokenBarrierError:
                pass

        self.run_all(hold, [()] * n)
        return self.ready_threads

    def shutdown(self):
        self._executor.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def _run_shards(fn, arg_tuples: list, threads: int, pool: ComputePool | None) -> list:
    if len(arg_tuples) == 1:
        return [fn(*arg_tuples[0])]
    if pool is not None:
        return pool.run_all(fn, arg_tuples)
    with ComputePool(threads, name="kernel") as tmp:
        return tmp.run_all(fn, arg_tuples)


def _check_matvec(m: Matrix, v: DenseVector):
    if len(v) != m.cols:
        raise ValueError(f"vector length {len(v)} does not match matrix with {m.cols} columns")


def matvec_rows(block: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Multiply a 2-D row block by ``v`` on the calling thread."""
    block = np.ascontiguousarray(block, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if block.ndim != 2 or block.shape[1] != v.shape[0]:
        raise ValueError(f"cannot multiply {block.shape} block by vector of length {v.shape[0]}")
    out = np.empty(block.shape[0])
    _matvec_rows(block, v, out, 0, block.shape[0])
    return out


def matvec_sequential(m: Matrix, v: DenseVector) -> DenseVector:
    _check_matvec(m, v)
    return DenseVector(matvec_rows(m.as_array(), v.data))


def matvec_parallel(
    m: Matrix, v: DenseVector, threads: int, pool: ComputePool | None = None
) -> DenseVector:
    """Compute ``m @ v`` with the rows split across ``threads`` threads.

    Each thread writes a disjoint slice of the output. Bit-identical to
    :func:`matvec_sequential` for any thread count.
    """
    _check_matvec(m, v)
    plan = partition(m.rows, threads)
    a = m.as_array()
    vec = v.data
    out = np.empty(m.rows)
    shards = [(a, vec, out, start, start + count) for start, count in plan.ranges() if count]
    _run_shards(_matvec_rows, shards, threads, pool)
    return DenseVector(out)


def _sum_sqrt_terms(gen, samples: int) -> float:
    buf = np.empty(min(SAMPLE_CHUNK, samples))
    total = 0.0
    remaining = samples
    while remaining:
        u = buf[: min(SAMPLE_CHUNK, remaining)]
        gen.random(out=u)
        total += _chunk_sum(u)
        remaining -= u.shape[0]
    return total


def _chunk_sum(u: np.ndarray) -> float:
    # in place: u <- sqrt(1 - u^2)
    np.multiply(u, u, out=u)
    np.subtract(1.0, u, out=u)
    np.sqrt(u, out=u)
    return float(u.sum())


def estimate_from_uniforms(uniforms: Sequence[float]) -> PartialEstimate:
    """Average-value estimate over an explicit list of uniform draws."""
    u = np.array(uniforms, dtype=np.float64)
    if u.ndim != 1 or u.size < 1:
        raise ValueError("need a non-empty 1-D sequence of draws")
    total = 0.0
    for start in range(0, u.size, SAMPLE_CHUNK):
        total += _chunk_sum(u[start : start + SAMPLE_CHUNK])
    return PartialEstimate(4.0 * total / u.size, int(u.size))


def mc_pi_sequential(samples: int, stream: RngStreamSpec) -> PiEstimate:
    """Estimate pi as the mean of ``4 * sqrt(1 - U**2)`` over ``samples`` draws.

    ``stream`` only needs a ``generator()`` method returning an object with a
    numpy-style ``random(out=...)``; tests stub it to control the draws.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    total = _sum_sqrt_terms(stream.generator(), samples)
    return PiEstimate(4.0 * total / samples, samples)


def _partial(samples: int, stream: RngStreamSpec) -> PartialEstimate:
    est = mc_pi_sequential(samples, stream)
    return PartialEstimate(est.value, est.samples_used)


def mc_pi_parallel(
    samples: int, threads: int, base: RngStreamSpec, pool: ComputePool | None = None
) -> PiEstimate:
    """Split ``samples`` across ``threads``; thread ``t`` draws from ``base.child(t)``."""
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    plan = partition(samples, threads)
    shards = [(count, base.child(t)) for t, count in enumerate(plan.shares) if count]
    parts = _run_shards(_partial, shards, threads, pool)
    return combine_estimates(parts)


def combine_estimates(parts: Sequence[PartialEstimate]) -> PiEstimate:
    """Sample-count weighted mean of partial estimates.

    With equal counts this is the plain average of the partials. The sum is
    exactly rounded, so the result does not depend on the order of ``parts``.
    """
    if not parts:
        raise ValueError("cannot combine an empty list of estimates")
    if len(parts) == 1:
        return PiEstimate(parts[0].value, parts[0].samples)
    n = sum(p.samples for p in parts)
    weighted = math.fsum(p.value * p.samples for p in parts)
    return PiEstimate(min(weighted / n, 4.0), n)
