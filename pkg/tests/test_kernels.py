import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mc_standard_error
from picluster.core import DenseVector, Matrix, partition
from picluster.kernels import (
    ComputePool,
    PartialEstimate,
    RngStreamSpec,
    combine_estimates,
    estimate_from_uniforms,
    matvec_parallel,
    matvec_sequential,
    mc_pi_parallel,
    mc_pi_sequential,
    stream_id_for,
)


def matvec_oracle(m: Matrix, v: DenseVector) -> list[float]:
    # plain Python, left-to-right per row: independent of the compiled kernel
    rows = m.as_array().tolist()
    vec = v.data.tolist()
    out = []
    for row in rows:
        acc = 0.0
        for a, b in zip(row, vec):
            acc += a * b
        out.append(acc)
    return out


def test_matvec_identity():
    assert matvec_sequential(Matrix.identity(3), DenseVector([1, 2, 3])).tolist() == [1, 2, 3]
    assert matvec_parallel(Matrix.identity(3), DenseVector([1, 2, 3]), 3).tolist() == [1, 2, 3]


def test_matvec_zero_matrix():
    m = Matrix(2, 4, np.zeros(8))
    assert matvec_sequential(m, DenseVector([5, -1, 2, 7])).tolist() == [0.0, 0.0]


def test_matvec_2x2():
    m = Matrix.from_rows([[1, 2], [3, 4]])
    assert matvec_sequential(m, DenseVector([1, 1])).tolist() == [3.0, 7.0]


def test_matvec_dimension_mismatch():
    m = Matrix.identity(3)
    with pytest.raises(ValueError):
        matvec_sequential(m, DenseVector([1, 2]))
    with pytest.raises(ValueError):
        matvec_parallel(m, DenseVector([1, 2]), 2)
    with pytest.raises(ValueError):
        matvec_parallel(m, DenseVector([1, 2, 3]), 0)


@pytest.mark.parametrize("shape", [(1, 1), (7, 3), (40, 65), (100, 100)])
def test_matvec_sequential_matches_python_oracle(shape):
    m = Matrix.random(*shape, seed=shape[0])
    v = DenseVector.random(shape[1], seed=shape[1])
    expected = np.array(matvec_oracle(m, v))
    assert matvec_sequential(m, v).data.tobytes() == expected.tobytes()


def test_matvec_parallel_100x100_bit_exact():
    m = Matrix.random(100, 100, seed=11)
    v = DenseVector.random(100, seed=12)
    assert matvec_parallel(m, v, 4) == matvec_sequential(m, v)
    assert matvec_parallel(m, v, 1) == matvec_sequential(m, v)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 200),
    st.integers(1, 200),
    st.integers(1, 8),
    st.integers(0, 2**32),
)
def test_matvec_parallel_bit_identical(rows, cols, threads, seed):
    m = Matrix.random(rows, cols, seed=seed)
    v = DenseVector.random(cols, seed=seed + 1)
    assert matvec_parallel(m, v, threads) == matvec_sequential(m, v)


def test_matvec_more_threads_than_rows():
    m = Matrix.random(3, 5, seed=0)
    v = DenseVector.random(5, seed=1)
    assert matvec_parallel(m, v, 8) == matvec_sequential(m, v)


def test_matvec_with_shared_pool():
    m = Matrix.random(50, 20, seed=3)
    v = DenseVector.random(20, seed=4)
    with ComputePool(4) as pool:
        for k in range(1, 9):
            assert matvec_parallel(m, v, k, pool) == matvec_sequential(m, v)


class _FixedDraws:
    """Stream stub emitting a fixed list of uniforms."""

    def __init__(self, draws):
        self.draws = list(draws)

    def generator(self):
        draws = iter(self.draws)

        class _Gen:
            def random(self, out):
                for i in range(out.shape[0]):
                    out[i] = next(draws)

        return _Gen()


def test_mc_single_zero_draw_gives_four():
    assert mc_pi_sequential(1, _FixedDraws([0.0])).value == 4.0


def test_mc_boundary_draw():
    eps = 2.0**-20
    u = math.sqrt(1.0 - eps)
    est = mc_pi_sequential(1, _FixedDraws([u]))
    assert est.value == pytest.approx(4.0 * math.sqrt(1.0 - u * u), rel=1e-12)
    assert est.value == pytest.approx(4.0 * math.sqrt(eps), rel=1e-6)


def test_mc_rejects_zero_samples():
    with pytest.raises(ValueError):
        mc_pi_sequential(0, RngStreamSpec(1))
    with pytest.raises(ValueError):
        mc_pi_parallel(0, 2, RngStreamSpec(1))
    with pytest.raises(ValueError):
        mc_pi_parallel(10, 0, RngStreamSpec(1))


def test_mc_sequential_accuracy():
    n = 10**6
    assert 4 * mc_standard_error(n) < 5e-3
    est = mc_pi_sequential(n, RngStreamSpec(20170817, 0))
    assert est.samples_used == n
    assert abs(est.value - math.pi) <= 5e-3


def test_mc_parallel_accuracy():
    est = mc_pi_parallel(10**6, 4, RngStreamSpec(20170817, 0))
    assert est.samples_used == 10**6
    assert abs(est.value - math.pi) <= 5e-3


@pytest.mark.parametrize("n", [1, 5, 70000, 131073])
def test_single_thread_parallel_equals_sequential(n):
    stream = RngStreamSpec(42, 9)
    assert mc_pi_parallel(n, 1, stream) == mc_pi_sequential(n, stream)


def test_mc_deterministic_and_stream_sensitive():
    a = mc_pi_sequential(10000, RngStreamSpec(1, 0))
    assert a == mc_pi_sequential(10000, RngStreamSpec(1, 0))
    assert a != mc_pi_sequential(10000, RngStreamSpec(1, 1))
    assert a != mc_pi_sequential(10000, RngStreamSpec(2, 0))


def test_mc_parallel_replays_thread_streams():
    # oracle: draw each thread's stream explicitly, concatenate, one exact sum
    n, threads = 200_003, 5
    base = RngStreamSpec(77, stream_id_for(3, 0))
    draws = []
    for t, share in enumerate(partition(n, threads).shares):
        draws.extend(base.child(t).generator().random(share).tolist())
    oracle = 4.0 * math.fsum(math.sqrt(1.0 - u * u) for u in draws) / n
    est = mc_pi_parallel(n, threads, base)
    assert est.samples_used == n
    assert est.value == pytest.approx(oracle, rel=1e-12, abs=0)


@pytest.mark.parametrize("threads", [1, 2, 3, 4, 5, 7, 8])
def test_block_estimates_combine_to_sequential(threads):
    rng = np.random.default_rng(5)
    draws = rng.random(100_000)
    oracle = 4.0 * math.fsum(np.sqrt(1.0 - draws * draws).tolist()) / draws.size
    parts = [
        estimate_from_uniforms(draws[start : start + count])
        for start, count in partition(draws.size, threads).ranges()
    ]
    combined = combine_estimates(parts)
    assert combined.samples_used == draws.size
    assert combined.value == pytest.approx(oracle, rel=1e-12, abs=0)


def test_more_threads_than_samples():
    est = mc_pi_parallel(3, 8, RngStreamSpec(0))
    assert est.samples_used == 3
    assert 0.0 <= est.value <= 4.0


def test_combine_examples():
    assert combine_estimates([PartialEstimate(3.0, 5), PartialEstimate(3.2, 5)]).value == pytest.approx(3.1, rel=1e-15)
    assert combine_estimates([PartialEstimate(3.0, 2), PartialEstimate(3.6, 1)]).value == pytest.approx(3.2, rel=1e-15)
    single = combine_estimates([PartialEstimate(3.0000000000000004, 7)])
    assert (single.value, single.samples_used) == (3.0000000000000004, 7)
    with pytest.raises(ValueError):
        combine_estimates([])


@given(
    st.lists(
        st.tuples(st.floats(0.0, 4.0), st.integers(1, 10**9)),
        min_size=1,
        max_size=12,
    ),
    st.randoms(use_true_random=False),
)
def test_combine_permutation_invariant(parts, rnd):
    estimates = [PartialEstimate(v, n) for v, n in parts]
    shuffled = list(estimates)
    rnd.shuffle(shuffled)
    a = combine_estimates(estimates)
    b = combine_estimates(shuffled)
    assert a.samples_used == b.samples_used
    assert a.value == pytest.approx(b.value, rel=1e-12, abs=1e-300)
    assert 0.0 <= a.value <= 4.0


def test_stream_ids_unique_across_cluster():
    ids = {stream_id_for(w, t) for w, t in itertools.product(range(8), range(64))}
    assert len(ids) == 8 * 64
    with pytest.raises(ValueError):
        stream_id_for(0, 2**16)


def test_pool_prestart_and_reuse():
    with ComputePool(4) as pool:
        assert pool.ready_threads == 0
        assert pool.prestart(4) >= 4
        before = pool.ready_threads
        mc_pi_parallel(10_000, 4, RngStreamSpec(3), pool)
        assert pool.ready_threads == before


def test_concurrent_callers_share_pool():
    from concurrent.futures import ThreadPoolExecutor

    m = Matrix.random(120, 60, seed=8)
    v = DenseVector.random(60, seed=9)
    expected = matvec_sequential(m, v)
    with ComputePool(3) as pool, ThreadPoolExecutor(4) as callers:
        results = list(callers.map(lambda k: matvec_parallel(m, v, k, pool), range(1, 9)))
    assert all(r == expected for r in results)
