import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.fft import next_fast_len

from lfdeconv import pipeline
from lfdeconv.deconv import StopPolicy, deconvolve
from lfdeconv.errors import MemoryBudgetError, ValidationError, WorkerError
from lfdeconv.pipeline import (
    estimate_memory,
    partition_layers,
    plan_workers,
    resolve_workers,
    run_parallel,
)
from lfdeconv.phantom import gen_psf, simulate
from conftest import BEAD_OPTICS, BEAD_PSF, bead_phantom, random_psf


@pytest.mark.parametrize("nz, w, sizes", [(15, 4, [4, 4, 4, 3]), (8, 2, [4, 4]), (3, 5, [1, 1, 1, 0, 0])])
def test_partition_examples(nz, w, sizes):
    plan = partition_layers(nz, w)
    assert plan.sizes == sizes
    assert plan.nz == nz


def test_partition_exhaustive():
    for nz in range(1, 65):
        for w in range(1, 65):
            plan = partition_layers(nz, w)
            assert len(plan.assignments) == w
            flat = [z for r in plan.assignments for z in r]
            assert flat == list(range(nz))
            assert max(plan.sizes) - min(plan.sizes) <= 1


@pytest.mark.parametrize("nz, w", [(0, 1), (4, 0)])
def test_partition_rejects(nz, w):
    with pytest.raises(ValidationError):
        partition_layers(nz, w)


def test_memory_estimate_worked_example():
    assert next_fast_len(900, real=True) == 900
    est = estimate_memory(4, 600, 600, 15, 301, 301, precision=4)
    assert est.total_bytes == 359_283_600
    assert est.psf_bytes == 4 * 4 * 225 * 301 * 301


def test_memory_estimate_empty_worker_and_precision():
    est = estimate_memory(0, 600, 600, 15, 301, 301, precision=4)
    assert est.psf_bytes == est.volume_bytes == 0
    assert est.total_bytes == 4 * (2 * 600 * 600 + 4 * 900 * 900)
    double = estimate_memory(4, 600, 600, 15, 301, 301, precision=8)
    assert double.total_bytes == 2 * 359_283_600


@given(st.integers(0, 40), st.integers(1, 300), st.integers(1, 300), st.sampled_from([1, 3, 5]),
       st.sampled_from([4, 8]))
@settings(max_examples=60, deadline=None)
def test_memory_estimate_monotone_in_layers(nz, h, w, nnum, prec):
    a = estimate_memory(nz, h, w, nnum, 5, 5, prec).total_bytes
    b = estimate_memory(nz + 1, h, w, nnum, 5, 5, prec).total_bytes
    assert b - a == prec * (3 * h * w + nnum * nnum * 25)


def test_memory_estimate_overflow():
    with pytest.raises(ValidationError, match="overflow"):
        estimate_memory(10**6, 10**6, 10**6, 15, 301, 301, precision=8)


def test_resolve_workers_precedence(monkeypatch):
    monkeypatch.delenv(pipeline.WORKERS_ENV, raising=False)
    assert resolve_workers() == 1
    monkeypatch.setenv(pipeline.WORKERS_ENV, "3")
    assert resolve_workers() == 3
    assert resolve_workers(2) == 2
    monkeypatch.setenv(pipeline.WORKERS_ENV, "many")
    with pytest.raises(ValidationError):
        resolve_workers()
    with pytest.raises(ValidationError):
        resolve_workers(0)


@pytest.fixture(scope="module")
def bead_case():
    psf = gen_psf(BEAD_PSF)
    _, y = simulate(bead_phantom(1), psf)
    return psf, y


def test_single_worker_matches_serial(bead_case):
    psf, y = bead_case
    a = deconvolve(y, psf, BEAD_OPTICS)
    b = run_parallel(y, psf, BEAD_OPTICS)
    assert np.array_equal(a.volume, b.volume)
    assert a.series.same_values(b.series)
    assert (a.best_iter, a.stop_iter) == (b.best_iter, b.stop_iter)


@pytest.mark.parametrize("workers", [2, 3, 4, 9])
def test_worker_count_invariance(bead_case, workers):
    psf, y = bead_case
    ref = run_parallel(y, psf, BEAD_OPTICS, StopPolicy.fixed(8))
    got = run_parallel(y, psf, BEAD_OPTICS, StopPolicy.fixed(8),
                       plan_workers(psf.nz, workers, *y.shape, psf))
    assert np.array_equal(ref.volume, got.volume)
    assert ref.series.same_values(got.series)


def test_direct_method_invariance(rng):
    psf = random_psf(rng, nz=4, nnum=3, kh=5, kw=5)
    y = rng.random((15, 15)) + 0.1
    ref = run_parallel(y, psf, BEAD_OPTICS, StopPolicy.fixed(3), method="direct")
    got = run_parallel(y, psf, BEAD_OPTICS, StopPolicy.fixed(3),
                       plan_workers(4, 3, 15, 15, psf), method="direct")
    assert np.array_equal(ref.volume, got.volume)


def _bytes_for(nz, workers, size=45):
    psf = random_psf(np.random.default_rng(nz), nz=nz, nnum=3, kh=9, kw=9)
    y = np.random.default_rng(0).random((size, size)) + 0.5
    res = run_parallel(y, psf, BEAD_OPTICS, StopPolicy.fixed(3), plan_workers(nz, workers, size, size, psf))
    return res.transfers


def test_per_iteration_bytes_independent_of_depth():
    a = _bytes_for(4, 2)
    b = _bytes_for(16, 2)
    assert len(set(a.iteration_bytes)) == 1
    assert a.iteration_bytes == b.iteration_bytes
    assert a.iteration_bytes[0] == 4 * 2 * 45 * 45 * 8
    assert b.setup_bytes > a.setup_bytes


def test_budget_refusal_names_term(bead_case):
    psf, y = bead_case
    with pytest.raises(MemoryBudgetError) as err:
        run_parallel(y, psf, BEAD_OPTICS, memory_budget=1000)
    assert err.value.term in ("psf_bytes", "volume_bytes", "image_bytes", "workspace_bytes")
    assert err.value.term in str(err.value)


def test_empty_range_workers(rng):
    psf = random_psf(rng, nz=2, nnum=3, kh=5, kw=5)
    y = rng.random((9, 9)) + 0.1
    ref = run_parallel(y, psf, BEAD_OPTICS, StopPolicy.fixed(3))
    got = run_parallel(y, psf, BEAD_OPTICS, StopPolicy.fixed(3), plan_workers(2, 5, 9, 9, psf))
    assert np.array_equal(ref.volume, got.volume)


def test_plan_layer_mismatch(rng):
    psf = random_psf(rng, nz=3, nnum=3, kh=5, kw=5)
    with pytest.raises(ValidationError):
        run_parallel(np.ones((9, 9)), psf, BEAD_OPTICS, plan=plan_workers(4, 2, 9, 9, psf))


def test_worker_failure_is_reported(monkeypatch, rng):
    psf = random_psf(rng, nz=4, nnum=3, kh=5, kw=5)
    original = pipeline._Worker.update

    def broken(self, ratio):
        if self.index == 1:
            raise RuntimeError("simulated fault")
        return original(self, ratio)

    monkeypatch.setattr(pipeline._Worker, "update", broken)
    with pytest.raises(WorkerError, match="simulated fault"):
        run_parallel(rng.random((9, 9)) + 0.1, psf, BEAD_OPTICS, StopPolicy.fixed(2),
                     plan_workers(4, 2, 9, 9, psf))
