"""Layer-partitioned parallel execution of the RL loop.

Each worker owns a contiguous block of z-layers: its PSF kernels, its
volume slab, its normalizer and its best-so-far snapshot. Kernels and slabs
move once, at setup. Per iteration only lateral images cross the worker
boundary: the running forward sum, the broadcast ratio image, and a partial
z-maximum projection.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .deconv import (
    DeconvResult,
    StopPolicy,
    _rl_update,
    _validate_measurement,
    default_epsilon,
    entropy_evaluator,
    run_rl,
)
from .errors import MemoryBudgetError, ValidationError, WorkerError
from .lfmodel import LayerOperator, PsfStack, check_lateral, padded_shape, reduce_layers
from .metric import MetricConfig
from .optics import OpticsParams, cutoff_region

log = logging.getLogger(__name__)

WORKERS_ENV = "LFDECONV_WORKERS"
INT64_MAX = 2**63 - 1


@dataclass(frozen=True)
class MemoryEstimate:
    psf_bytes: int
    volume_bytes: int
    image_bytes: int
    workspace_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.psf_bytes + self.volume_bytes + self.image_bytes + self.workspace_bytes

    def terms(self) -> dict[str, int]:
        return {
            "psf_bytes": self.psf_bytes,
            "volume_bytes": self.volume_bytes,
            "image_bytes": self.image_bytes,
            "workspace_bytes": self.workspace_bytes,
        }


def estimate_memory(nz_local: int, height: int, width: int, nnum: int, kh: int, kw: int,
                    precision: int = 8) -> MemoryEstimate:
    """Peak memory of one worker holding ``nz_local`` layers.

    ``precision * (3*nz*H*W + nz*nnum^2*kh*kw + 2*H*W + 4*Hp*Wp)``: current,
    best and normalizer slabs; kernels; measurement and forward accumulator;
    transform workspace at the padded convolution size ``Hp x Wp``.
    """
    for name, value in (("height", height), ("width", width), ("nnum", nnum), ("kh", kh),
                        ("kw", kw), ("precision", precision)):
        if value < 1:
            raise ValidationError(f"{name}: must be >= 1, got {value}")
    if nz_local < 0:
        raise ValidationError(f"nz_local: must be >= 0, got {nz_local}")
    hp, wp = padded_shape(height, width, kh, kw)
    est = MemoryEstimate(
        psf_bytes=precision * nz_local * nnum * nnum * kh * kw,
        volume_bytes=precision * 3 * nz_local * height * width,
        image_bytes=precision * 2 * height * width,
        workspace_bytes=precision * 4 * hp * wp,
    )
    if est.total_bytes > INT64_MAX:
        raise ValidationError(
            f"memory estimate overflows a 64-bit byte count ({est.total_bytes} bytes)"
        )
    return est


@dataclass(frozen=True)
class WorkerPlan:
    """Contiguous, ordered z-ranges, one per worker (possibly empty)."""

    worker_count: int
    assignments: tuple[range, ...]
    bytes_per_worker: tuple[int, ...] = ()
    estimates: tuple[MemoryEstimate, ...] = field(default=(), repr=False)

    @property
    def sizes(self) -> list[int]:
        return [len(r) for r in self.assignments]

    @property
    def nz(self) -> int:
        return sum(self.sizes)


def partition_layers(nz: int, workers: int) -> WorkerPlan:
    """Split ``nz`` layers into ``workers`` contiguous ranges whose sizes differ by at most 1.

    The first ``nz % workers`` ranges get the extra layer; workers beyond
    ``nz`` get empty ranges.

    >>> partition_layers(15, 4).sizes
    [4, 4, 4, 3]
    """
    if nz < 1:
        raise ValidationError(f"nz: must be >= 1, got {nz}")
    if workers < 1:
        raise ValidationError(f"workers: must be >= 1, got {workers}")
    base, extra = divmod(nz, workers)
    ranges = []
    start = 0
    for w in range(workers):
        size = base + (1 if w < extra else 0)
        ranges.append(range(start, start + size))
        start += size
    return WorkerPlan(workers, tuple(ranges))


def plan_workers(nz: int, workers: int, height: int, width: int, psf: PsfStack,
                 precision: int = 8) -> WorkerPlan:
    """:func:`partition_layers` with per-worker memory estimates filled in."""
    plan = partition_layers(nz, workers)
    estimates = tuple(
        estimate_memory(len(r), height, width, psf.nnum, psf.kh, psf.kw, precision)
        for r in plan.assignments
    )
    return WorkerPlan(plan.worker_count, plan.assignments,
                      tuple(e.total_bytes for e in estimates), estimates)


def resolve_workers(flag: int | None = None) -> int:
    """Worker count: explicit flag, else ``LFDECONV_WORKERS``, else 1."""
    if flag is not None:
        value, source = flag, "--workers"
    elif os.environ.get(WORKERS_ENV):
        raw = os.environ[WORKERS_ENV]
        try:
            value = int(raw)
        except ValueError:
            raise ValidationError(f"{WORKERS_ENV}: expected a positive integer, got {raw!r}") from None
        source = WORKERS_ENV
    else:
        return 1
    if value < 1:
        raise ValidationError(f"{source}: must be >= 1, got {value}")
    return value


def check_budget(plan: WorkerPlan, budget_bytes: int | None) -> None:
    if budget_bytes is None:
        return
    for w, est in enumerate(plan.estimates):
        if est.total_bytes > budget_bytes:
            term, size = max(est.terms().items(), key=lambda kv: kv[1])
            raise MemoryBudgetError(
                f"worker {w} needs {est.total_bytes} bytes, over the budget of {budget_bytes}; "
                f"limiting term is {term} ({size} bytes)",
                term=term,
            )


@dataclass
class TransferStats:
    """Bytes crossing the worker boundary, by phase."""

    setup_bytes: int = 0
    final_bytes: int = 0
    iteration_bytes: list[int] = field(default_factory=list)
    _current: int = 0

    def count(self, *arrays) -> None:
        self._current += sum(a.nbytes for a in arrays if a is not None)

    def close_setup(self) -> None:
        self.setup_bytes += self._current
        self._current = 0

    def close_iteration(self) -> None:
        self.iteration_bytes.append(self._current)
        self._current = 0

    def close_final(self) -> None:
        self.final_bytes += self._current
        self._current = 0


class _Worker:
    """State and single-thread executor for one block of layers."""

    def __init__(self, index: int, layers: range, kernels: np.ndarray, height: int, width: int,
                 dtype, epsilon: float, method: str):
        self.index = index
        self.layers = layers
        self.shape = (len(layers), height, width)
        self.dtype = dtype
        self.epsilon = epsilon
        self.executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"lfdeconv-w{index}")
        self._kernels = np.array(kernels)
        self._method = method
        self.op = None
        self.x = self.best = self.normalizer = None
        self._partial = None

    def submit(self, fn, *args):
        return self.executor.submit(fn, *args)

    def setup(self):
        h, w = self.shape[1:]
        self.op = LayerOperator(self._kernels, h, w, self._method)
        self.normalizer = self.op.backward(np.ones((h, w)))

    def fill(self, value):
        self.x = np.full(self.shape, value, self.dtype)

    def load(self, slab):
        self.x = np.array(slab, dtype=self.dtype)

    def forward_layers(self):
        self._partial = self.op.forward_layers(self.x)

    def accumulate(self, acc):
        acc = acc.copy()
        reduce_layers(self._partial, acc)
        self._partial = None
        return acc

    def update(self, ratio):
        if not self.layers:
            return None
        back = self.op.backward(ratio)
        self.x = _rl_update(self.x.astype(np.float64), back, self.normalizer, self.epsilon).astype(self.dtype)
        return self.x.max(axis=0).astype(np.float64)

    def mark_best(self):
        self.best = self.x.copy()

    def get_best(self):
        return self.best

    def shutdown(self):
        self.executor.shutdown(wait=True, cancel_futures=True)


class PipelineEngine:
    """RL engine whose volume lives in worker-owned slabs."""

    def __init__(self, psf: PsfStack, height: int, width: int, plan: WorkerPlan,
                 dtype=np.float64, epsilon: float | None = None, method: str = "fft"):
        if plan.nz != psf.nz:
            raise ValidationError(f"plan covers {plan.nz} layers but PSF has {psf.nz}")
        self.shape = (psf.nz, height, width)
        self.dtype = np.dtype(dtype)
        self.epsilon = default_epsilon(dtype) if epsilon is None else epsilon
        self.stats = TransferStats()
        self.workers = []
        for i, layers in enumerate(plan.assignments):
            kernels = psf.kernels[layers.start:layers.stop]
            self.stats.count(kernels)
            self.workers.append(_Worker(i, layers, kernels, height, width, self.dtype,
                                        self.epsilon, method))
        self._gather([w.submit(w.setup) for w in self.workers])
        self.stats.close_setup()

    def _gather(self, futures):
        results = []
        for w, fut in zip(self.workers, futures):
            try:
                results.append(fut.result())
            except Exception as exc:
                self.close()
                raise WorkerError(f"worker {w.index} (layers {w.layers.start}-{w.layers.stop - 1}) "
                                  f"failed: {exc}") from exc
        return results

    def fill(self, value):
        self._gather([w.submit(w.fill, value) for w in self.workers])
        # the initial scaling projection counts as setup traffic
        self.stats.close_setup()

    def load(self, volume):
        futures = []
        for w in self.workers:
            slab = volume[w.layers.start:w.layers.stop]
            self.stats.count(slab)
            futures.append(w.submit(w.load, slab))
        self._gather(futures)
        self.stats.close_setup()

    def forward(self):
        self._gather([w.submit(w.forward_layers) for w in self.workers])
        acc = np.zeros(self.shape[1:])
        # chained in ascending z so the sum matches the serial order exactly
        for w in self.workers:
            self.stats.count(acc)
            acc = self._gather_one(w, w.submit(w.accumulate, acc))
            self.stats.count(acc)
        return acc

    def _gather_one(self, worker, fut):
        try:
            return fut.result()
        except Exception as exc:
            self.close()
            raise WorkerError(f"worker {worker.index} failed: {exc}") from exc

    def update(self, ratio):
        futures = []
        for w in self.workers:
            self.stats.count(ratio)
            futures.append(w.submit(w.update, ratio))
        projection = None
        for part in self._gather(futures):
            if part is None:
                continue
            self.stats.count(part)
            projection = part if projection is None else np.maximum(projection, part)
        self.stats.close_iteration()
        return projection

    def mark_best(self):
        self._gather([w.submit(w.mark_best) for w in self.workers])

    def best_volume(self):
        slabs = self._gather([w.submit(w.get_best) for w in self.workers])
        self.stats.count(*slabs)
        self.stats.close_final()
        return np.concatenate(slabs, axis=0)

    def close(self):
        for w in self.workers:
            w.shutdown()


def run_parallel(y, psf: PsfStack, optics: OpticsParams, policy: StopPolicy | None = None,
                 plan: WorkerPlan | None = None, *, init=None, metric: MetricConfig | None = None,
                 epsilon: float | None = None, dtype=np.float64, evaluator=None, sink=None,
                 memory_budget: int | None = None, method: str = "fft") -> DeconvResult:
    """Partitioned equivalent of :func:`lfdeconv.deconv.deconvolve`.

    Results are bit-identical to the serial path for any plan. The returned
    result carries a :class:`TransferStats` in ``transfers``.

    Raises
    ------
    MemoryBudgetError
        Before any work starts, if a worker's estimate exceeds ``memory_budget``.
    WorkerError
        If any worker fails; no partial result is returned.
    """
    policy = policy or StopPolicy()
    y = _validate_measurement(y)
    if optics.nnum != psf.nnum:
        raise ValidationError(f"optics nnum={optics.nnum} does not match PSF nnum={psf.nnum}")
    height, width = y.shape
    check_lateral(height, width, psf.nnum)
    precision = np.dtype(dtype).itemsize
    if plan is None:
        plan = plan_workers(psf.nz, 1, height, width, psf, precision)
    elif not plan.estimates:
        plan = plan_workers(psf.nz, plan.worker_count, height, width, psf, precision)
    check_budget(plan, memory_budget)
    if evaluator is None:
        evaluator = entropy_evaluator(cutoff_region(optics, height, width), metric)
    log.debug("running %d workers over layer sizes %s", plan.worker_count, plan.sizes)
    engine = PipelineEngine(psf, height, width, plan, dtype, epsilon, method)
    try:
        result = run_rl(engine, y, policy, evaluator, init, sink)
    finally:
        engine.close()
    result.transfers = engine.stats
    return result
