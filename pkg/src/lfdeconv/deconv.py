"""Richardson-Lucy iterations with DCT-entropy automatic stopping."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple

import numpy as np

from .errors import DimensionError, ValidationError
from .lfmodel import LayerOperator, PsfStack, check_lateral, reduce_layers
from .metric import MetricConfig, dct_entropy, max_project_z
from .optics import CutoffRegion, OpticsParams, cutoff_region

EPS_DOUBLE = 1e-12
EPS_SINGLE = 1e-6


def default_epsilon(dtype) -> float:
    return EPS_SINGLE if np.dtype(dtype) == np.float32 else EPS_DOUBLE


@dataclass(frozen=True)
class StopPolicy:
    """When to stop iterating.

    In ``"auto"`` mode the run stops at the first iteration ``k >= min_iters``
    after ``patience`` consecutive strict decreases of the entropy, or at
    ``max_iters``. In ``"fixed"`` mode exactly ``fixed_iters`` iterations run.
    """

    max_iters: int = 50
    min_iters: int = 2
    patience: int = 1
    mode: str = "auto"
    fixed_iters: int | None = None

    def __post_init__(self):
        for name in ("max_iters", "min_iters", "patience"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ValidationError(f"{name}: expected an integer, got {value!r}")
        if not 1 <= self.min_iters <= self.max_iters:
            raise ValidationError(
                f"min_iters/max_iters: need 1 <= min_iters <= max_iters, got {self.min_iters}, {self.max_iters}"
            )
        if self.patience < 1:
            raise ValidationError(f"patience: must be >= 1, got {self.patience}")
        if self.mode not in ("auto", "fixed"):
            raise ValidationError(f"mode: expected 'auto' or 'fixed', got {self.mode!r}")
        if self.mode == "fixed":
            if self.fixed_iters is None or not 1 <= self.fixed_iters <= self.max_iters:
                raise ValidationError(
                    f"fixed_iters: need 1 <= fixed_iters <= max_iters={self.max_iters}, got {self.fixed_iters!r}"
                )

    @classmethod
    def fixed(cls, n: int) -> "StopPolicy":
        return cls(max_iters=max(n, 1), min_iters=1, mode="fixed", fixed_iters=n)

    def should_stop(self, entropies: list[float]) -> bool:
        k = len(entropies)
        if self.mode == "fixed":
            return k >= self.fixed_iters
        if k >= self.max_iters:
            return True
        if k < self.min_iters or k <= self.patience:
            return False
        tail = entropies[-(self.patience + 1):]
        return all(later < earlier for earlier, later in zip(tail, tail[1:]))


class MetricEntry(NamedTuple):
    iteration: int
    entropy: float
    wall_ms: float


@dataclass
class MetricSeries:
    entries: list[MetricEntry] = field(default_factory=list)

    def append(self, entry: MetricEntry) -> None:
        if self.entries and entry.iteration <= self.entries[-1].iteration:
            raise ValidationError("iteration indices must be strictly increasing")
        if not np.isfinite(entry.entropy):
            raise ValidationError(f"non-finite entropy at iteration {entry.iteration}")
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[MetricEntry]:
        return iter(self.entries)

    @property
    def iterations(self) -> list[int]:
        return [e.iteration for e in self.entries]

    @property
    def entropies(self) -> list[float]:
        return [e.entropy for e in self.entries]

    def argmax(self) -> int:
        """Iteration with the largest entropy; ties go to the earliest."""
        if not self.entries:
            raise ValidationError("empty metric series")
        best = max(self.entries, key=lambda e: (e.entropy, -e.iteration))
        return best.iteration

    def same_values(self, other: "MetricSeries") -> bool:
        """Equality of iterations and entropies, ignoring timings."""
        return self.iterations == other.iterations and self.entropies == other.entropies


@dataclass
class DeconvResult:
    volume: np.ndarray
    best_iter: int
    stop_iter: int
    series: MetricSeries
    transfers: object = None


def _validate_measurement(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise DimensionError(f"light-field image must be 2D, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValidationError("light-field image contains non-finite values")
    if np.any(y < 0):
        raise ValidationError("light-field image must be nonnegative")
    if not np.any(y):
        raise ValidationError("light-field image is all zero; nothing to deconvolve")
    return y


def _rl_update(x, back, normalizer, eps):
    return x * back / np.maximum(normalizer, eps)


def _ratio(y, hx, eps):
    return y / (hx + eps)


def rl_step(x_k, y, psf: PsfStack, normalizer, epsilon: float = EPS_DOUBLE, method: str = "fft") -> np.ndarray:
    """One multiplicative Richardson-Lucy update.

    ``x_next = x_k * H^T(y / (H x_k + eps)) / max(H^T 1, eps)``
    """
    x_k = np.asarray(x_k)
    y = np.asarray(y, dtype=np.float64)
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be > 0, got {epsilon}")
    if x_k.ndim != 3 or x_k.shape[0] != psf.nz or x_k.shape[1:] != y.shape:
        raise DimensionError(f"volume {x_k.shape} is inconsistent with image {y.shape} and {psf.nz} PSF layers")
    if np.asarray(normalizer).shape != x_k.shape:
        raise DimensionError(f"normalizer shape {np.shape(normalizer)} != volume shape {x_k.shape}")
    if np.any(x_k < 0) or np.any(y < 0):
        raise ValidationError("Richardson-Lucy inputs must be nonnegative")
    op = LayerOperator(psf.kernels, y.shape[0], y.shape[1], method)
    hx = reduce_layers(op.forward_layers(x_k))
    back = op.backward(_ratio(y, hx, epsilon))
    return _rl_update(x_k.astype(np.float64), back, normalizer, epsilon).astype(x_k.dtype, copy=False)


def poisson_log_likelihood(y, hx) -> float:
    """``sum(y log(Hx) - Hx)``, with ``0 log 0 = 0``."""
    y = np.asarray(y, dtype=np.float64)
    hx = np.asarray(hx, dtype=np.float64)
    pos = y > 0
    return float(np.sum(y[pos] * np.log(hx[pos])) - np.sum(hx))


def evaluate_iteration(x_k, region: CutoffRegion, config: MetricConfig | None = None) -> float:
    """DCT entropy of the z-maximum projection of an iterate."""
    return dct_entropy(max_project_z(x_k), region, config)


class SerialEngine:
    """Single-process volume state for the RL driver.

    The driver talks to an engine through ``fill``/``load``, ``forward``,
    ``update`` and the snapshot methods, so a partitioned engine can keep
    volume slabs wherever it likes.
    """

    def __init__(self, psf: PsfStack, height: int, width: int, dtype=np.float64,
                 epsilon: float | None = None, method: str = "fft"):
        self.op = LayerOperator(psf.kernels, height, width, method)
        self.shape = (psf.nz, height, width)
        self.dtype = np.dtype(dtype)
        self.epsilon = default_epsilon(dtype) if epsilon is None else epsilon
        self.normalizer = self.op.backward(np.ones((height, width)))
        self.x = np.zeros(self.shape, self.dtype)
        self.best = None

    def fill(self, value: float) -> None:
        self.x = np.full(self.shape, value, self.dtype)

    def load(self, volume) -> None:
        self.x = np.array(volume, dtype=self.dtype)

    def forward(self) -> np.ndarray:
        return reduce_layers(self.op.forward_layers(self.x))

    def update(self, ratio: np.ndarray) -> np.ndarray:
        back = self.op.backward(ratio)
        self.x = _rl_update(self.x.astype(np.float64), back, self.normalizer, self.epsilon).astype(self.dtype)
        return max_project_z(self.x).astype(np.float64)

    def mark_best(self) -> None:
        self.best = self.x.copy()

    def best_volume(self) -> np.ndarray:
        return self.best

    def close(self) -> None:
        pass


ProgressSink = Callable[[MetricEntry], None]
Evaluator = Callable[[np.ndarray], float]


def run_rl(engine, y, policy: StopPolicy, evaluator: Evaluator, init=None,
           sink: ProgressSink | None = None) -> DeconvResult:
    """Drive an engine through RL iterations under ``policy``."""
    y = _validate_measurement(y)
    eps = engine.epsilon
    if init is None:
        engine.fill(1.0)
        scale = float(np.mean(y)) / float(np.mean(engine.forward()))
        engine.fill(scale)
    else:
        init = np.asarray(init)
        if init.shape != engine.shape:
            raise DimensionError(f"init volume shape {init.shape} != {engine.shape}")
        if np.any(init < 0) or not np.all(np.isfinite(init)):
            raise ValidationError("init volume must be finite and nonnegative")
        engine.load(init)

    series = MetricSeries()
    best_entropy = -np.inf
    best_iter = 0
    entropies: list[float] = []
    while True:
        start = time.perf_counter()
        k = len(entropies) + 1
        hx = engine.forward()
        projection = engine.update(_ratio(y, hx, eps))
        value = float(evaluator(projection))
        entropies.append(value)
        if value > best_entropy:
            best_entropy, best_iter = value, k
            engine.mark_best()
        entry = MetricEntry(k, value, (time.perf_counter() - start) * 1e3)
        series.append(entry)
        if sink is not None:
            sink(entry)
        if policy.should_stop(entropies):
            break
    return DeconvResult(engine.best_volume(), best_iter, len(entropies), series)


def entropy_evaluator(region: CutoffRegion, config: MetricConfig | None = None) -> Evaluator:
    return lambda projection: dct_entropy(projection, region, config)


def deconvolve(y, psf: PsfStack, optics: OpticsParams, policy: StopPolicy | None = None,
               init=None, metric: MetricConfig | None = None, epsilon: float | None = None,
               dtype=np.float64, evaluator: Evaluator | None = None,
               sink: ProgressSink | None = None, method: str = "fft") -> DeconvResult:
    """Deconvolve a light-field image, stopping on the DCT-entropy peak.

    Parameters
    ----------
    y : ndarray
        Rectified ``(H, W)`` light-field image, nonnegative and not all zero.
    psf : PsfStack
    optics : OpticsParams
        Determines the DCT cutoff region; ``optics.nnum`` must equal ``psf.nnum``.
    policy : StopPolicy, optional
        Defaults to auto mode with up to 50 iterations.
    init : ndarray, optional
        Starting volume. By default a constant volume whose forward projection
        has the same mean as ``y``.
    evaluator : callable, optional
        Replaces the entropy metric; receives the z-maximum projection.
    sink : callable, optional
        Receives a :class:`MetricEntry` after every iteration.

    Returns
    -------
    DeconvResult
        ``volume`` is the iterate at ``best_iter``, the entropy argmax.
    """
    policy = policy or StopPolicy()
    y = _validate_measurement(y)
    if optics.nnum != psf.nnum:
        raise ValidationError(f"optics nnum={optics.nnum} does not match PSF nnum={psf.nnum}")
    check_lateral(y.shape[0], y.shape[1], psf.nnum)
    if evaluator is None:
        evaluator = entropy_evaluator(cutoff_region(optics, *y.shape), metric)
    engine = SerialEngine(psf, y.shape[0], y.shape[1], dtype, epsilon, method)
    return run_rl(engine, y, policy, evaluator, init, sink)
